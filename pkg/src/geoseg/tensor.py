"""Dense tensors with a minimal reverse-mode autodiff tape.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active,
every operation that touches a tensor requiring gradients is appended to
the tape together with a closure holding the values its backward pass
needs. ``Tape.backward`` replays the entries in reverse order.

Outside a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._tape: Optional[Tape] = None  # set when produced by a recorded op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


class _Entry:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    @property
    def input_ids(self) -> tuple:
        return tuple(t.node_id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.node_id


class Tape:
    """Ordered record of operations, used as a context manager.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.], dtype=float32)
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad and (t._tape is None or t._tape is self)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        output._tape = self
        output.requires_grad = True
        self.entries.append(_Entry(kind, tuple(inputs), output, backward_fn))

    def reset(self) -> None:
        self.entries.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output_id, None)
            if g is None:
                continue
            in_grads = entry.backward_fn(g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not self.tracks(t):
                    continue
                if t._tape is None:
                    leaves[t.node_id] = t
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        for nid, t in leaves.items():
            g = grads[nid].astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        _tape_stack().append(None)

    def __exit__(self, *exc):
        _tape_stack().pop()


class record_branches:
    """Collect the branch taken by every piecewise op (relu masks, max-pool winners).

    Finite-difference checks use this to spot stencils that straddle a kink.
    """

    def __enter__(self) -> list:
        self.log: list = []
        stack = getattr(_local, "branches", None)
        if stack is None:
            stack = _local.branches = []
        stack.append(self.log)
        return self.log

    def __exit__(self, *exc):
        _local.branches.pop()


def _log_branch(arr: np.ndarray) -> None:
    stack = getattr(_local, "branches", None)
    if stack:
        stack[-1].append(arr)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _active(*inputs: Tensor) -> Optional[Tape]:
    tape = current_tape()
    if tape is None:
        return None
    return tape if any(tape.tracks(t) for t in inputs) else None


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active(*inputs)
    if tape is not None:
        tape.record(kind, inputs, out, backward_fn)
    return out


def detach(t: Tensor) -> Tensor:
    """Value-identical leaf that blocks gradient flow."""
    return Tensor(t.data, dtype=t.data.dtype)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data
    out = ad * bd
    return _emit(
        "mul",
        (a, b),
        out.astype(ad.dtype, copy=False),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _emit(
        "mean",
        (a,),
        np.asarray(a.data.mean(), dtype=a.dtype),
        lambda g: (np.full(shape, g / n, dtype=a.dtype),),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


# ------------------------------------------------------------------- spatial


def _fold_padding(gp: np.ndarray, pad: int, mode: str) -> np.ndarray:
    """Gradient of np.pad: fold a padded [B,C,H+2p,W+2p] gradient onto the input."""
    if mode == "reflect":
        g = gp.copy()
        for axis in (2, 3):
            n = g.shape[axis] - 2 * pad
            g = np.moveaxis(g, axis, 0)
            for k in range(pad):
                # padded index k mirrors input index pad - k; padded n+pad+k mirrors n-2-k
                g[2 * pad - k] += g[k]
                g[n - 2 - k + pad] += g[n + pad + k]
            g = np.moveaxis(g[pad : n + pad], 0, axis)
        return np.ascontiguousarray(g)
    return np.ascontiguousarray(gp[:, :, pad:-pad, pad:-pad])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "reflect") -> Tensor:
    """Stride-1 'same' cross-correlation with an odd square kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects x[B,Cin,H,W] and weight[Cout,Cin,k,k]")
    B, cin, H, W = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got {k}x{k2}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if padding not in ("reflect", "zero"):
        raise ValueError(f"unknown padding mode {padding!r}")
    p = k // 2
    if p and padding == "reflect" and (H < p + 1 or W < p + 1):
        raise ShapeError("reflect padding needs H, W >= 2")

    xd = x.data
    dtype = xd.dtype
    if p:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect" if padding == "reflect" else "constant")
        cols = np.empty((B, cin, k * k, H, W), dtype=dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i * k + j] = xp[:, :, i : i + H, j : j + W]
        cols = cols.reshape(B, cin * k * k, H * W)
    else:
        cols = xd.reshape(B, cin, H * W)
    wm = weight.data.reshape(cout, -1)
    out = np.matmul(wm, cols) + bias.data[:, None]
    out = out.reshape(B, cout, H, W).astype(dtype, copy=False)

    def backward(g):
        g2 = g.reshape(B, cout, H * W)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g2.sum(axis=(0, 2))
        gcols = np.matmul(wm.T, g2)
        if not p:
            return gcols.reshape(B, cin, H, W), gw, gb
        gc = gcols.reshape(B, cin, k * k, H, W)
        gp = np.zeros((B, cin, H + 2 * p, W + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gp[:, :, i : i + H, j : j + W] += gc[:, :, i * k + j]
        return _fold_padding(gp, p, padding), gw, gb

    return _emit("conv2d", (x, weight, bias), out, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max; ties go to the first position in scan order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    _log_branch(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _emit("maxpool2", (x,), np.ascontiguousarray(out), backward)


def upsample_nn(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _emit("upsample_nn", (x,), out, backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _emit("concat", tuple(tensors), out, backward)


def softmax_channels(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] < 2:
        raise ShapeError("softmax_channels expects [B,C,H,W] with C >= 2")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax", (x,), y.astype(x.dtype, copy=False), backward)


def select(x: Tensor, i: int) -> Tensor:
    """x[i] along the leading axis."""
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[i] = g
        return (gx,)

    return _emit("select", (x,), x.data[i], backward)
