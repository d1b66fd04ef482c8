"""Central finite-difference checks of every differentiable operation.

Everything here runs in float64. Relative error is compared only on
entries where either gradient exceeds ``1e-6`` in magnitude.

Piecewise ops (relu, max-pool, |x|) report the branch they take. An entry
whose +h or -h evaluation switches any branch is a stencil across a kink,
where the central difference is not a derivative estimate. Such an entry is
retried with smaller steps; if every step down to ``MIN_STEP`` still
crosses a kink it is counted as ``skipped`` and left out of the comparison.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import IGNORE, Frame
from .geometry import CorrespondenceField, Intrinsics, look_at
from .losses import combine, cross_entropy, geometric_consistency, masked_l1
from .segnet import NetConfig, build
from .tensor import (
    Tape,
    Tensor,
    concat_channels,
    conv2d,
    maxpool2,
    record_branches,
    relu,
    select,
    softmax_channels,
    upsample_nn,
)
from .warp import bilinear_sample

H_STEP = 1e-3
MIN_STEP = 1e-6
REL_TOL = 1e-3
GRAD_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    compared: int
    seconds: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL

    def as_row(self) -> dict:
        return {"name": self.name, "max_rel_error": self.max_rel_error, "compared": self.compared,
                "skipped": self.skipped, "seconds": round(self.seconds, 3), "passed": self.passed}


def _branches(f: Callable[[], float]) -> tuple[float, list]:
    with record_branches() as log:
        value = f()
    return value, log


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = H_STEP, entries=None):
    """Central differences of scalar ``f`` w.r.t. array ``x``, perturbed in place.

    An entry whose stencil crosses a kink is retried with steps shrunk by 10
    down to ``MIN_STEP``. Returns the gradient and a boolean array marking
    entries that crossed a kink at every step.
    """
    g = np.zeros_like(x, dtype=np.float64)
    kinked = np.zeros(x.shape, dtype=bool)
    flat = x.reshape(-1)
    gf, kf = g.reshape(-1), kinked.reshape(-1)
    _, base = _branches(f)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        step = h
        while True:
            flat[i] = old + step
            fp, bp = _branches(f)
            flat[i] = old - step
            fm, bm = _branches(f)
            flat[i] = old
            gf[i] = (fp - fm) / (2 * step)
            kf[i] = not (_same(base, bp) and _same(base, bm))
            if not kf[i] or step / 10 < MIN_STEP * (1 - 1e-9):
                break
            step /= 10
    return g, kinked


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR, entries=None, exclude=None) -> tuple[float, int]:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = np.ones(a.size, dtype=bool) if exclude is None else ~np.asarray(exclude).ravel()
    if entries is not None:
        a, n, keep = a[entries], n[entries], keep[entries]
    scale = np.maximum(np.abs(a), np.abs(n))
    m = (scale > floor) & keep
    if not m.any():
        return 0.0, 0
    return float(np.max(np.abs(a[m] - n[m]) / scale[m])), int(m.sum())


def check(name: str, build_loss: Callable[[], Tensor], leaves: list[Tensor], h: float = H_STEP, sample: Optional[int] = None, rng=None) -> CheckResult:
    """Compare tape gradients of ``build_loss()`` with finite differences for every leaf.

    ``sample`` limits the number of entries per leaf that are differenced.
    """
    t0 = time.perf_counter()
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    worst, count, skipped = 0.0, 0, 0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        entries = None
        if sample is not None and t.data.size > sample:
            entries = np.sort((rng or np.random.default_rng(0)).choice(t.data.size, size=sample, replace=False))
        numeric, kinked = numerical_grad(lambda: float(build_loss().data), t.data, h, entries)
        err, n = max_rel_error(analytic, numeric, entries=entries, exclude=kinked)
        worst, count = max(worst, err), count + n
        skipped += int(kinked.sum())
    return CheckResult(name, worst, count, time.perf_counter() - t0, skipped)


def _t(a) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


def away_from_zero(rng, shape, margin=0.05) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def distinct_values(rng, shape, gap=0.01) -> np.ndarray:
    """Random values whose pairwise gaps exceed ``gap`` (no max-pool ties within a step)."""
    n = int(np.prod(shape))
    base = rng.permutation(n) * gap * 3
    return (base + rng.uniform(0, gap, size=n)).reshape(shape) - base.mean()


# ---------------------------------------------------------------- per op


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list]]:
    """One random instance of each differentiable op, as (name, loss builder, leaves)."""
    cases = []
    for pad in ("reflect", "zero"):
        x, w, b = _t(rng.normal(size=(1, 2, 5, 5))), _t(rng.normal(size=(3, 2, 3, 3))), _t(rng.normal(size=3))
        r = rng.normal(size=(1, 3, 5, 5))
        cases.append((f"conv2d[{pad}]", lambda x=x, w=w, b=b, r=r, pad=pad: (conv2d(x, w, b, pad) * r).sum(), [x, w, b]))
    x, w, b = _t(rng.normal(size=(2, 3, 4, 4))), _t(rng.normal(size=(2, 3, 1, 1))), _t(rng.normal(size=2))
    r = rng.normal(size=(2, 2, 4, 4))
    cases.append(("conv2d[1x1]", lambda x=x, w=w, b=b, r=r: (conv2d(x, w, b) * r).sum(), [x, w, b]))

    x = _t(away_from_zero(rng, (2, 3, 4, 4)))
    r = rng.normal(size=x.shape)
    cases.append(("relu", lambda x=x, r=r: (relu(x) * r).sum(), [x]))

    x = _t(distinct_values(rng, (1, 1, 4, 4)))
    r = rng.normal(size=(1, 1, 2, 2))
    cases.append(("maxpool2", lambda x=x, r=r: (maxpool2(x) * r).sum(), [x]))

    x = _t(rng.normal(size=(1, 2, 3, 3)))
    r = rng.normal(size=(1, 2, 6, 6))
    cases.append(("upsample_nn", lambda x=x, r=r: (upsample_nn(x) * r).sum(), [x]))

    x = _t(3 * rng.normal(size=(2, 4, 3, 3)))
    r = rng.normal(size=x.shape)
    cases.append(("softmax_channels", lambda x=x, r=r: (softmax_channels(x) * r).sum(), [x]))

    a, c = _t(rng.normal(size=(1, 2, 3, 3))), _t(rng.normal(size=(1, 3, 3, 3)))
    r = rng.normal(size=(1, 5, 3, 3))
    cases.append(("concat_channels", lambda a=a, c=c, r=r: (concat_channels([a, c]) * r).sum(), [a, c]))

    x = _t(rng.normal(size=(3, 2, 4)))
    r = rng.normal(size=(2, 4))
    cases.append(("select", lambda x=x, r=r: (select(x, 1) * r).sum(), [x]))

    a, c = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4,)))
    cases.append(("add/mul/mean", lambda a=a, c=c: ((a + c) * a).mean() + (a * 0.5).sum(), [a, c]))

    # moderate logits keep every probability near 1/4, where h = 1e-3 is small
    logits = 0.5 * rng.normal(size=(2, 4, 3, 3))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    p = _t(probs)
    lab = rng.integers(0, 4, size=(2, 3, 3)).astype(np.uint8)
    lab[0, 0, 0] = IGNORE
    wts = rng.uniform(0.1, 1.0, size=4)
    cases.append(("cross_entropy", lambda p=p, lab=lab, wts=wts: cross_entropy(p, lab, wts), [p]))

    s, q = _t(rng.uniform(size=(3, 4, 4))), rng.uniform(size=(3, 4, 4))
    q = np.where(np.abs(s.data - q) < 0.02, q + 0.05, q)
    mask = rng.uniform(size=(4, 4)) < 0.7
    qt = Tensor(q, dtype=np.float64)
    cases.append(("masked_l1", lambda s=s, qt=qt, mask=mask: masked_l1(s, qt, mask), [s]))

    maps = _t(rng.uniform(size=(3, 5, 6)))
    u = rng.uniform(0, 5, size=(5, 6))
    v = rng.uniform(0, 4, size=(5, 6))
    valid = rng.uniform(size=(5, 6)) < 0.8
    field = CorrespondenceField(u=u, v=v, depth=np.ones((5, 6)), valid=valid)
    r = rng.normal(size=(3, 5, 6))
    cases.append(("bilinear_sample", lambda maps=maps, field=field, r=r: (bilinear_sample(maps, field)[0] * r).sum(), [maps]))
    return cases


# ------------------------------------------------------------ full chain


def two_view_instance(size: int = 8, seed: int = 0):
    """Two registered views of a tilted plane, sized for gradient checks."""
    rng = np.random.default_rng(seed)
    f = 0.9 * size
    K = Intrinsics(f, f, (size - 1) / 2, (size - 1) / 2, size, size)
    pose_a = look_at((0.0, -2.0, 0.2), (0.0, 0.0, 0.0))
    pose_b = look_at((0.12, -2.0, 0.25), (0.02, 0.0, 0.0))
    frames = []
    for i, pose in enumerate((pose_a, pose_b)):
        rays = K.rays() @ pose.rotation.T
        # plane y = 0.1 x (tilted wall facing the camera)
        o = pose.translation
        t = (0.1 * o[0] - o[1]) / (rays[..., 1] - 0.1 * rays[..., 0])
        color = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        frames.append(Frame(color=color, depth=t, pose=pose, sequence="gc", index=i))
    return K, frames[0], frames[1]


def full_chain_case(seed: int = 0, lam: float = 0.1, size: int = 8):
    """Network -> softmax -> warp -> L_S + lam * L_G with all parameters as leaves."""
    rng = np.random.default_rng(seed)
    cfg = NetConfig(levels=2, base_features=4, num_classes=3, height=size, width=size)
    net = build(cfg, init_seed=seed, dtype=np.float64)
    for p in net.params.values():
        if p.name.endswith(".bias"):
            p.data = 0.1 * rng.normal(size=p.shape)
    K, fa, fb = two_view_instance(size, seed)
    images = rng.normal(size=(2, 3, size, size))
    labels = rng.integers(0, 3, size=(size, size)).astype(np.uint8)

    # The teacher is a constant of the loss, so the difference quotients must
    # hold it fixed too: evaluate it once at the unperturbed parameters.
    teacher = Tensor(net.forward(Tensor(images[1:], dtype=np.float64)).data[0], dtype=np.float64)

    def build_loss():
        student = select(net(Tensor(images[:1], dtype=np.float64)), 0)
        ls = cross_entropy(student, labels)
        lg = geometric_consistency(student, teacher, fb, fa, K)
        return combine(ls, [lg], lam)

    return build_loss, net.parameters()


def network_case(seed: int = 0, size: int = 8):
    rng = np.random.default_rng(seed)
    cfg = NetConfig(levels=2, base_features=4, num_classes=3, height=size, width=size)
    net = build(cfg, init_seed=seed, dtype=np.float64)
    for p in net.params.values():
        if p.name.endswith(".bias"):
            p.data = 0.1 * rng.normal(size=p.shape)
    images = rng.normal(size=(1, 3, size, size))
    labels = rng.integers(0, 3, size=(1, size, size)).astype(np.uint8)
    return (lambda: cross_entropy(net(Tensor(images, dtype=np.float64)), labels)), net.parameters()


def run_suite(instances: int = 20, seed: int = 0, chain_instances: int = 2) -> list[CheckResult]:
    """Worst error per op over ``instances`` random cases, plus network and full-chain checks."""
    rng = np.random.default_rng(seed)
    worst: dict[str, CheckResult] = {}
    for _ in range(instances):
        for name, fn, leaves in op_cases(rng):
            r = check(name, fn, leaves)
            prev = worst.get(name)
            if prev is None:
                worst[name] = r
            else:
                worst[name] = CheckResult(name, max(prev.max_rel_error, r.max_rel_error), prev.compared + r.compared,
                                          prev.seconds + r.seconds, prev.skipped + r.skipped)
    out = list(worst.values())
    for i in range(chain_instances):
        out.append(check(f"network[8x8 #{i}]", *network_case(seed + i)))
        out.append(check(f"full_chain[8x8 #{i}]", *full_chain_case(seed + i)))
    return out
