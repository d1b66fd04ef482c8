"""U-Net style encoder-decoder producing per-pixel class probabilities."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    maxpool2,
    relu,
    softmax_channels,
    upsample_nn,
)


@dataclass(frozen=True)
class NetConfig:
    levels: int = 3
    base_features: int = 8
    num_classes: int = 4
    height: int = 64
    width: int = 64
    padding: str = "reflect"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_features < 2:
            raise ValueError("base_features must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        step = 2 ** (self.levels - 1)
        if self.height % step or self.width % step:
            raise ShapeError(f"input {self.height}x{self.width} not divisible by {step} for {self.levels} levels")

    def width_at(self, level: int) -> int:
        return self.base_features * 2 ** (level - 1)

    def to_dict(self) -> dict:
        return asdict(self)


FULL_SIZE_CONFIG = dict(levels=5, base_features=32)


def layer_specs(cfg: NetConfig) -> list[tuple[str, int, int, int]]:
    """(name, cin, cout, kernel) for every convolution, in forward order."""
    specs = []
    cin = 3
    for lv in range(1, cfg.levels + 1):
        w = cfg.width_at(lv)
        specs += [(f"enc{lv}.conv1", cin, w, 3), (f"enc{lv}.conv2", w, w, 3)]
        cin = w
    for lv in range(cfg.levels - 1, 0, -1):
        w = cfg.width_at(lv)
        specs += [
            (f"dec{lv}.up", cfg.width_at(lv + 1), w, 3),
            (f"dec{lv}.conv1", 2 * w, w, 3),
            (f"dec{lv}.conv2", w, w, 3),
        ]
    specs.append(("head", cfg.base_features, cfg.num_classes, 1))
    return specs


def parameter_count(cfg: NetConfig) -> int:
    return sum(cout * cin * k * k + cout for _, cin, cout, k in layer_specs(cfg))


class Network:
    """Parameters plus the forward pass. Parameters are plain leaf tensors."""

    def __init__(self, config: NetConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state) -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def _conv(self, name: str, x: Tensor) -> Tensor:
        return conv2d(x, self.params[name + ".weight"], self.params[name + ".bias"], self.config.padding)

    def logits(self, image: Tensor) -> Tensor:
        cfg = self.config
        if image.data.ndim != 4 or image.shape[1:] != (3, cfg.height, cfg.width):
            raise ShapeError(f"expected input [B,3,{cfg.height},{cfg.width}], got {image.shape}")
        skips = []
        x = image
        for lv in range(1, cfg.levels + 1):
            x = relu(self._conv(f"enc{lv}.conv1", x))
            x = relu(self._conv(f"enc{lv}.conv2", x))
            if lv < cfg.levels:
                skips.append(x)
                x = maxpool2(x)
        for lv in range(cfg.levels - 1, 0, -1):
            up = relu(self._conv(f"dec{lv}.up", upsample_nn(x)))
            x = concat_channels([skips[lv - 1], up])
            x = relu(self._conv(f"dec{lv}.conv1", x))
            x = relu(self._conv(f"dec{lv}.conv2", x))
        return self._conv("head", x)

    def forward(self, image: Tensor) -> Tensor:
        return softmax_channels(self.logits(image))

    __call__ = forward

    def predict(self, images: np.ndarray, batch: int = 8) -> np.ndarray:
        """Probabilities for a stack of input arrays, without recording."""
        outs = [self.forward(Tensor(images[i : i + batch], dtype=self.dtype)).data for i in range(0, len(images), batch)]
        return np.concatenate(outs, axis=0)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Network":
        params = OrderedDict((k, Tensor(p.data.astype(dtype), requires_grad=True, name=k)) for k, p in self.params.items())
        return Network(self.config, params)


def build(config: NetConfig, init_seed: int = 0, dtype=np.float32) -> Network:
    """He-uniform weights, zero biases, drawn in layer order from ``init_seed``."""
    rng = np.random.default_rng(init_seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, cin, cout, k in layer_specs(config):
        bound = np.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        params[name + ".weight"] = Tensor(w, requires_grad=True, name=name + ".weight")
        params[name + ".bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=name + ".bias")
    return Network(config, params)
