"""Supervised pre-training, then joint supervised + geometric-consistency training.

One global step counter drives both phases: steps below ``pretrain_steps``
use only the cross-entropy term; later steps add the consistency term. This
makes a run resumable from any checkpoint.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import IGNORE, Dataset, Frame, color_to_input
from .geometry import DEFAULT_OCCL_THRESHOLD
from .losses import ConsistencyBatch, LossConfig, SupervisedBatch, loss_terms
from .metrics import evaluate
from .segnet import Network, NetConfig, build
from .tensor import Tape

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class CollapseError(TrainingError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-4
    supervised_batch: int = 4
    consistency_batch: int = 1
    neighbor_count: int = 3
    pretrain_steps: int = 300
    joint_steps: int = 300
    validate_every: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    occl_threshold: float = DEFAULT_OCCL_THRESHOLD
    class_weights: Optional[list] = None
    collapse_fraction: float = 0.01
    collapse_policy: str = "raise"  # or "record"

    def __post_init__(self):
        for name in ("supervised_batch", "consistency_batch", "neighbor_count", "validate_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pretrain_steps < 0 or self.joint_steps < 0:
            raise ValueError("step budgets must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must be in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.collapse_policy not in ("raise", "record"):
            raise ValueError("collapse_policy must be 'raise' or 'record'")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.class_weights, self.neighbor_count, self.occl_threshold)

    @property
    def total_steps(self) -> int:
        return self.pretrain_steps + self.joint_steps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    net: Network
    m: dict
    v: dict
    step: int = 0
    adam_t: int = 0
    best_params: Optional[dict] = None
    best_accuracy: float = -1.0
    best_step: int = -1
    sup_rng: dict = field(default_factory=dict)
    cons_rng: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    collapse: Optional[str] = None

    @classmethod
    def fresh(cls, net_config: NetConfig, seed: int) -> "TrainState":
        net = build(net_config, init_seed=seed)
        zeros = {k: np.zeros_like(p.data) for k, p in net.params.items()}
        ss = np.random.SeedSequence(seed)
        sup, cons = ss.spawn(2)
        return cls(
            net=net,
            m=zeros,
            v={k: z.copy() for k, z in zeros.items()},
            sup_rng=np.random.PCG64(sup).state,
            cons_rng=np.random.PCG64(cons).state,
        )

    def best_network(self) -> Network:
        net = Network(self.net.config, build(self.net.config).params)
        net.load_state_dict(self.best_params if self.best_params is not None else self.net.state_dict())
        return net


# --------------------------------------------------------------------- Adam


def adam_step(state: TrainState, grads: dict, config: TrainConfig) -> TrainState:
    """Bias-corrected Adam update in place; refuses non-finite gradients."""
    bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient at step {state.step} in: {', '.join(bad)}")
    t = state.adam_t + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in state.net.params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        update = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    state.adam_t = t
    return state


# ---------------------------------------------------------------------- data


@dataclass
class TrainingData:
    """Arrays the training loop needs, prepared once.

    ``labels`` holds manual or propagated annotations per training frame
    (None for frames with nothing). Ground truth of training frames is never
    read here.
    """

    frames: list[Frame]
    inputs: np.ndarray
    labels: list
    supervised: list[int]
    anchors: list[int]
    neighbors: dict
    val_inputs: np.ndarray
    val_truth: list
    dataset: Dataset

    @classmethod
    def build(cls, ds: Dataset, propagated: Optional[dict] = None, validation_split: str = "validation") -> "TrainingData":
        frames = ds.split("train")
        labels = []
        for f in frames:
            lab = f.annotation
            if lab is None and propagated is not None:
                lab = propagated.get(f.key)
            labels.append(lab)
        supervised = [i for i, lab in enumerate(labels) if lab is not None and np.any(lab != IGNORE)]
        by_seq: dict[str, list[int]] = {}
        for i, f in enumerate(frames):
            by_seq.setdefault(f.sequence, []).append(i)
        anchors = [i for i, f in enumerate(frames) if not f.labeled and len(by_seq[f.sequence]) > 1]
        neighbors = {i: [j for j in by_seq[frames[i].sequence] if j != i] for i in anchors}
        inputs = np.stack([color_to_input(f.color) for f in frames]) if frames else np.zeros((0, 3) + ds.intrinsics.shape, np.float32)
        val = ds.split(validation_split)
        val_inputs = np.stack([color_to_input(f.color) for f in val]) if val else np.zeros((0, 3) + ds.intrinsics.shape, np.float32)
        return cls(frames, inputs, labels, supervised, anchors, neighbors, val_inputs, [f.truth for f in val], ds)


def predict_labels(net: Network, inputs: np.ndarray) -> np.ndarray:
    return net.predict(inputs).argmax(axis=1).astype(np.uint8)


def validate(net: Network, data: TrainingData) -> tuple[dict, np.ndarray]:
    preds = predict_labels(net, data.val_inputs)
    return evaluate(preds, data.val_truth, net.config.num_classes), preds


def collapse_diagnostic(preds: np.ndarray, truths: list, num_classes: int, fraction: float) -> Optional[str]:
    """Message if some class present in ground truth is predicted on < ``fraction`` of pixels."""
    present = set()
    for t in truths:
        present.update(int(c) for c in np.unique(t) if c != IGNORE)
    hist = np.bincount(np.asarray(preds).ravel(), minlength=num_classes) / max(np.asarray(preds).size, 1)
    starved = [c for c in sorted(present) if hist[c] < fraction]
    if not starved:
        return None
    return (
        f"single-class collapse suspected: classes {starved} predicted on < {fraction:.0%} of validation pixels "
        f"(histogram {np.round(hist, 4).tolist()}); pre-train on the supervised term before adding consistency"
    )


# ---------------------------------------------------------------------- loop


def _supervised_batch(data: TrainingData, rng: np.random.Generator, size: int) -> np.ndarray:
    pool = data.supervised
    return np.asarray(pool)[rng.choice(len(pool), size=size, replace=len(pool) < size)]


def train_step(state: TrainState, data: TrainingData, config: TrainConfig, joint: bool) -> dict:
    net = state.net
    sup_rng = np.random.Generator(np.random.PCG64())
    sup_rng.bit_generator.state = state.sup_rng
    idx = _supervised_batch(data, sup_rng, config.supervised_batch)
    state.sup_rng = sup_rng.bit_generator.state

    use_geo = joint and config.lam > 0 and bool(data.anchors)
    groups = []
    if use_geo:
        cons_rng = np.random.Generator(np.random.PCG64())
        cons_rng.bit_generator.state = state.cons_rng
        for _ in range(config.consistency_batch):
            a = data.anchors[cons_rng.integers(len(data.anchors))]
            cand = data.neighbors[a]
            nb = [cand[j] for j in cons_rng.choice(len(cand), size=min(config.neighbor_count, len(cand)), replace=False)]
            groups.append((a, nb))
        state.cons_rng = cons_rng.bit_generator.state

    sup = SupervisedBatch(data.inputs[idx], np.stack([data.labels[i] for i in idx]))
    cons = [
        ConsistencyBatch(data.frames[a], data.inputs[a], [data.frames[j] for j in nb], data.inputs[nb], data.dataset.intrinsics)
        for a, nb in groups
    ]
    net.zero_grad()
    with Tape() as tape:
        parts = loss_terms(sup, cons, net, config.loss_config())
        loss = parts.total
    tape.backward(loss)
    adam_step(state, {k: p.grad for k, p in net.params.items()}, config)
    return {"L_S": float(parts.supervised.data), "L_G": parts.consistency_value, "total": float(loss.data)}


def _record_validation(state: TrainState, data: TrainingData, rec: dict) -> None:
    if not len(data.val_inputs):
        return
    metrics, _ = validate(state.net, data)
    rec.update({"val_accuracy": metrics["accuracy"], "val_mean_iou": metrics["mean_iou"]})
    if metrics["accuracy"] > state.best_accuracy:
        state.best_accuracy = metrics["accuracy"]
        state.best_step = state.step
        state.best_params = state.net.state_dict()


def run(
    state: TrainState,
    data: TrainingData,
    config: TrainConfig,
    until: int,
    on_record: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Advance training to global step ``until``."""
    if not data.supervised:
        raise TrainingError("no training frame carries any annotation (empty supervision)")
    until = min(until, config.total_steps)
    while state.step < until:
        joint = state.step >= config.pretrain_steps
        rec = {"step": state.step + 1, "phase": "joint" if joint else "pretrain"}
        rec.update(train_step(state, data, config, joint))
        state.step += 1
        if state.step % config.validate_every == 0 or state.step == config.total_steps:
            _record_validation(state, data, rec)
        state.history.append(rec)
        if on_record is not None:
            on_record(rec)
    return state


def pretrain(state: TrainState, data: TrainingData, config: TrainConfig, on_record=None) -> TrainState:
    """Supervised-only steps up to ``config.pretrain_steps``."""
    return run(state, data, config, config.pretrain_steps, on_record)


def train_joint(
    state: TrainState, data: TrainingData, config: TrainConfig, on_record=None, require_pretrain: bool = True
) -> TrainState:
    """Joint steps up to ``config.total_steps``, then the collapse check."""
    if require_pretrain and state.step < config.pretrain_steps:
        raise TrainingError(f"pre-training incomplete ({state.step}/{config.pretrain_steps} steps)")
    run(state, data, config, config.total_steps, on_record)
    if len(data.val_inputs):
        preds = predict_labels(state.net, data.val_inputs)
        state.collapse = collapse_diagnostic(preds, data.val_truth, state.net.config.num_classes, config.collapse_fraction)
        if state.collapse:
            log.warning(state.collapse)
            if config.collapse_policy == "raise":
                raise CollapseError(state.collapse)
    return state


def train(net_config: NetConfig, data: TrainingData, config: TrainConfig, on_record=None) -> TrainState:
    state = TrainState.fresh(net_config, config.seed)
    pretrain(state, data, config, on_record)
    return train_joint(state, data, config, on_record)


def history_jsonl(state: TrainState) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in state.history)
