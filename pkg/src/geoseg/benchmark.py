"""Paired training runs on the synthetic rooms.

Four regimes share a seed, network initialization and supervised sampling
stream:

``supervised``       manual annotations only, no consistency term
``supervised+warp``  manual plus propagated annotations, no consistency term
``s4net``            propagated annotations, then the consistency term
``s4net+na``         as ``s4net`` with the generalization rooms' training
                     sequences added as fully unlabeled data

The last three start from one shared pre-trained state. Adding sequences
without a single annotation leaves the supervised pool and its sampling
untouched, so the shared pre-training is exactly what each of those runs
would have computed on its own.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import Dataset, color_to_input
from .metrics import evaluate
from .propagation import propagate_dataset
from .segnet import NetConfig
from .synth import SceneSpec, desk_intrinsics, generate_dataset, random_room
from .trainer import TrainConfig, TrainingData, TrainState, predict_labels, run, train_joint

log = logging.getLogger(__name__)

REGIMES = ("supervised", "supervised+warp", "s4net", "s4net+na")


@dataclass
class BenchmarkConfig:
    seeds: tuple = (0, 1, 2)
    train_rooms: int = 4
    generalization_rooms: int = 2
    frames: int = 30
    labeled_fraction: float = 1 / 30
    image_size: int = 64
    pretrain_steps: int = 300
    joint_steps: int = 600
    lr: float = 1e-3
    lam: float = 0.1
    validate_every: int = 25
    dataset_seed: int = 0
    net: dict = field(default_factory=lambda: {"levels": 3, "base_features": 8})

    def train_config(self, seed: int, lam: float) -> TrainConfig:
        return TrainConfig(
            lam=lam, lr=self.lr, pretrain_steps=self.pretrain_steps, joint_steps=self.joint_steps,
            validate_every=self.validate_every, seed=seed, collapse_policy="record",
        )

    def net_config(self, num_classes: int) -> NetConfig:
        return NetConfig(num_classes=num_classes, height=self.image_size, width=self.image_size, **self.net)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


def benchmark_scenes(config: BenchmarkConfig) -> list[SceneSpec]:
    K = desk_intrinsics(config.image_size)
    specs = [random_room(f"room{i}", 100 + i, K, "train", config.frames) for i in range(config.train_rooms)]
    specs += [random_room(f"other{i}", 200 + i, K, "generalization", config.frames) for i in range(config.generalization_rooms)]
    return specs


@dataclass
class Bench:
    """Datasets and propagated labels shared by every seed."""

    plain: Dataset
    with_na: Dataset
    propagated: dict
    coverage: dict


def prepare(config: BenchmarkConfig) -> Bench:
    specs = benchmark_scenes(config)
    plain = generate_dataset(specs, config.labeled_fraction, config.dataset_seed)
    with_na = generate_dataset(specs, config.labeled_fraction, config.dataset_seed, unannotated_sequences=True)
    prop = propagate_dataset(plain.split("train"), plain.intrinsics, plain.num_classes)
    return Bench(plain, with_na, prop.labels, prop.coverage)


def _score(state: TrainState, ds: Dataset) -> dict:
    net = state.best_network()
    out = {"best_step": state.best_step, "collapse": state.collapse}
    for split in ("test", "generalization"):
        frames = ds.split(split)
        if not frames:
            continue
        preds = predict_labels(net, np.stack([color_to_input(f.color) for f in frames]))
        m = evaluate(preds, [f.truth for f in frames], ds.num_classes)
        out[f"{split}_mean_iou"] = 100.0 * m["mean_iou"]
        out[f"{split}_accuracy"] = 100.0 * m["accuracy"]
    return out


def run_seed(bench: Bench, config: BenchmarkConfig, seed: int) -> dict[str, dict]:
    ds = bench.plain
    ncfg = config.net_config(ds.num_classes)
    results = {}

    t0 = time.perf_counter()
    cfg0 = config.train_config(seed, 0.0)
    state = TrainState.fresh(ncfg, seed)
    run(state, TrainingData.build(ds, None), cfg0, cfg0.total_steps)
    results["supervised"] = _score(state, ds) | {"seconds": time.perf_counter() - t0}

    t0 = time.perf_counter()
    warp_data = TrainingData.build(ds, bench.propagated)
    pre = TrainState.fresh(ncfg, seed)
    run(pre, warp_data, cfg0, cfg0.pretrain_steps)
    pre_seconds = time.perf_counter() - t0

    na_data = TrainingData.build(bench.with_na, bench.propagated)
    plans = [
        ("supervised+warp", warp_data, 0.0),
        ("s4net", warp_data, config.lam),
        ("s4net+na", na_data, config.lam),
    ]
    for name, data, lam in plans:
        t0 = time.perf_counter()
        state = copy.deepcopy(pre)
        train_joint(state, data, config.train_config(seed, lam))
        results[name] = _score(state, ds) | {"seconds": pre_seconds + time.perf_counter() - t0}
    return results


@dataclass
class BenchmarkReport:
    config: dict
    runs: dict  # seed -> regime -> scores
    seconds: float

    def mean(self, regime: str, key: str) -> float:
        return float(np.mean([r[regime][key] for r in self.runs.values()]))

    def summary(self) -> dict:
        out = {}
        for regime in REGIMES:
            out[regime] = {
                k: self.mean(regime, k)
                for k in ("test_mean_iou", "generalization_mean_iou", "test_accuracy", "generalization_accuracy")
            }
        return out

    def checks(self) -> dict[str, bool]:
        a = self.mean("supervised", "test_mean_iou")
        b = self.mean("supervised+warp", "test_mean_iou")
        c = self.mean("s4net", "test_mean_iou")
        g_c = self.mean("s4net", "generalization_mean_iou")
        g_d = self.mean("s4net+na", "generalization_mean_iou")
        return {
            "ordering": a < b < c,
            "s4net_vs_supervised>=5": c - a >= 5.0,
            "s4net_vs_warp>0": c - b > 0.0,
            "na_sequences_help": g_d > g_c,
            "no_collapse": all(r[k]["collapse"] is None for r in self.runs.values() for k in REGIMES[1:]),
        }

    def rows(self) -> list[dict]:
        return [
            {"seed": seed, "regime": regime, **{k: v for k, v in scores.items()}}
            for seed, per in self.runs.items()
            for regime, scores in per.items()
        ]

    def to_dict(self) -> dict:
        return {"config": self.config, "runs": {str(k): v for k, v in self.runs.items()},
                "summary": self.summary(), "checks": self.checks(), "seconds": self.seconds}


def run_benchmark(config: Optional[BenchmarkConfig] = None, progress: Optional[Callable[[str], None]] = None) -> BenchmarkReport:
    config = config or BenchmarkConfig()
    t0 = time.perf_counter()
    bench = prepare(config)
    runs = {}
    for seed in config.seeds:
        runs[seed] = run_seed(bench, config, seed)
        msg = f"seed {seed}: " + ", ".join(f"{k} {v['test_mean_iou']:.2f}/{v['generalization_mean_iou']:.2f}" for k, v in runs[seed].items())
        log.info(msg)
        if progress is not None:
            progress(msg)
    return BenchmarkReport(config.to_dict(), runs, time.perf_counter() - t0)
