"""Command line entry point: ``geoseg <command> [options]``.

Every command writes machine-readable output (JSON/CSV/JSONL) into
``--out`` together with matplotlib figures, logs its fully resolved
configuration, and exits nonzero on any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import report
from .data import IGNORE, color_to_input
from .formats import (
    CheckpointError,
    DatasetError,
    read_checkpoint,
    read_dataset,
    read_label_cache,
    read_png,
    write_checkpoint,
    write_dataset,
    write_label_cache,
)
from .geometry import DEFAULT_OCCL_THRESHOLD, GeometryError
from .metrics import MetricError, evaluate, iou
from .propagation import propagate_dataset, warp_annotation
from .segnet import NetConfig
from .synth import SceneError, SceneSpec, generate_dataset
from .trainer import TrainConfig, TrainingData, TrainingError, TrainState, predict_labels, run, train_joint

log = logging.getLogger("geoseg")

EXIT_ERROR = 1


class CliError(Exception):
    pass


def worker_count() -> int:
    """Worker threads, capped by GEOSEG_THREADS (default 1)."""
    raw = os.environ.get("GEOSEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"GEOSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"GEOSEG_THREADS must be a positive integer, got {raw!r}")
    return n


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise CliError(f"{p}: expected a JSON object")
    return data


def _build(cls, values: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(f"unknown {what} keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {what}: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log_config(out: Path, command: str, resolved: dict) -> None:
    record = {"command": command, "resolved": resolved, "argv": sys.argv[1:]}
    log.info("resolved config: %s", json.dumps(record, sort_keys=True, default=str))
    report.write_json(out / "config.json", record)


# ------------------------------------------------------------------ commands


def cmd_gen_synth(args) -> int:
    out = _out_dir(args)
    if args.config:
        raw = _load_json(args.config)
        if "scenes" not in raw:
            raise CliError(f"{args.config}: expected a 'scenes' list of scene specs")
        try:
            specs = [SceneSpec.from_dict(s) for s in raw["scenes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{args.config}: bad scene spec ({exc})") from exc
    else:
        from .benchmark import BenchmarkConfig, benchmark_scenes

        specs = benchmark_scenes(BenchmarkConfig())
    fraction = args.labeled_fraction if args.labeled_fraction is not None else 1 / 30
    resolved = {"labeled_fraction": fraction, "seed": args.seed, "unannotated_sequences": args.unannotated_sequences,
                "scenes": [s.to_dict() for s in specs]}
    _log_config(out, "gen-synth", resolved)
    ds = generate_dataset(specs, fraction, args.seed, unannotated_sequences=args.unannotated_sequences)
    write_dataset(ds, out, extra={"generator": {"seed": args.seed, "labeled_fraction": fraction}})
    report.write_json(out / "scenes.json", {"scenes": [s.to_dict() for s in specs]})

    rows = []
    for seq, frames in ds.sequences().items():
        rows.append({"sequence": seq, "split": frames[0].split, "frames": len(frames),
                     "labeled": sum(f.labeled for f in frames)})
    report.write_csv(out / "sequences.csv", rows)
    print(json.dumps({"frames": len(ds.frames), "sequences": len(rows), "out": str(out)}))
    return 0


def cmd_propagate(args) -> int:
    ds = read_dataset(args.dataset)
    out = Path(args.out) if args.out else Path(args.dataset)
    out.mkdir(parents=True, exist_ok=True)
    occl = args.occl_threshold if args.occl_threshold is not None else DEFAULT_OCCL_THRESHOLD
    workers = worker_count()
    _log_config(out, "propagate", {"dataset": args.dataset, "occl_threshold": occl, "seed": args.seed, "workers": workers})
    t0 = time.perf_counter()
    res = propagate_dataset(ds.split("train"), ds.intrinsics, ds.num_classes, occl, args.seed, workers)
    write_label_cache(res.labels, res.coverage, out)

    truth = {f.key: f.truth for f in ds.split("train")}
    rows = []
    for key in sorted(res.labels):
        lab, t = res.labels[key], truth.get(key)
        row = {"frame": key, "coverage": res.coverage[key]}
        ok = lab != IGNORE
        if t is not None and ok.any():
            row["agreement_with_truth"] = float(np.mean(lab[ok] == t[ok]))
        rows.append(row)
    report.write_csv(out / "coverage.csv", rows, ["frame", "coverage", "agreement_with_truth"])
    if res.coverage:
        report.plot_coverage(res.coverage, out / "coverage.png")
    summary = {
        "frames": len(rows),
        "mean_coverage": float(np.mean(list(res.coverage.values()))) if rows else 0.0,
        "uncovered": res.uncovered,
        "seconds": time.perf_counter() - t0,
    }
    report.write_json(out / "propagation.json", summary)
    print(json.dumps({k: summary[k] for k in ("frames", "mean_coverage")}))
    return 0


def _train_configs(args) -> tuple[NetConfig, TrainConfig, bool]:
    raw = _load_json(args.config)
    net_raw = dict(raw.pop("net", {}))
    use_prop = bool(raw.pop("propagated", True))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.lam is not None:
        raw["lam"] = args.lam
    if args.occl_threshold is not None:
        raw["occl_threshold"] = args.occl_threshold
    tcfg = _build(TrainConfig, raw, "train config")
    return net_raw, tcfg, use_prop


def cmd_train(args) -> int:
    ds = read_dataset(args.dataset)
    out = _out_dir(args)
    net_raw, tcfg, use_prop = _train_configs(args)
    net_raw.setdefault("num_classes", ds.num_classes)
    net_raw.setdefault("height", ds.intrinsics.height)
    net_raw.setdefault("width", ds.intrinsics.width)
    ncfg = _build(NetConfig, net_raw, "net config")
    if ncfg.num_classes != ds.num_classes:
        raise CliError(f"net config has {ncfg.num_classes} classes, dataset has {ds.num_classes}")

    propagated = None
    if use_prop:
        try:
            propagated = read_label_cache(args.dataset)
        except DatasetError:
            log.info("no label cache in %s; propagating now", args.dataset)
            propagated = propagate_dataset(
                ds.split("train"), ds.intrinsics, ds.num_classes, tcfg.occl_threshold, tcfg.seed, worker_count()
            ).labels
    data = TrainingData.build(ds, propagated)

    ckpt = out / "checkpoint.gsck"
    if args.resume:
        state, saved = read_checkpoint(args.resume)
        if saved is not None and saved.to_dict() != tcfg.to_dict():
            raise CliError("resume: train config differs from the one stored in the checkpoint")
        if state.net.config != ncfg:
            raise CliError("resume: network config differs from the one stored in the checkpoint")
    else:
        state = TrainState.fresh(ncfg, tcfg.seed)
    _log_config(out, "train", {"dataset": args.dataset, "net": ncfg.to_dict(), "train": tcfg.to_dict(),
                               "propagated": use_prop, "resume": args.resume, "stop_at": args.stop_at})

    stop = tcfg.total_steps if args.stop_at is None else min(args.stop_at, tcfg.total_steps)
    t0 = time.perf_counter()
    last = [t0]

    def progress(rec):
        if "val_accuracy" in rec:
            now = time.perf_counter()
            log.info("step %d %s L_S %.4f L_G %.4f val acc %.4f mIoU %.4f (%.1fs)", rec["step"], rec["phase"],
                     rec["L_S"], rec["L_G"], rec["val_accuracy"], rec["val_mean_iou"], now - last[0])
            last[0] = now

    try:
        if stop == tcfg.total_steps:
            run(state, data, tcfg, tcfg.pretrain_steps, progress)
            train_joint(state, data, tcfg, progress)
        else:
            run(state, data, tcfg, stop, progress)
    finally:
        # keep whatever was reached so a failed run can be inspected or resumed
        write_checkpoint(state, ckpt, tcfg)
        report.write_jsonl(out / "history.jsonl", state.history)
        if state.history:
            report.plot_training_curves(state.history, out / "training_curves.png")

    metrics = {"step": state.step, "best_step": state.best_step, "best_val_accuracy": state.best_accuracy,
               "collapse": state.collapse, "seconds": time.perf_counter() - t0}
    net = state.best_network()
    for split in ("validation", "test", "generalization"):
        frames = ds.split(split)
        if frames and all(f.truth is not None for f in frames):
            preds = predict_labels(net, np.stack([color_to_input(f.color) for f in frames]))
            metrics[split] = evaluate(preds, [f.truth for f in frames], ds.num_classes)
    report.write_json(out / "metrics.json", metrics)
    print(json.dumps({"checkpoint": str(ckpt), "step": state.step, "best_step": state.best_step,
                      **{f"{s}_mean_iou": metrics[s]["mean_iou"] for s in ("test", "generalization") if s in metrics}}))
    return 0


def _read_predictions(root: Path, frames, num_classes: int) -> list[np.ndarray]:
    preds = []
    for f in frames:
        path = root / f.sequence / f"{f.index:04d}.png"
        arr = read_png(path, "prediction")
        if arr.shape != f.shape:
            raise DatasetError(path, "prediction", f"extents {arr.shape} != {f.shape}")
        if np.any(arr >= num_classes):
            raise DatasetError(path, "prediction", f"label >= {num_classes} classes")
        preds.append(arr)
    return preds


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.predictions is None):
        raise CliError("eval needs exactly one of --checkpoint or --predictions")
    ds = read_dataset(args.dataset)
    out = _out_dir(args)
    frames = ds.split(args.split)
    if not frames:
        raise CliError(f"split {args.split!r} has no frames")
    missing = [f.key for f in frames if f.truth is None]
    if missing:
        raise CliError(f"split {args.split!r} lacks ground truth for {len(missing)} frames (first: {missing[0]})")
    _log_config(out, "eval", {"dataset": args.dataset, "split": args.split, "checkpoint": args.checkpoint,
                              "predictions": args.predictions})
    if args.checkpoint:
        state, _ = read_checkpoint(args.checkpoint)
        net = state.best_network()
        if net.config.num_classes != ds.num_classes:
            raise CliError(f"checkpoint predicts {net.config.num_classes} classes, dataset has {ds.num_classes}")
        preds = list(predict_labels(net, np.stack([color_to_input(f.color) for f in frames])))
    else:
        preds = _read_predictions(Path(args.predictions), frames, ds.num_classes)
    truths = [f.truth for f in frames]
    m = evaluate(preds, truths, ds.num_classes)
    res = iou(preds, truths, ds.num_classes)
    report.write_json(out / "eval.json", {"split": args.split, "frames": len(frames), **m})
    report.write_csv(out / "iou.csv", [{"class": n, "iou": m.get(f"iou_{c}")} for c, n in enumerate(ds.class_names)])
    report.plot_confusion(res.confusion, ds.class_names, out / "confusion.png")
    print(json.dumps({"split": args.split, "accuracy": m["accuracy"], "mean_iou": m["mean_iou"]}))
    return 0


def _find_frame(ds, key: str):
    for f in ds.frames:
        if f.key == key:
            return f
    raise CliError(f"frame {key!r} not in dataset (keys look like 'room0-train/0015')")


def cmd_warp_preview(args) -> int:
    ds = read_dataset(args.dataset)
    out = _out_dir(args)
    src, tgt = _find_frame(ds, args.source), _find_frame(ds, args.target)
    if src.annotation is None and src.truth is None:
        raise CliError(f"source frame {src.key} has neither annotation nor ground truth")
    occl = args.occl_threshold if args.occl_threshold is not None else DEFAULT_OCCL_THRESHOLD
    _log_config(out, "warp-preview", {"dataset": args.dataset, "source": src.key, "target": tgt.key, "occl_threshold": occl})
    labels = src.annotation if src.annotation is not None else src.truth
    warped = warp_annotation(src.with_annotation(labels), tgt, ds.intrinsics, occl)
    ok = warped != IGNORE
    stats = {"source": src.key, "target": tgt.key, "valid_fraction": float(ok.mean())}
    if tgt.truth is not None and ok.any():
        stats["agreement_with_truth"] = float(np.mean(warped[ok] == tgt.truth[ok]))
    report.plot_warp_preview(src.color, labels, tgt.color, warped, tgt.truth, ds.num_classes, out / "warp_preview.png")
    report.write_json(out / "warp_preview.json", stats)
    print(json.dumps(stats))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import REL_TOL, run_suite

    out = _out_dir(args)
    _log_config(out, "gradcheck", {"seed": args.seed, "instances": args.instances,
                                        "chain_instances": args.chain_instances, "rel_tol": REL_TOL})
    t0 = time.perf_counter()
    results = run_suite(instances=args.instances, seed=args.seed, chain_instances=args.chain_instances)
    rows = [r.as_row() for r in results]
    report.write_csv(out / "gradcheck.csv", rows)
    report.plot_gradcheck(rows, out / "gradcheck.png", REL_TOL)
    passed = all(r.passed for r in results)
    report.write_json(out / "gradcheck.json", {"passed": passed, "seconds": time.perf_counter() - t0, "ops": rows})
    for r in rows:
        print(f"{r['name']:<24} {r['max_rel_error']:.3e} {'ok' if r['passed'] else 'FAIL'}")
    return 0 if passed else EXIT_ERROR


def cmd_benchmark(args) -> int:
    from .benchmark import BenchmarkConfig, run_benchmark

    out = _out_dir(args)
    raw = _load_json(args.config)
    if args.seeds:
        raw["seeds"] = tuple(args.seeds)
    if args.lam is not None:
        raw["lam"] = args.lam
    if args.labeled_fraction is not None:
        raw["labeled_fraction"] = args.labeled_fraction
    cfg = _build(BenchmarkConfig, raw, "benchmark config")
    _log_config(out, "benchmark", cfg.to_dict())
    rep = run_benchmark(cfg, progress=lambda msg: log.info(msg))
    report.write_json(out / "benchmark.json", rep.to_dict())
    report.write_csv(out / "benchmark.csv", rep.rows(),
                     ["seed", "regime", "test_mean_iou", "generalization_mean_iou", "test_accuracy",
                      "generalization_accuracy", "best_step", "collapse", "seconds"])
    for split in ("test", "generalization"):
        report.plot_iou_bars(
            {k: [r[k][f"{split}_mean_iou"] for r in rep.runs.values()] for k in rep.runs[cfg.seeds[0]]},
            out / f"benchmark_{split}.png", ylabel=f"{split} mean IoU",
        )
    for name, ok in rep.checks().items():
        print(f"{name:<24} {'pass' if ok else 'FAIL'}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoseg", description="Semi-supervised segmentation with multi-view geometric consistency.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-synth", cmd_gen_synth, "render a synthetic RGB-D dataset")
    sp.add_argument("--config", help="JSON file with a 'scenes' list (default: the benchmark rooms)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--labeled-fraction", type=float)
    sp.add_argument("--unannotated-sequences", action="store_true", help="add generalization rooms' sequences without labels")
    sp.add_argument("--out", required=True)

    sp = add("propagate", cmd_propagate, "warp annotations to unlabeled frames and cache them")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--occl-threshold", type=float)
    sp.add_argument("--seed", type=int, default=0, help="tie-break seed")
    sp.add_argument("--out", help="where the cache and report go (default: the dataset)")

    sp = add("train", cmd_train, "pre-train, then train jointly; writes a checkpoint and metrics")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--config", help="JSON train config; optional 'net' object and 'propagated' flag")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--occl-threshold", type=float)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--stop-at", type=int, help="stop at this global step (resume later)")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "accuracy and IoU of a checkpoint (or stored predictions) on a split")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions", help="directory of <sequence>/<NNNN>.png label maps")
    sp.add_argument("--split", default="test", choices=("train", "validation", "test", "generalization"))
    sp.add_argument("--out", required=True)

    sp = add("warp-preview", cmd_warp_preview, "warp one frame's labels into another view")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--source", required=True, help="frame key, e.g. room0-train/0015")
    sp.add_argument("--target", required=True)
    sp.add_argument("--occl-threshold", type=float)
    sp.add_argument("--out", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference checks of every differentiable op")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--chain-instances", type=int, default=2, help="network and full-chain cases")
    sp.add_argument("--out", required=True)

    sp = add("benchmark", cmd_benchmark, "paired runs of the four training regimes on the synthetic rooms")
    sp.add_argument("--config", help="JSON benchmark config")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--labeled-fraction", type=float)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DatasetError, CheckpointError, TrainingError, SceneError, GeometryError, MetricError) as exc:
        print(f"geoseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
