"""Report files: JSON/CSV/JSONL records plus matplotlib figures beside them."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import IGNORE  # noqa: E402

# ground, structure, furniture, props; extra classes cycle through tab10
CLASS_COLORS = np.array([[46, 160, 67], [52, 101, 164], [0, 190, 190], [230, 200, 20]], dtype=np.uint8)


def class_colors(n: int) -> np.ndarray:
    if n <= len(CLASS_COLORS):
        return CLASS_COLORS[:n]
    cmap = plt.get_cmap("tab10")
    extra = (np.array([cmap(i % 10)[:3] for i in range(n - len(CLASS_COLORS))]) * 255).astype(np.uint8)
    return np.concatenate([CLASS_COLORS, extra])


def colorize(labels: np.ndarray, num_classes: int) -> np.ndarray:
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[:num_classes] = class_colors(num_classes)
    lut[IGNORE] = 0
    return lut[labels]


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, rows: Sequence[dict], fields: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(fields or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def write_jsonl(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curves(history: list[dict], path) -> Path:
    steps = [r["step"] for r in history]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax0.plot(steps, [r["L_S"] for r in history], lw=0.8, label="supervised")
    if any(r["L_G"] for r in history):
        ax0.plot(steps, [r["L_G"] for r in history], lw=0.8, label="consistency")
    ax0.set_xlabel("step")
    ax0.set_ylabel("loss")
    ax0.legend(frameon=False)
    val = [r for r in history if "val_accuracy" in r]
    if val:
        ax1.plot([r["step"] for r in val], [r["val_accuracy"] for r in val], "o-", ms=3, label="accuracy")
        ax1.plot([r["step"] for r in val], [r["val_mean_iou"] for r in val], "s-", ms=3, label="mean IoU")
        ax1.set_ylim(0, 1)
        ax1.legend(frameon=False)
    ax1.set_xlabel("step")
    ax1.set_title("validation", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(cm: np.ndarray, class_names: Sequence[str], path) -> Path:
    norm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(class_names)), class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    for i in range(len(class_names)):
        for j in range(len(class_names)):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if norm[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_iou_bars(results: dict[str, list[float]], path, ylabel: str = "mean IoU") -> Path:
    """Bars of mean +- std over seeds for each training regime."""
    names = list(results)
    means = [np.mean(results[n]) for n in names]
    stds = [np.std(results[n]) for n in names]
    fig, ax = plt.subplots(figsize=(1.4 + 1.3 * len(names), 3.2))
    ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="0.6")
    ax.set_xticks(range(len(names)), names, fontsize=8)
    ax.set_ylabel(ylabel)
    lo = min(means) - 2 * max(stds + [1.0])
    ax.set_ylim(max(lo, 0), min(max(means) + 2 * max(stds + [1.0]), 100))
    return _save(fig, path)


def plot_coverage(coverage: dict[str, float], path) -> Path:
    keys = sorted(coverage)
    fig, ax = plt.subplots(figsize=(max(4, 0.08 * len(keys)), 2.8))
    ax.bar(range(len(keys)), [coverage[k] for k in keys], width=1.0, color="0.4")
    ax.set_ylim(0, 1)
    ax.set_xlabel("unlabeled frame")
    ax.set_ylabel("propagated coverage")
    return _save(fig, path)


def plot_warp_preview(
    source_color, source_labels, target_color, warped_labels, target_truth, num_classes: int, path
) -> Path:
    panels = [
        ("source", source_color),
        ("source labels", colorize(source_labels, num_classes)),
        ("target", target_color),
        ("warped labels", colorize(warped_labels, num_classes)),
    ]
    if target_truth is not None:
        panels.append(("target truth", colorize(target_truth, num_classes)))
    overlay = target_color.astype(np.float64).copy()
    ok = warped_labels != IGNORE
    overlay[ok] = 0.5 * overlay[ok] + 0.5 * colorize(warped_labels, num_classes)[ok]
    panels.append(("overlay", overlay.astype(np.uint8)))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.0 * len(panels), 2.3))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img, interpolation="nearest")
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    return _save(fig, path)


def plot_gradcheck(rows: list[dict], path, tol: float) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 0.3 * len(rows) + 1.2))
    errs = [max(r["max_rel_error"], 1e-16) for r in rows]
    ax.barh(range(len(rows)), errs, color=["0.5" if e < tol else "tab:red" for e in errs])
    ax.axvline(tol, color="k", lw=0.8, ls="--")
    ax.set_xscale("log")
    ax.set_yticks(range(len(rows)), [r["name"] for r in rows], fontsize=8)
    ax.set_xlabel("max relative error")
    return _save(fig, path)
