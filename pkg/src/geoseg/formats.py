"""On-disk dataset, label cache and checkpoint formats.

Dataset layout (``root/``)::

    manifest.json                 format/version, intrinsics, classes, sequences
    <sequence>/color_NNNN.png     8-bit RGB
    <sequence>/depth_NNNN.png     16-bit gray, millimeters, 0 = missing
    <sequence>/label_NNNN.png     8-bit gray annotation, 255 = IGNORE (labeled frames)
    <sequence>/truth_NNNN.png     8-bit gray ground truth (optional, evaluation only)
    <sequence>/pose_NNNN.txt      4x4 camera-to-world matrix, row-major text

Checkpoint container (all integers little-endian)::

    offset 0   8 bytes   magic b"GSEGCKPT"
    offset 8   u32       format version (1)
    offset 12  u64       header length N
    offset 20  N bytes   UTF-8 JSON header (configs, counters, RNG states,
                         history, tensor table of name/dtype/shape/offset)
    ...        payload   raw tensor bytes, dtype '<f4' or '<f8', C order,
                         offsets relative to payload start
    last 4     u32       CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .data import IGNORE, SPLITS, Dataset, Frame
from .geometry import GeometryError, Intrinsics, RigidTransform
from .segnet import Network, NetConfig, build
from .trainer import TrainConfig, TrainState

DATASET_FORMAT = "geoseg-dataset"
DATASET_VERSION = 1
CKPT_MAGIC = b"GSEGCKPT"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class DatasetError(ValueError):
    def __init__(self, path, field: str, problem: str):
        self.path = str(path)
        self.field = field
        super().__init__(f"{path}: {field}: {problem}")


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ rasters


def write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path: Path, field: str) -> np.ndarray:
    if not Path(path).is_file():
        raise DatasetError(path, field, "file missing")
    try:
        with Image.open(path) as im:
            return np.array(im)
    except OSError as exc:
        raise DatasetError(path, field, f"unreadable image ({exc})") from exc


def depth_to_png(depth: np.ndarray) -> np.ndarray:
    mm = np.rint(np.asarray(depth) * 1000.0)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def depth_from_png(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 1000.0


def write_pose(path: Path, pose: RigidTransform) -> None:
    np.savetxt(path, pose.matrix, fmt="%.17g")


def read_pose(path: Path) -> RigidTransform:
    if not Path(path).is_file():
        raise DatasetError(path, "pose", "file missing")
    try:
        m = np.loadtxt(path, dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(path, "pose", f"not a numeric matrix ({exc})") from exc
    try:
        return RigidTransform.from_matrix(m)
    except GeometryError as exc:
        raise DatasetError(path, "pose", str(exc)) from exc


# ------------------------------------------------------------------ dataset


def write_dataset(ds: Dataset, root, extra: Optional[dict] = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seqs = []
    for seq, frames in ds.sequences().items():
        (root / seq).mkdir(exist_ok=True)
        entries = []
        for f in frames:
            stem = f"{f.index:04d}"
            rel = lambda kind: f"{seq}/{kind}_{stem}.{'txt' if kind == 'pose' else 'png'}"  # noqa: E731
            write_png(root / rel("color"), f.color)
            write_png(root / rel("depth"), depth_to_png(f.depth))
            write_pose(root / rel("pose"), f.pose)
            e = {"index": f.index, "split": f.split, "labeled": f.labeled, "color": rel("color"),
                 "depth": rel("depth"), "pose": rel("pose"), "annotation": None, "truth": None}
            if f.annotation is not None:
                write_png(root / rel("label"), f.annotation.astype(np.uint8))
                e["annotation"] = rel("label")
            if f.truth is not None:
                write_png(root / rel("truth"), f.truth.astype(np.uint8))
                e["truth"] = rel("truth")
            entries.append(e)
        seqs.append({"id": seq, "frames": entries})
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "intrinsics": ds.intrinsics.to_dict(),
        "class_names": list(ds.class_names),
        "num_classes": ds.num_classes,
        "sequences": seqs,
    }
    if extra:
        manifest["extra"] = extra
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def _check_extent(arr: np.ndarray, K: Intrinsics, path, field: str, channels: Optional[int] = None) -> None:
    want = K.shape if channels is None else K.shape + (channels,)
    if arr.shape != want:
        raise DatasetError(path, field, f"extents {arr.shape} != expected {want}")


def read_dataset(root) -> Dataset:
    """Load a dataset directory; errors name the offending file and field."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(mpath, "manifest", "file missing")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(mpath, "manifest", f"invalid JSON ({exc})") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(mpath, "format", f"expected {DATASET_FORMAT!r}")
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(mpath, "version", f"unsupported version {manifest.get('version')}")
    try:
        K = Intrinsics.from_dict(manifest["intrinsics"])
    except (KeyError, TypeError, GeometryError) as exc:
        raise DatasetError(mpath, "intrinsics", str(exc)) from exc
    names = list(manifest["class_names"])
    C = len(names)
    ds = Dataset(intrinsics=K, class_names=names)
    seen = set()
    for seq in manifest["sequences"]:
        sid = seq["id"]
        for e in seq["frames"]:
            where = f"{mpath} [{sid}/{e.get('index')}]"
            key = (sid, e["index"])
            if key in seen:
                raise DatasetError(where, "index", "duplicate frame")
            seen.add(key)
            if e.get("split") not in SPLITS:
                raise DatasetError(where, "split", f"unknown split {e.get('split')!r}")
            color = read_png(root / e["color"], "color")
            _check_extent(color, K, root / e["color"], "color", 3)
            depth_raw = read_png(root / e["depth"], "depth")
            _check_extent(depth_raw, K, root / e["depth"], "depth")
            pose = read_pose(root / e["pose"])
            ann = None
            if e.get("labeled"):
                if not e.get("annotation"):
                    raise DatasetError(where, "annotation", "labeled frame without annotation file")
                ann = read_png(root / e["annotation"], "annotation")
                _check_extent(ann, K, root / e["annotation"], "annotation")
                if np.any((ann != IGNORE) & (ann >= C)):
                    raise DatasetError(root / e["annotation"], "annotation", f"label >= {C} classes")
            truth = None
            if e.get("truth"):
                truth = read_png(root / e["truth"], "truth")
                _check_extent(truth, K, root / e["truth"], "truth")
            ds.frames.append(
                Frame(color=color.astype(np.uint8), depth=depth_from_png(depth_raw), pose=pose, sequence=sid,
                      index=int(e["index"]), annotation=ann, truth=truth, split=e["split"])
            )
    return ds


def write_label_cache(labels: dict, coverage: dict, root) -> Path:
    """Store propagated label maps under ``root/propagated``."""
    out = Path(root) / "propagated"
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for key, lab in sorted(labels.items()):
        rel = key.replace("/", "__") + ".png"
        write_png(out / rel, lab.astype(np.uint8))
        index[key] = {"file": rel, "coverage": coverage.get(key)}
    (out / "index.json").write_text(json.dumps(index, indent=1))
    return out


def read_label_cache(root) -> dict:
    out = Path(root) / "propagated"
    ipath = out / "index.json"
    if not ipath.is_file():
        raise DatasetError(ipath, "propagated", "label cache missing; run `geoseg propagate` first")
    index = json.loads(ipath.read_text())
    return {k: read_png(out / v["file"], "propagated") for k, v in index.items()}


# --------------------------------------------------------------- checkpoints


def _atomic_write(path: Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_checkpoint(state: TrainState, path, train_config: Optional[TrainConfig] = None) -> None:
    groups = [("param", state.net.state_dict()), ("m", state.m), ("v", state.v)]
    if state.best_params is not None:
        groups.append(("best", state.best_params))
    table, chunks, offset = [], [], 0
    for prefix, tensors in groups:
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr)
            le = a.astype(a.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            table.append({"name": f"{prefix}/{name}", "dtype": le.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "net_config": state.net.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "step": state.step,
        "adam_t": state.adam_t,
        "best_accuracy": state.best_accuracy,
        "best_step": state.best_step,
        "sup_rng": state.sup_rng,
        "cons_rng": state.cons_rng,
        "history": state.history,
        "collapse": state.collapse,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    _atomic_write(Path(path), body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path) -> tuple[TrainState, Optional[TrainConfig]]:
    """Restore a TrainState bitwise; any damage raises CheckpointError."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc})") from exc
    if len(blob) < _PREFIX.size + 4:
        raise CheckpointError(f"{path}: truncated ({len(blob)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if _PREFIX.size + hlen > len(body):
        raise CheckpointError(f"{path}: truncated header")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    header = json.loads(body[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    payload = memoryview(body)[_PREFIX.size + hlen :]

    groups: dict[str, OrderedDict] = {"param": OrderedDict(), "m": OrderedDict(), "v": OrderedDict(), "best": OrderedDict()}
    for t in header["tensors"]:
        prefix, name = t["name"].split("/", 1)
        if t["offset"] + t["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: tensor {t['name']} runs past end of file")
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        groups[prefix][name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)

    net_cfg = NetConfig(**header["net_config"])
    net = build(net_cfg)
    net.load_state_dict(groups["param"])
    state = TrainState(
        net=net,
        m=dict(groups["m"]),
        v=dict(groups["v"]),
        step=header["step"],
        adam_t=header["adam_t"],
        best_params=groups["best"] or None,
        best_accuracy=header["best_accuracy"],
        best_step=header["best_step"],
        sup_rng=header["sup_rng"],
        cons_rng=header["cons_rng"],
        history=header["history"],
        collapse=header["collapse"],
    )
    tc = TrainConfig(**header["train_config"]) if header.get("train_config") else None
    return state, tc


def load_network(path) -> Network:
    """Best-validation network from a checkpoint."""
    state, _ = read_checkpoint(path)
    return state.best_network()
