import json
import shutil
import struct

import numpy as np
import pytest

from geoseg.data import IGNORE
from geoseg.formats import (
    CKPT_MAGIC,
    CheckpointError,
    DatasetError,
    depth_from_png,
    depth_to_png,
    load_network,
    read_checkpoint,
    read_dataset,
    read_label_cache,
    write_checkpoint,
    write_dataset,
    write_label_cache,
)
from geoseg.segnet import NetConfig
from geoseg.synth import generate_dataset, random_room
from geoseg.trainer import TrainConfig, TrainingData, TrainingError, TrainState, pretrain, run, train

NET = NetConfig(levels=2, base_features=4, num_classes=4, height=32, width=32)


@pytest.fixture(scope="module")
def saved(small_dataset, tmp_path_factory):
    return write_dataset(small_dataset, tmp_path_factory.mktemp("ds"))


def fresh_copy(saved, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(saved, dst)
    return dst


# ------------------------------------------------------------------ datasets


def test_dataset_round_trip(small_dataset, saved):
    back = read_dataset(saved)
    assert back.intrinsics == small_dataset.intrinsics
    assert back.class_names == small_dataset.class_names
    assert [f.key for f in back.frames] == [f.key for f in small_dataset.frames]
    for a, b in zip(small_dataset.frames, back.frames):
        assert a.color.tobytes() == b.color.tobytes()
        assert np.abs(a.depth - b.depth).max() <= 0.0005 + 1e-12  # millimeter quantization
        np.testing.assert_allclose(b.pose.matrix, a.pose.matrix, atol=1e-15)
        assert (a.annotation is None) == (b.annotation is None)
        if a.annotation is not None:
            np.testing.assert_array_equal(a.annotation, b.annotation)
        np.testing.assert_array_equal(a.truth, b.truth)
        assert (a.split, a.labeled) == (b.split, b.labeled)


def test_depth_encoding_keeps_missing_pixels_at_zero():
    d = np.array([[0.0, 1.2344, 65.535]])
    raw = depth_to_png(d)
    assert raw.dtype == np.uint16
    np.testing.assert_allclose(depth_from_png(raw), [[0.0, 1.234, 65.535]])


def test_dataset_without_annotation_loads_but_cannot_train(K32, tmp_path):
    ds = generate_dataset([random_room("z", 1, K32, n_frames=4, n_heldout=2)], 0.5)
    for f in ds.frames:
        if f.labeled:
            f.annotation = np.full(f.shape, IGNORE, np.uint8)
    back = read_dataset(write_dataset(ds, tmp_path))
    assert len(back.frames) == len(ds.frames)
    with pytest.raises(TrainingError, match="empty supervision"):
        pretrain(TrainState.fresh(NET, 0), TrainingData.build(back), TrainConfig(pretrain_steps=1))


def corrupt_first_pose(root):
    manifest = json.loads((root / "manifest.json").read_text())
    path = root / manifest["sequences"][0]["frames"][0]["pose"]
    m = np.loadtxt(path)
    m[:3, :3] *= 1.5
    np.savetxt(path, m)
    return path


def drop_first(kind):
    def damage(root):
        manifest = json.loads((root / "manifest.json").read_text())
        path = root / manifest["sequences"][0]["frames"][0][kind]
        path.unlink()
        return path

    return damage


def edit_manifest(edit):
    def damage(root):
        path = root / "manifest.json"
        manifest = json.loads(path.read_text())
        edit(manifest)
        path.write_text(json.dumps(manifest))
        return path

    return damage


@pytest.mark.parametrize(
    "damage, field",
    [
        (corrupt_first_pose, "pose"),
        (drop_first("pose"), "pose"),
        (drop_first("color"), "color"),
        (drop_first("depth"), "depth"),
        (edit_manifest(lambda m: m.update(version=99)), "version"),
        (edit_manifest(lambda m: m.update(format="other")), "format"),
        (edit_manifest(lambda m: m["intrinsics"].update(fx=-1.0)), "intrinsics"),
        (edit_manifest(lambda m: m["sequences"][0]["frames"][0].update(split="bogus")), "split"),
    ],
    ids=["bad-pose", "missing-pose", "missing-color", "missing-depth", "version", "format", "intrinsics", "split"],
)
def test_damaged_dataset_names_file_and_field(saved, tmp_path, damage, field):
    root = fresh_copy(saved, tmp_path)
    path = damage(root)
    with pytest.raises(DatasetError) as info:
        read_dataset(root)
    assert info.value.field == field
    assert info.value.path.startswith(str(path))


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        read_dataset(tmp_path)


def test_wrong_extent_rejected(saved, tmp_path):
    from PIL import Image

    root = fresh_copy(saved, tmp_path)
    manifest = json.loads((root / "manifest.json").read_text())
    path = root / manifest["sequences"][0]["frames"][0]["color"]
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(path)
    with pytest.raises(DatasetError, match="extents"):
        read_dataset(root)


def test_label_cache_round_trip(tmp_path, rng):
    labels = {"a/0003": rng.integers(0, 4, size=(5, 6)).astype(np.uint8), "b/0001": np.full((5, 6), IGNORE, np.uint8)}
    write_label_cache(labels, {"a/0003": 1.0, "b/0001": 0.0}, tmp_path)
    back = read_label_cache(tmp_path)
    assert set(back) == set(labels)
    for k in labels:
        np.testing.assert_array_equal(back[k], labels[k])


def test_missing_label_cache_points_at_propagate(tmp_path):
    with pytest.raises(DatasetError, match="propagate"):
        read_label_cache(tmp_path)


# --------------------------------------------------------------- checkpoints


@pytest.fixture(scope="module")
def trained(small_dataset):
    data = TrainingData.build(small_dataset)
    cfg = TrainConfig(pretrain_steps=3, joint_steps=3, validate_every=2, seed=5, collapse_policy="record")
    return data, cfg, train(NET, data, cfg)


def state_bytes(state):
    parts = [state.net.state_dict(), state.m, state.v, state.best_params or {}]
    return [b"".join(d[k].tobytes() for k in sorted(d)) for d in parts]


def test_checkpoint_round_trip_is_bitwise(trained, tmp_path):
    _, cfg, state = trained
    write_checkpoint(state, tmp_path / "a.ckpt", cfg)
    back, back_cfg = read_checkpoint(tmp_path / "a.ckpt")
    assert state_bytes(back) == state_bytes(state)
    assert (back.step, back.adam_t, back.best_step, back.best_accuracy) == (state.step, state.adam_t, state.best_step, state.best_accuracy)
    assert back.sup_rng == state.sup_rng and back.cons_rng == state.cons_rng
    assert back.history == state.history
    assert back_cfg == cfg
    write_checkpoint(back, tmp_path / "b.ckpt", back_cfg)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_header_layout(trained, tmp_path):
    _, cfg, state = trained
    write_checkpoint(state, tmp_path / "c.ckpt", cfg)
    blob = (tmp_path / "c.ckpt").read_bytes()
    magic, version, hlen = struct.unpack_from("<8sIQ", blob)
    assert magic == CKPT_MAGIC and version == 1
    header = json.loads(blob[20 : 20 + hlen])
    assert header["step"] == state.step


def test_load_network_returns_best_snapshot(trained, tmp_path):
    _, cfg, state = trained
    write_checkpoint(state, tmp_path / "n.ckpt", cfg)
    net = load_network(tmp_path / "n.ckpt")
    for k, p in net.params.items():
        assert p.data.tobytes() == state.best_params[k].tobytes()


@pytest.mark.parametrize(
    "damage, message",
    [
        (lambda b: b[:-10], "checksum|truncated"),
        (lambda b: b[:12], "truncated"),
        (lambda b: b"XXXXXXXX" + b[8:], "magic"),
        (lambda b: b[:8] + struct.pack("<I", 7) + b[12:], "version"),
        (lambda b: b[:100] + bytes([b[100] ^ 1]) + b[101:], "checksum"),
    ],
    ids=["truncated-tail", "truncated-prefix", "magic", "version", "bit-flip"],
)
def test_damaged_checkpoint_rejected(trained, tmp_path, damage, message):
    _, cfg, state = trained
    path = tmp_path / "d.ckpt"
    write_checkpoint(state, path, cfg)
    path.write_bytes(damage(path.read_bytes()))
    with pytest.raises(CheckpointError, match=message):
        read_checkpoint(path)


def test_resume_reproduces_the_uninterrupted_run(trained, tmp_path):
    data, cfg, whole = trained
    for stop in (2, 4):  # inside pre-training and inside joint training
        part = TrainState.fresh(NET, cfg.seed)
        run(part, data, cfg, until=stop)
        write_checkpoint(part, tmp_path / "r.ckpt", cfg)
        resumed, rcfg = read_checkpoint(tmp_path / "r.ckpt")
        run(resumed, data, rcfg, until=rcfg.total_steps)
        assert state_bytes(resumed) == state_bytes(whole)
        assert resumed.history == whole.history
