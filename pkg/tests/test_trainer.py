import numpy as np
import pytest

from geoseg.data import IGNORE
from geoseg.segnet import NetConfig
from geoseg.synth import desk_intrinsics, generate_dataset, random_room
from geoseg.trainer import (
    CollapseError,
    NonFiniteGradient,
    TrainConfig,
    TrainingData,
    TrainingError,
    TrainState,
    adam_step,
    collapse_diagnostic,
    pretrain,
    predict_labels,
    run,
    train,
    train_joint,
    validate,
)

SMALL_NET = NetConfig(levels=2, base_features=4, num_classes=4, height=32, width=32)


@pytest.fixture(scope="module")
def data(small_dataset):
    return TrainingData.build(small_dataset)


def params_bytes(state):
    return {k: p.data.tobytes() for k, p in state.net.params.items()}


# --------------------------------------------------------------------- Adam


def tiny_state(values):
    state = TrainState.fresh(NetConfig(levels=1, base_features=2, num_classes=2, height=2, width=2), 0)
    for k in list(state.net.params):
        if k != "head.bias":
            del state.net.params[k], state.m[k], state.v[k]
    p = state.net.params["head.bias"]
    p.data = np.asarray(values, dtype=np.float64)
    state.m["head.bias"] = np.zeros(2)
    state.v["head.bias"] = np.zeros(2)
    return state, p


def test_zero_gradient_leaves_parameters(data):
    state = TrainState.fresh(SMALL_NET, 0)
    before = params_bytes(state)
    adam_step(state, {k: np.zeros_like(p.data) for k, p in state.net.params.items()}, TrainConfig())
    assert params_bytes(state) == before
    assert state.adam_t == 1


def test_constant_gradient_moves_lr_per_step():
    state, p = tiny_state([0.0, 0.0])
    cfg = TrainConfig(lr=1e-2)
    prev = p.data.copy()
    for _ in range(100):
        adam_step(state, {"head.bias": np.array([3.0, -0.5])}, cfg)
        step = p.data - prev
        prev = p.data.copy()
    np.testing.assert_allclose(step, [-1e-2, 1e-2], rtol=1e-5)


def scalar_adam(x, grad, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t in range(1, steps + 1):
        g = grad(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            x[i] -= lr * (m[i] / (1 - b1**t)) / ((v[i] / (1 - b2**t)) ** 0.5 + eps)
    return x


def test_quadratic_reaches_minimizer_like_reference():
    target = np.array([0.3, -0.2])
    scale = np.array([1.0, 4.0])
    grad = lambda x: [2 * scale[i] * (x[i] - target[i]) for i in range(2)]  # noqa: E731
    state, p = tiny_state([0.0, 0.0])
    cfg = TrainConfig(lr=0.05, beta1=0.5)
    for _ in range(50):
        adam_step(state, {"head.bias": np.array(grad(p.data))}, cfg)
    ref = scalar_adam([0.0, 0.0], grad, 50, 0.05, b1=0.5)
    np.testing.assert_allclose(p.data, ref, atol=1e-12)
    np.testing.assert_allclose(p.data, target, atol=1e-3)


def test_non_finite_gradient_aborts_the_step():
    state, p = tiny_state([1.0, 2.0])
    with pytest.raises(NonFiniteGradient, match="head.bias"):
        adam_step(state, {"head.bias": np.array([np.nan, 0.0])}, TrainConfig())
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.adam_t == 0


def test_moment_buffers_match_parameters():
    state = TrainState.fresh(SMALL_NET, 0)
    for k, p in state.net.params.items():
        assert state.m[k].shape == state.v[k].shape == p.shape


@pytest.mark.parametrize(
    "kwargs",
    [dict(lr=0), dict(beta1=1.0), dict(beta2=-0.1), dict(supervised_batch=0), dict(lam=-0.1), dict(joint_steps=-1)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# ------------------------------------------------------------------ training


def quick(**kwargs):
    """Short runs of an untrained net starve classes; record the diagnostic instead of raising."""
    return TrainConfig(**({"collapse_policy": "record"} | kwargs))


def test_zero_pretrain_steps_changes_nothing(data):
    state = TrainState.fresh(SMALL_NET, 0)
    before = params_bytes(state)
    pretrain(state, data, quick(pretrain_steps=0, joint_steps=5))
    assert params_bytes(state) == before
    assert state.step == 0 and state.history == []


def test_training_is_bitwise_reproducible(data):
    cfg = quick(pretrain_steps=4, joint_steps=4, validate_every=2, seed=3)
    a, b = train(SMALL_NET, data, cfg), train(SMALL_NET, data, cfg)
    assert params_bytes(a) == params_bytes(b)
    assert all(a.best_params[k].tobytes() == b.best_params[k].tobytes() for k in a.best_params)
    assert a.history == b.history


def test_zero_lambda_joint_equals_continued_pretraining(data):
    joint = quick(lam=0.0, pretrain_steps=3, joint_steps=4, seed=1)
    plain = quick(lam=0.0, pretrain_steps=7, joint_steps=0, seed=1)
    a = train(SMALL_NET, data, joint)
    b = TrainState.fresh(SMALL_NET, 1)
    pretrain(b, data, plain)
    assert params_bytes(a) == params_bytes(b)
    assert all(r["L_G"] == 0.0 for r in a.history)


def test_joint_steps_add_a_consistency_term(data):
    state = train(SMALL_NET, data, quick(pretrain_steps=2, joint_steps=3, seed=0))
    assert [r["phase"] for r in state.history] == ["pretrain"] * 2 + ["joint"] * 3
    assert all(r["L_G"] == 0.0 for r in state.history[:2])
    assert all(r["L_G"] > 0.0 for r in state.history[2:])
    for r in state.history:
        assert r["total"] == pytest.approx(r["L_S"] + 0.1 * r["L_G"], rel=1e-5)


def test_anchor_without_overlap_degenerates_to_supervised(small_dataset):
    """Blind neighbors (no depth) give no valid pixels, so the step is purely supervised."""
    blind = small_dataset.__class__(**{**small_dataset.__dict__})
    blind.frames = [
        f if f.labeled or f.split != "train" else f.__class__(**{**f.__dict__, "depth": np.zeros_like(f.depth)})
        for f in small_dataset.frames
    ]
    data = TrainingData.build(blind)
    cfg = quick(pretrain_steps=0, joint_steps=3, seed=2)
    a = train(SMALL_NET, data, cfg)
    b = train(SMALL_NET, data, quick(lam=0.0, pretrain_steps=0, joint_steps=3, seed=2))
    assert all(r["L_G"] == 0.0 for r in a.history)
    assert params_bytes(a) == params_bytes(b)


def test_best_snapshot_is_the_best_validation(data):
    cfg = quick(lr=1e-3, pretrain_steps=12, joint_steps=0, validate_every=3, seed=0)
    state = TrainState.fresh(SMALL_NET, 0)
    pretrain(state, data, cfg)
    accs = [r["val_accuracy"] for r in state.history if "val_accuracy" in r]
    assert len(accs) == 4
    assert state.best_accuracy == max(accs)
    assert state.best_step == 3 * (1 + int(np.argmax(accs)))
    metrics, _ = validate(state.best_network(), data)
    assert metrics["accuracy"] == state.best_accuracy


def test_empty_supervision_rejected(small_dataset):
    data = TrainingData.build(small_dataset)
    data.supervised = []
    with pytest.raises(TrainingError, match="empty supervision"):
        pretrain(TrainState.fresh(SMALL_NET, 0), data, quick(pretrain_steps=1))


def test_joint_training_requires_pretraining(data):
    state = TrainState.fresh(SMALL_NET, 0)
    with pytest.raises(TrainingError, match="pre-training"):
        train_joint(state, data, quick(pretrain_steps=2, joint_steps=1))
    train_joint(state, data, quick(pretrain_steps=2, joint_steps=1), require_pretrain=False)
    assert state.step == 3


def test_collapse_diagnostic_flags_starved_classes():
    truth = [np.array([[0, 1], [2, 3]], np.uint8)]
    assert collapse_diagnostic(np.array([[[0, 1], [2, 3]]]), truth, 4, 0.01) is None
    msg = collapse_diagnostic(np.zeros((1, 2, 2), np.uint8), truth, 4, 0.01)
    assert msg is not None and "[1, 2, 3]" in msg and "pre-train" in msg


def test_collapse_policy(data, monkeypatch):
    import geoseg.trainer as trainer

    monkeypatch.setattr(trainer, "predict_labels", lambda net, x: np.zeros((len(x),) + x.shape[2:], np.uint8))
    cfg = dict(pretrain_steps=1, joint_steps=1, validate_every=5)
    with pytest.raises(CollapseError):
        train(SMALL_NET, data, TrainConfig(**cfg))
    state = train(SMALL_NET, data, quick(**cfg))
    assert state.collapse is not None


def test_run_stops_at_the_budget(data):
    state = TrainState.fresh(SMALL_NET, 0)
    run(state, data, quick(pretrain_steps=2, joint_steps=1), until=50)
    assert state.step == 3


def test_pretraining_fits_labeled_pixels_of_one_scene():
    ds = generate_dataset([random_room("p", 3, desk_intrinsics(64), n_frames=10, n_heldout=2)], 0.2)
    data = TrainingData.build(ds)
    labels = np.stack([data.labels[i] for i in data.supervised])
    ok = labels != IGNORE
    state = TrainState.fresh(NetConfig(levels=3, base_features=8, num_classes=4, height=64, width=64), 0)
    cfg = quick(lr=1e-3, pretrain_steps=500, joint_steps=0, validate_every=500)
    acc = 0.0
    while state.step < 500 and acc <= 0.9:
        run(state, data, cfg, until=state.step + 50)
        acc = float(np.mean(predict_labels(state.net, data.inputs[data.supervised])[ok] == labels[ok]))
    assert acc > 0.9
