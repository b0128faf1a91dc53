import math

import numpy as np
import pytest

from chanid.nn.models import Model, build_spec
from chanid.nn.training import (
    AdamState, TrainConfig, TrainingDivergedError, adam_step, cross_entropy_loss, evaluate,
    inference_latency, one_hot, train,
)


# ---- loss ----

def test_cross_entropy_perfect_prediction():
    y = one_hot([2])[0]
    assert cross_entropy_loss(y, y) == 0.0


def test_cross_entropy_uniform():
    assert cross_entropy_loss(np.full(5, 0.2), one_hot([4])[0]) == pytest.approx(math.log(5), abs=1e-12)


def test_cross_entropy_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))
        k = int(rng.integers(5))
        assert cross_entropy_loss(p, one_hot([k])[0]) == pytest.approx(-math.log(p[k]), abs=1e-10)


def test_cross_entropy_clamps_zero():
    assert cross_entropy_loss([0.0, 1.0], [1.0, 0.0]) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_length_mismatch():
    with pytest.raises(ValueError):
        cross_entropy_loss([0.5, 0.5], [1.0, 0.0, 0.0])


# ---- Adam ----

def scalar_adam(w, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(w)
    return trace


def test_adam_matches_scalar_reference():
    grad = lambda w: 2 * (w - 3.0)
    ref = scalar_adam(0.5, grad, 0.1, 10)
    w = {"w": np.array([0.5])}
    state = AdamState(lr=0.1)
    for t in range(10):
        adam_step(w, {"w": grad(w["w"])}, state)
        assert w["w"][0] == pytest.approx(ref[t], abs=1e-10)
    assert state.step == 10


def test_adam_zero_gradient_keeps_weights():
    w = {"a": np.array([1.0, -2.0])}
    state = AdamState()
    for _ in range(5):
        adam_step(w, {"a": np.zeros(2)}, state)
    np.testing.assert_array_equal(w["a"], [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    w = {"a": np.array([0.0, 0.0])}
    adam_step(w, {"a": np.array([3.0, -0.01])}, AdamState(lr=0.01))
    np.testing.assert_allclose(w["a"], [-0.01, 0.01], rtol=1e-5)


def test_adam_moments_match_params():
    model = Model(build_spec("emev", 2, 2, 3))
    state = AdamState()
    model.zero_grad()
    adam_step(model.parameters(), model.gradients(), state)
    for k, v in model.parameters().items():
        assert state.m[k].shape == v.shape and state.v[k].shape == v.shape


# ---- training loop ----

def toy_data(n, dims=(2, 2, 3), seed=0, arch="emev"):
    rng = np.random.default_rng(seed)
    spec = build_spec(arch, *dims)
    x = [rng.standard_normal((n,) + s).astype(np.float32) for s in spec.input_shapes]
    y = np.arange(n) % 5
    return spec, x, y


def test_memorize_two_samples():
    spec, x, y = toy_data(2)
    model = Model(spec, seed=0)
    cfg = TrainConfig(learning_rate=1e-3, epochs=200, batch_size=2, seed=0)
    _, hist = train(model, x, y, [a[:0] for a in x], y[:0], cfg)
    assert len(hist) == 200
    assert hist[-1]["train_loss"] < 0.01
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_training_is_deterministic():
    spec, x, y = toy_data(20)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=5)
    finals = []
    for _ in range(2):
        model = Model(spec, seed=2)
        train(model, x, y, x, y, cfg)
        finals.append(model.parameters())
    assert all(finals[0][k].tobytes() == finals[1][k].tobytes() for k in finals[0])


def test_history_fields():
    spec, x, y = toy_data(10)
    _, hist = train(Model(spec), x, y, x, y, TrainConfig(epochs=2, batch_size=5))
    assert [r["epoch"] for r in hist] == [1, 2]
    assert set(hist[0]) == {"epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "seconds"}


def test_early_stop_restores_best():
    # validation labels disagree with training labels, so val loss rises
    spec, x, y = toy_data(10)
    y_val = (y + 1) % 5
    model = Model(spec, seed=1)
    cfg = TrainConfig(learning_rate=1e-2, epochs=40, batch_size=10, patience=3)
    _, hist = train(model, x, y, x, y_val, cfg)
    assert len(hist) < 40
    best = min(r["val_loss"] for r in hist)
    assert evaluate(model, x, y_val).loss == pytest.approx(best, rel=1e-5)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_divergence_aborts():
    spec, x, y = toy_data(4)
    model = Model(spec)
    model.parameters()["fc.fc_3.b"][0] = np.inf
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        train(model, x, y, x, y, TrainConfig(epochs=1, batch_size=4))


@pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"epochs": 0}, {"batch_size": 0}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# ---- evaluation ----

def test_evaluate_single_correct_sample():
    spec, x, _ = toy_data(1)
    model = Model(spec, seed=3)
    pred = int(np.argmax(model.forward(x)))
    r = evaluate(model, x, np.array([pred]))
    assert r.accuracy == 1.0
    assert r.confusion.sum() == 1 and r.confusion[pred, pred] == 1


def test_uniform_model_is_chance():
    spec, x, _ = toy_data(500)
    model = Model(spec)
    model.parameters()["fc.fc_3.w"][...] = 0  # constant logits -> argmax picks class 0
    y = np.arange(500) % 5
    r = evaluate(model, x, y)
    assert r.accuracy == pytest.approx(0.2)
    np.testing.assert_array_equal(r.confusion.sum(axis=1), np.full(5, 100))


def test_evaluate_empty():
    spec, x, _ = toy_data(1)
    with pytest.raises(ValueError):
        evaluate(Model(spec), [a[:0] for a in x], np.zeros(0, int))


def test_latency():
    spec, x, _ = toy_data(3)
    model = Model(spec)
    assert inference_latency(model, x, 5) > 0
    with pytest.raises(ValueError):
        inference_latency(model, x, 0)
