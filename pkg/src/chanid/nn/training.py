"""Cross-entropy loss, Adam, the training loop, evaluation and latency timing."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .layers import softmax
from .models import N_CLASSES, Model

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    pass


def cross_entropy_loss(predicted, label) -> float:
    """``-sum_k y_k log p_k`` for one probability vector and its one-hot label."""
    p, y = np.asarray(predicted, float), np.asarray(label, float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    p = np.clip(p, PROB_FLOOR, 1.0)
    return float(-np.sum(y * np.log(p)))


def one_hot(labels, n_classes: int = N_CLASSES, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, int)
    out = np.zeros((labels.size, n_classes), dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def batch_loss_and_grad(model: Model, inputs, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over the batch, its gradient w.r.t. the logits, and the probabilities."""
    z = model.logits(inputs)
    p = softmax(z.astype(np.float64))
    y = one_hot(labels, p.shape[1], np.float64)
    n = len(labels)
    loss = float(-np.sum(y * np.log(np.clip(p, PROB_FLOOR, 1.0))) / n)
    return loss, ((p - y) / n).astype(model.dtype), p


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> AdamState:
    """In-place bias-corrected Adam update of ``params``; returns ``state`` with the step advanced."""
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for k, w in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype, copy=False)
    return state


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    patience: int = 3  # epochs without sufficient val-loss improvement before stopping
    min_delta: float = 1e-4
    restore_best: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows = true label, cols = predicted
    loss: float = float("nan")

    def per_class_accuracy(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.diag(self.confusion) / rows


def evaluate(model: Model, inputs, labels, batch_size: int = 256) -> EvalResult:
    labels = np.asarray(labels, int)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    p = model.predict_proba(inputs, batch_size)
    pred = np.argmax(p, axis=1)
    conf = np.zeros((N_CLASSES, N_CLASSES), int)
    np.add.at(conf, (labels, pred), 1)
    loss = float(-np.mean(np.log(np.clip(p[np.arange(labels.size), labels], PROB_FLOOR, 1.0))))
    return EvalResult(float(np.mean(pred == labels)), conf, loss)


def train(model: Model, train_inputs, train_labels, val_inputs, val_labels,
          cfg: TrainConfig, state: AdamState | None = None):
    """Mini-batch Adam on mean cross-entropy with validation-loss early stopping.

    Returns ``(state, history)``; history has one dict per epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    state = state if state is not None else AdamState(lr=cfg.learning_rate)
    train_labels = np.asarray(train_labels, int)
    n = train_labels.size
    history = []
    best_loss, best_params, stale = np.inf, None, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = [x[idx] for x in train_inputs]
            model.zero_grad()
            loss, dz, p = batch_loss_and_grad(model, xb, train_labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start}, adam step {state.step}")
            correct += int(np.sum(np.argmax(p, axis=1) == train_labels[idx]))
            model.backward(dz, through_softmax=False)
            adam_step(model.parameters(), model.gradients(), state)
            total += loss * idx.size
        val = evaluate(model, val_inputs, val_labels) if len(val_labels) else None
        row = {"epoch": epoch, "train_loss": total / n, "train_accuracy": correct / n,
               "val_loss": val.loss if val else float("nan"),
               "val_accuracy": val.accuracy if val else float("nan"),
               "seconds": time.perf_counter() - t0}
        history.append(row)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f (%.1fs)", epoch,
                 row["train_loss"], row["val_loss"], row["val_accuracy"], row["seconds"])
        if val is None:
            continue
        if val.loss < best_loss - cfg.min_delta:
            best_loss, stale = val.loss, 0
            if cfg.restore_best:
                best_params = {k: v.copy() for k, v in model.parameters().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("validation loss converged after epoch %d", epoch)
                break
    if cfg.restore_best and best_params is not None:
        for k, v in model.parameters().items():
            v[...] = best_params[k]
    return state, history


def inference_latency(model: Model, sample: list[np.ndarray], repetitions: int = 100) -> float:
    """Median wall-clock seconds of a single-sample forward pass."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    sample = [x[:1] for x in sample]
    model.forward(sample)  # warm-up
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        model.forward(sample)
        times.append(time.perf_counter() - t0)
    for layer in model.layers():
        layer._cache = None
    return float(np.median(times))
