"""Shared test oracles."""

import numpy as np

from chanid.nn.layers import LeakyReLU, ReLU
from chanid.nn.models import Model, build_spec
from chanid.nn.training import batch_loss_and_grad


def _masks(model):
    return [l._cache.copy() for l in model.layers() if isinstance(l, (ReLU, LeakyReLU))]


def model_gradient_check(arch: str, n_coords: int = 100, seed: int = 0, h: float = 1e-4,
                         dims=(2, 2, 3), batch: int = 3) -> np.ndarray:
    """Relative errors of backprop vs central differences on random parameter coordinates.

    float64 throughout; error is ``|a - n| / max(|a|, |n|, 1e-8)``.  A
    coordinate whose +-h probe flips any (leaky) ReLU mask straddles a kink,
    where the loss is not differentiable; it is replaced by a fresh draw.
    """
    rng = np.random.default_rng(seed)
    model = Model(build_spec(arch, *dims), seed=seed, dtype=np.float64)
    for k, v in model.parameters().items():
        if k.endswith(".b"):
            v[...] = 0.1 * rng.standard_normal(v.shape)
    inputs = [rng.standard_normal((batch,) + s) for s in model.spec.input_shapes]
    labels = rng.integers(0, 5, batch)

    model.zero_grad()
    _, dz, _ = batch_loss_and_grad(model, inputs, labels)
    base = _masks(model)
    model.backward(dz, through_softmax=False)
    params, grads = model.parameters(), model.gradients()

    names = list(params)
    sizes = np.array([params[k].size for k in names])
    offsets = np.cumsum(sizes) - sizes
    order = rng.permutation(sizes.sum())
    errs = []
    for flat in order:
        if len(errs) == n_coords:
            break
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        arr, g = params[names[i]].reshape(-1), grads[names[i]].reshape(-1)
        j = int(flat - offsets[i])
        old = arr[j]
        arr[j] = old + h
        fp = batch_loss_and_grad(model, inputs, labels)[0]
        kink = any(np.any(a != b) for a, b in zip(_masks(model), base))
        arr[j] = old - h
        fm = batch_loss_and_grad(model, inputs, labels)[0]
        kink |= any(np.any(a != b) for a, b in zip(_masks(model), base))
        arr[j] = old
        if kink:
            continue
        num = (fp - fm) / (2 * h)
        errs.append(abs(g[j] - num) / max(abs(g[j]), abs(num), 1e-8))
    for layer in model.layers():
        layer._cache = None
    return np.array(errs)
