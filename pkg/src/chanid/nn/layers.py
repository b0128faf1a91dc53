"""Layers with hand-written forward/backward passes.

Tensors are plain numpy arrays in channels-last layout: ``(N, *spatial, C)``.
Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MissingCacheError(RuntimeError):
    pass


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params, self.grads = {}, {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise MissingCacheError(f"{type(self).__name__}.backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv(Layer):
    """Same-padded, stride-1 convolution over ``dims`` spatial axes (im2col + GEMM).

    Weights are stored as ``(k,)*dims + (in_channels, filters)``.  Set
    ``input_grad = False`` on a first layer to skip its input gradient.
    """

    COLS_CACHE_BYTES = 64 * 2**20

    def __init__(self, dims: int, in_channels: int, filters: int, kernel: int = 3,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("same padding needs an odd kernel")
        self.dims, self.kernel = dims, kernel
        self.in_channels, self.filters = in_channels, filters
        shape = (kernel,) * dims + (in_channels, filters)
        fan_in = in_channels * kernel**dims
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(6.0 / fan_in)
        self.params["w"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        self.params["b"] = np.zeros(filters, dtype=dtype)
        self.input_grad = True
        self.zero_grad()

    def _pad(self, x):
        p = self.kernel // 2
        return np.pad(x, [(0, 0)] + [(p, p)] * self.dims + [(0, 0)])

    def _cols(self, xp, spatial):
        # windows: (N, *spatial, C, *kernel) -> (N, *spatial, *kernel, C)
        win = sliding_window_view(xp, (self.kernel,) * self.dims, axis=tuple(range(1, self.dims + 1)))
        d = self.dims
        order = (0,) + tuple(range(1, d + 1)) + tuple(range(d + 2, 2 * d + 2)) + (d + 1,)
        win = win.transpose(order)
        n = xp.shape[0]
        return win.reshape(n * int(np.prod(spatial)), -1)

    def forward(self, x):
        if x.ndim != self.dims + 2 or x.shape[-1] != self.in_channels:
            raise ValueError(f"conv{self.dims}d expects (N, {self.dims} spatial, {self.in_channels}), got {x.shape}")
        spatial = x.shape[1:-1]
        xp = self._pad(x)
        cols = self._cols(xp, spatial)
        w = self.params["w"].reshape(-1, self.filters)
        out = cols @ w + self.params["b"]
        # large column buffers are rebuilt in backward instead of held
        keep = cols if cols.nbytes <= self.COLS_CACHE_BYTES else None
        self._cache = (xp, spatial, keep)
        return out.reshape(x.shape[:-1] + (self.filters,))

    def backward(self, grad):
        xp, spatial, cols = self._take_cache()
        g = grad.reshape(-1, self.filters)
        if cols is None:
            cols = self._cols(xp, spatial)
        w = self.params["w"]
        self.grads["w"] += (cols.T @ g).reshape(w.shape)
        self.grads["b"] += g.sum(axis=0)
        del cols
        if not self.input_grad:
            return None
        # input gradient = same-padded correlation of grad with the flipped,
        # channel-swapped kernel
        w_t = np.flip(w, axis=tuple(range(self.dims))).swapaxes(-1, -2)
        gcols = self._cols(self._pad(grad), spatial)
        dx = gcols @ np.ascontiguousarray(w_t).reshape(-1, self.in_channels)
        return dx.reshape(grad.shape[:-1] + (self.in_channels,))


class Dense(Layer):
    def __init__(self, in_features: int, units: int, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(6.0 / in_features)
        self.params["w"] = rng.uniform(-bound, bound, size=(in_features, units)).astype(dtype)
        self.params["b"] = np.zeros(units, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.params["w"].shape[0]:
            raise ValueError(f"dense expects (N, {self.params['w'].shape[0]}), got {x.shape}")
        self._cache = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, grad):
        x = self._take_cache()
        self.grads["w"] += x.T @ grad
        self.grads["b"] += grad.sum(axis=0)
        return grad @ self.params["w"].T


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, x * x.dtype.type(self.slope))

    def backward(self, grad):
        mask = self._take_cache()
        return np.where(mask, grad, grad * grad.dtype.type(self.slope))


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._take_cache(), grad, 0).astype(grad.dtype, copy=False)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Layer):
    def forward(self, x):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, grad):
        p = self._take_cache()
        return p * (grad - np.sum(grad * p, axis=-1, keepdims=True))


class Flatten(Layer):
    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


def concat(parts: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts, axis=1)


def split_grad(grad: np.ndarray, widths: list[int]) -> list[np.ndarray]:
    return np.split(grad, np.cumsum(widths)[:-1], axis=1)
