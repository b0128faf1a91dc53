"""Model specs for EMEV-IdNet / CSI-IdNet, their parameter and FLOP counts, and the runnable model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Conv, Dense, Flatten, Layer, LeakyReLU, ReLU, Softmax, concat, split_grad

N_CLASSES = 5
ARCHS = ("emev_idnet", "csi_idnet")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv3d | conv2d | dense | leaky_relu | relu | softmax | flatten
    units: int = 0  # filters for conv, units for dense
    kernel: int = 3
    name: str = ""


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    branches: tuple[tuple[LayerSpec, ...], ...]
    head: tuple[LayerSpec, ...]
    input_shapes: tuple[tuple[int, ...], ...]  # per branch, channels-last, no batch axis
    n_rb: int = 13
    n_r: int = 4
    n_t: int = 64
    branch_names: tuple[str, ...] = field(default=("u", "s"))


def _conv_stack(kind: str, prefix: str) -> tuple[LayerSpec, ...]:
    out = []
    for i, f in enumerate((16, 32, 16), start=1):
        out += [LayerSpec(kind, f, 3, f"{prefix}.{kind}_{i}"), LayerSpec("leaky_relu")]
    return tuple(out) + (LayerSpec("flatten"),)


def _head() -> tuple[LayerSpec, ...]:
    return (
        LayerSpec("dense", 128, name="fc.fc_1"), LayerSpec("relu"),
        LayerSpec("dense", 32, name="fc.fc_2"), LayerSpec("relu"),
        LayerSpec("dense", N_CLASSES, name="fc.fc_3"), LayerSpec("softmax"),
    )


def emev_idnet_spec(n_rb: int = 13, n_r: int = 4, n_t: int = 64) -> ModelSpec:
    """Dual-branch net: Conv3D stack on U (real/imag channels), Conv2D stack on S."""
    return ModelSpec(
        arch="emev_idnet",
        branches=(_conv_stack("conv3d", "u"), _conv_stack("conv2d", "s")),
        head=_head(),
        input_shapes=((n_rb, n_r, n_r, 2), (n_rb, n_r, 1)),
        n_rb=n_rb, n_r=n_r, n_t=n_t, branch_names=("u", "s"),
    )


def csi_idnet_spec(n_rb: int = 13, n_r: int = 4, n_t: int = 64) -> ModelSpec:
    """Baseline: one Conv3D stack on the raw CSI tensor (real/imag channels)."""
    return ModelSpec(
        arch="csi_idnet",
        branches=(_conv_stack("conv3d", "h"),),
        head=_head(),
        input_shapes=((n_rb, n_r, n_t, 2),),
        n_rb=n_rb, n_r=n_r, n_t=n_t, branch_names=("h",),
    )


def build_spec(arch: str, n_rb: int = 13, n_r: int = 4, n_t: int = 64) -> ModelSpec:
    if arch in ("emev", "emev_idnet"):
        return emev_idnet_spec(n_rb, n_r, n_t)
    if arch in ("csi", "csi_idnet"):
        return csi_idnet_spec(n_rb, n_r, n_t)
    raise ValueError(f"unknown arch {arch!r}")


def _walk(spec: ModelSpec):
    """Yield ``(layer_spec, input_shape, output_shape)`` for every layer, branch by branch then head."""
    flat_widths = []
    for layers, shape in zip(spec.branches, spec.input_shapes):
        for ls in layers:
            if ls.kind in ("conv3d", "conv2d"):
                dims = 3 if ls.kind == "conv3d" else 2
                if len(shape) != dims + 1:
                    raise ValueError(f"{ls.name}: input shape {shape} has wrong rank")
                out = shape[:-1] + (ls.units,)
            elif ls.kind == "flatten":
                out = (int(np.prod(shape)),)
            else:
                out = shape
            yield ls, shape, out
            shape = out
        flat_widths.append(shape[0])
    shape = (sum(flat_widths),)
    yield LayerSpec("concat"), tuple(flat_widths), shape
    for ls in spec.head:
        out = (ls.units,) if ls.kind == "dense" else shape
        yield ls, shape, out
        shape = out


def concat_width(spec: ModelSpec) -> int:
    for ls, _, out in _walk(spec):
        if ls.kind == "concat":
            return out[0]
    raise AssertionError("spec without concat")


def layer_table(spec: ModelSpec) -> list[dict]:
    """Per-layer rows: name, kind, output shape, parameter count, FLOPs."""
    rows = []
    for ls, inp, out in _walk(spec):
        params = flops = 0
        if ls.kind in ("conv3d", "conv2d"):
            dims = 3 if ls.kind == "conv3d" else 2
            kvol = ls.kernel**dims
            cin = inp[-1]
            params = ls.units * cin * kvol + ls.units
            flops = int(np.prod(out[:-1])) * ls.units * 2 * kvol * cin
        elif ls.kind == "dense":
            params = inp[0] * ls.units + ls.units
            flops = 2 * inp[0] * ls.units
        rows.append({"name": ls.name or ls.kind, "kind": ls.kind, "output_shape": out,
                     "params": params, "flops": flops})
    return rows


def count_params(spec: ModelSpec) -> int:
    return sum(r["params"] for r in layer_table(spec))


def count_flops(spec: ModelSpec) -> int:
    """Forward FLOPs, one multiply-accumulate = 2; bias and activations not counted."""
    return sum(r["flops"] for r in layer_table(spec))


def _make_layer(ls: LayerSpec, in_shape, rng, dtype) -> Layer:
    if ls.kind == "conv3d":
        return Conv(3, in_shape[-1], ls.units, ls.kernel, rng=rng, dtype=dtype)
    if ls.kind == "conv2d":
        return Conv(2, in_shape[-1], ls.units, ls.kernel, rng=rng, dtype=dtype)
    if ls.kind == "dense":
        return Dense(in_shape[0], ls.units, rng=rng, dtype=dtype)
    return {"leaky_relu": LeakyReLU, "relu": ReLU, "softmax": Softmax, "flatten": Flatten}[ls.kind]()


class Model:
    """Branches feeding a concatenation, then a dense head ending in softmax."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec, self.dtype = spec, np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.branches: list[list[Layer]] = []
        self.head: list[Layer] = []
        self.names: dict[int, str] = {}
        walk = list(_walk(spec))
        pos = 0
        for layers in spec.branches:
            built = []
            for _ in layers:
                ls, inp, _ = walk[pos]
                layer = _make_layer(ls, inp, rng, self.dtype)
                self.names[id(layer)] = ls.name
                built.append(layer)
                pos += 1
            if isinstance(built[0], Conv):
                built[0].input_grad = False  # network inputs need no gradient
            self.branches.append(built)
        self._widths = list(walk[pos][1])
        pos += 1
        for ls, inp, _ in walk[pos:]:
            layer = _make_layer(ls, inp, rng, self.dtype)
            self.names[id(layer)] = ls.name
            self.head.append(layer)

    def layers(self):
        for b in self.branches:
            yield from b
        yield from self.head

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed ``<layer name>.<w|b>`` in declaration order."""
        out = {}
        for layer in self.layers():
            for k, v in layer.params.items():
                out[f"{self.names[id(layer)]}.{k}"] = v
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers():
            for k, v in layer.grads.items():
                out[f"{self.names[id(layer)]}.{k}"] = v
        return out

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()

    def logits(self, inputs: list[np.ndarray]) -> np.ndarray:
        """Forward pass up to (not including) the final softmax."""
        if len(inputs) != len(self.branches):
            raise ValueError(f"expected {len(self.branches)} inputs, got {len(inputs)}")
        feats = []
        for x, branch, shape in zip(inputs, self.branches, self.spec.input_shapes):
            if tuple(x.shape[1:]) != tuple(shape):
                raise ValueError(f"input shape {x.shape[1:]} does not match {shape}")
            x = x.astype(self.dtype, copy=False)
            for layer in branch:
                x = layer.forward(x)
            feats.append(x)
        z = concat(feats)
        for layer in self.head[:-1]:
            z = layer.forward(z)
        return z

    def forward(self, inputs: list[np.ndarray]) -> np.ndarray:
        return self.head[-1].forward(self.logits(inputs))

    def predict_proba(self, inputs: list[np.ndarray], batch_size: int = 256) -> np.ndarray:
        n = inputs[0].shape[0]
        out = [self.forward([x[i:i + batch_size] for x in inputs]) for i in range(0, n, batch_size)]
        for layer in self.layers():
            layer._cache = None
        return np.concatenate(out) if out else np.zeros((0, N_CLASSES), self.dtype)

    def backward(self, grad: np.ndarray, through_softmax: bool = True) -> None:
        """Backpropagate ``grad`` into every layer's ``grads``.

        ``grad`` is w.r.t. the softmax output, or w.r.t. the logits when
        ``through_softmax`` is false (fused softmax/cross-entropy).
        """
        head = self.head if through_softmax else self.head[:-1]
        if not through_softmax:
            self.head[-1]._cache = None
        for layer in reversed(head):
            grad = layer.backward(grad)
        for g, branch in zip(split_grad(grad, self._widths), self.branches):
            for layer in reversed(branch):
                g = layer.backward(g)
