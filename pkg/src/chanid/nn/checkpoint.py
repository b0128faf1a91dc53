"""Portable model checkpoints.

Layout (little-endian)::

    magic      8 bytes  b"CHIDCKPT"
    version    uint16   CHECKPOINT_VERSION
    arch       uint8    0 = emev_idnet, 1 = csi_idnet
    reserved   uint8    0
    n_rb, n_r, n_t      uint16 x 3
    n_tensors  uint16
    layer table, n_tensors entries:
        name_len uint16, name (utf-8), ndim uint8, dims uint32 x ndim
    payload: every tensor as float32, C order, in layer-table order

Tensor order is the model's declaration order: branch layers first (U then
S for EMEV-IdNet), then the dense head; weight before bias.  Conv weights
are ``(k, k[, k], in_channels, filters)``, dense weights ``(in, out)``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .models import Model, build_spec

MAGIC = b"CHIDCKPT"
CHECKPOINT_VERSION = 1
ARCH_CODES = {"emev_idnet": 0, "csi_idnet": 1}

_HEAD = struct.Struct("<8sHBBHHHH")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> int:
    """Write ``model`` to ``path``; returns the byte size."""
    spec = model.spec
    params = model.parameters()
    out = bytearray(_HEAD.pack(MAGIC, CHECKPOINT_VERSION, ARCH_CODES[spec.arch], 0,
                               spec.n_rb, spec.n_r, spec.n_t, len(params)))
    for name, arr in params.items():
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    for arr in params.values():
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(out))
    os.replace(tmp, path)
    return len(out)


def load_checkpoint(path, dtype=np.float32) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, arch_code, _, n_rb, n_r, n_t, n_tensors = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    archs = {v: k for k, v in ARCH_CODES.items()}
    if arch_code not in archs:
        raise CheckpointError(f"{path}: unknown arch code {arch_code}")
    model = Model(build_spec(archs[arch_code], n_rb, n_r, n_t), dtype=dtype)
    params = model.parameters()
    if n_tensors != len(params):
        raise CheckpointError(f"{path}: {n_tensors} tensors, model expects {len(params)}")

    pos = _HEAD.size
    table = []
    try:
        for _ in range(n_tensors):
            (nlen,) = struct.unpack_from("<H", raw, pos); pos += 2
            name = raw[pos:pos + nlen].decode(); pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos); pos += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, pos); pos += 4 * ndim
            table.append((name, tuple(dims)))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated layer table") from exc

    for (name, dims), (pname, arr) in zip(table, params.items()):
        if name != pname or dims != arr.shape:
            raise CheckpointError(f"{path}: tensor {name}{dims} does not match model's {pname}{arr.shape}")
        count = int(np.prod(dims))
        end = pos + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arr[...] = np.frombuffer(raw, "<f4", count, pos).reshape(dims)
        pos = end
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return model
