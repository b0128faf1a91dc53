"""Dataset pipeline: channel draws -> optional AWGN -> EMEV features, splitting, and binary I/O.

Binary sample file layout (all little-endian)::

    magic    8 bytes   b"CHIDDSET"
    version  uint16    FORMAT_VERSION
    mode     uint8     0 = csi (raw H), 1 = emev (U, S)
    reserved uint8     0
    n_rb     uint16
    n_r      uint16
    n_t      uint16
    count    uint32
    count records, each:
        data    float32[k]  csi:  H as (re, im) pairs, C order over (n_rb, n_r, n_t)
                            emev: U as (re, im) pairs over (n_rb, n_r, n_r), then S over (n_rb, n_r)
        label   uint8
        seed    uint64
        snr_db  float32     NaN for a clean sample

The manifest sits next to the sample files as ``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .channel import (
    BS_ARRAY, LABELS, PROFILE_IDS, UE_ARRAY, LinkConfig, generate_channel, load_profile, with_motion,
)
from .eigen import extract_emev_batch

MAGIC = b"CHIDDSET"
FORMAT_VERSION = 1
MODES = {"csi": 0, "emev": 1}
SPEEDS_KMH = (4.8, 24.0, 40.0, 60.0)
MAX_SNAPSHOT_S = 1e-3
DEFAULT_RATIOS = (65, 15, 20)
SNR_GRID_DB = (10, 12, 14, 16, 18, 20)

_HEADER = struct.Struct("<8sHBBHHHI")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Samples:
    """A block of samples in one mode; arrays share the leading sample axis."""

    mode: str
    labels: np.ndarray  # uint8
    seeds: np.ndarray  # uint64
    snr_db: np.ndarray  # float32, NaN = clean
    h: np.ndarray | None = None  # complex64 (N, n_rb, n_r, n_t)
    u: np.ndarray | None = None  # complex64 (N, n_rb, n_r, n_r)
    s: np.ndarray | None = None  # float32 (N, n_rb, n_r)
    dims: tuple[int, int, int] = (13, 4, 64)

    def __len__(self):
        return int(self.labels.size)

    def subset(self, idx) -> "Samples":
        pick = lambda a: None if a is None else a[idx]
        return Samples(self.mode, self.labels[idx], self.seeds[idx], self.snr_db[idx],
                       pick(self.h), pick(self.u), pick(self.s), self.dims)


@dataclass
class DatasetManifest:
    master_seed: int
    per_class: dict[str, int]
    link: dict
    speeds_kmh: list[float]
    splits: dict[str, list[int]] = field(default_factory=dict)
    split_seed: int | None = None
    ratios: list[int] = field(default_factory=lambda: list(DEFAULT_RATIOS))
    files: dict[str, str] = field(default_factory=dict)  # file name -> sha256
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    def link_config(self) -> LinkConfig:
        return link_from_summary(self.link)


def link_summary(link: LinkConfig) -> dict:
    return {"carrier_hz": link.carrier_hz, "scs_hz": link.scs_hz, "n_rb": link.n_rb,
            "travel_azimuth_deg": link.travel_azimuth_deg, "delay_spread_s": link.delay_spread_s,
            "bs_array": [link.bs_array.rows, link.bs_array.cols],
            "ue_array": [link.ue_array.rows, link.ue_array.cols]}


def link_from_summary(d: dict) -> LinkConfig:
    bs = replace(BS_ARRAY, rows=d["bs_array"][0], cols=d["bs_array"][1])
    ue = replace(UE_ARRAY, rows=d["ue_array"][0], cols=d["ue_array"][1])
    return LinkConfig(carrier_hz=d["carrier_hz"], scs_hz=d["scs_hz"], n_rb=d["n_rb"],
                      travel_azimuth_deg=d["travel_azimuth_deg"], delay_spread_s=d["delay_spread_s"],
                      bs_array=bs, ue_array=ue)


def sample_seed(master_seed: int, label: int, index: int) -> int:
    """Counter-style 64-bit seed of sample ``index`` of class ``label``."""
    ss = np.random.SeedSequence([int(master_seed), int(label), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _motion(seed: int) -> tuple[float, float]:
    rng = np.random.default_rng([seed, 1])
    speed_kmh = SPEEDS_KMH[int(rng.integers(len(SPEEDS_KMH)))]
    return speed_kmh / 3.6, float(rng.uniform(0.0, MAX_SNAPSHOT_S))


def measure_power(h) -> float:
    h = np.asarray(h)
    if h.size == 0:
        raise ValueError("empty tensor")
    return float(np.mean(h.real.astype(np.float64) ** 2 + h.imag.astype(np.float64) ** 2))


def normalize_power(h: np.ndarray) -> np.ndarray:
    """Scale a single CSI tensor so its mean ``|h|^2`` is 1."""
    p = measure_power(h)
    if p <= 0:
        raise ValueError("zero-power channel cannot be normalized")
    return h / math.sqrt(p)


def add_awgn(h, snr_db, seed) -> np.ndarray:
    """Add circularly-symmetric complex Gaussian noise at ``snr_db`` relative to ``measure_power(h)``.

    ``snr_db`` of ``None`` or ``inf`` returns an unchanged copy.
    """
    h = np.asarray(h)
    if snr_db is None or math.isinf(snr_db) and snr_db > 0:
        return h.copy()
    p_h = measure_power(h)
    if p_h <= 0:
        raise ValueError("cannot calibrate noise against a zero-power tensor")
    p_n = p_h * 10.0 ** (-snr_db / 10.0)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(h.shape + (2,)) @ np.array([1.0, 1j])
    return h.astype(np.complex128) + math.sqrt(p_n / 2) * noise


def noise_seed(sample_seed_: int, snr_db: float) -> list[int]:
    return [int(sample_seed_), 2, int(round(snr_db * 1000)) & 0xFFFFFFFF]


def generate_h(per_class: int, link: LinkConfig, master_seed: int):
    """Raw normalized channels for ``per_class`` samples of each profile, grouped by label."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    n_r, n_t = link.ue_array.n_elements, link.bs_array.n_elements
    n = per_class * len(PROFILE_IDS)
    h = np.empty((n, link.n_rb, n_r, n_t), np.complex64)
    labels = np.empty(n, np.uint8)
    seeds = np.empty(n, np.uint64)
    i = 0
    for pid in PROFILE_IDS:
        profile = load_profile(pid)
        for k in range(per_class):
            sd = sample_seed(master_seed, LABELS[pid], k)
            speed, t = _motion(sd)
            real = generate_channel(profile, with_motion(link, speed, t), sd)
            h[i] = normalize_power(real.h)
            labels[i], seeds[i] = LABELS[pid], sd
            i += 1
    return h, labels, seeds


def emev_from_h(h: np.ndarray, snr_db: float | None = None, seeds=None) -> tuple[np.ndarray, np.ndarray]:
    """EMEV features of a stack of CSI tensors, optionally after AWGN at ``snr_db``."""
    h = prepare_h(h, snr_db, seeds)
    u, s = extract_emev_batch(h)
    return u.astype(np.complex64), s.astype(np.float32)


def prepare_h(h: np.ndarray, snr_db: float | None = None, seeds=None) -> np.ndarray:
    """Noise (if requested) then per-sample power normalization, in complex128."""
    out = np.empty(h.shape, np.complex128)
    for i in range(h.shape[0]):
        x = h[i].astype(np.complex128)
        if snr_db is not None:
            x = add_awgn(x, snr_db, noise_seed(int(seeds[i]), snr_db))
        out[i] = normalize_power(x)
    return out


def to_mode(h, labels, seeds, mode: str, snr_db: float | None = None) -> Samples:
    n_rb, n_r, n_t = h.shape[1:]
    snr = np.full(len(labels), np.nan if snr_db is None else snr_db, np.float32)
    if mode == "csi":
        hh = h if snr_db is None else prepare_h(h, snr_db, seeds).astype(np.complex64)
        return Samples("csi", labels, seeds, snr, h=hh, dims=(n_rb, n_r, n_t))
    if mode == "emev":
        u, s = emev_from_h(h, snr_db, seeds)
        return Samples("emev", labels, seeds, snr, u=u, s=s, dims=(n_rb, n_r, n_t))
    raise ValueError(f"unknown mode {mode!r}")


def stratified_split(labels, ratios=DEFAULT_RATIOS, seed: int = 0) -> dict[str, np.ndarray]:
    """Per-class split into train/val/test with largest-remainder rounding.

    Leftover samples go to the splits with the largest fractional share,
    ties to the earlier split.
    """
    ratios = tuple(int(r) for r in ratios)
    if sum(ratios) != 100 or len(ratios) != 3:
        raise ValueError(f"ratios must be three integers summing to 100, got {ratios}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = {"train": [], "val": [], "test": []}
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        counts = split_counts(idx.size, ratios)
        if min(counts) == 0:
            raise ValueError(f"class {lab} has {idx.size} samples, too few for a {ratios} split")
        perm = rng.permutation(idx)
        a, b = counts[0], counts[0] + counts[1]
        out["train"].append(perm[:a])
        out["val"].append(perm[a:b])
        out["test"].append(perm[b:])
    return {k: np.sort(np.concatenate(v)) if v else np.zeros(0, int) for k, v in out.items()}


def split_counts(n: int, ratios=DEFAULT_RATIOS) -> list[int]:
    exact = [n * r / 100 for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    rest = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def _record_dtype(mode: str, dims) -> np.dtype:
    n_rb, n_r, n_t = dims
    k = n_rb * n_r * n_t * 2 if mode == "csi" else n_rb * n_r * n_r * 2 + n_rb * n_r
    return np.dtype([("data", "<f4", (k,)), ("label", "u1"), ("seed", "<u8"), ("snr_db", "<f4")])


def _pack(samples: Samples) -> np.ndarray:
    dt = _record_dtype(samples.mode, samples.dims)
    rec = np.zeros(len(samples), dt)
    n, k = len(samples), dt["data"].shape[0]
    if samples.mode == "csi":
        data = samples.h.astype(np.complex64).view(np.float32).reshape(n, k)
    else:
        n_rb, n_r, _ = samples.dims
        u = samples.u.astype(np.complex64).view(np.float32).reshape(n, n_rb * n_r * n_r * 2)
        data = np.concatenate([u, samples.s.astype(np.float32).reshape(n, n_rb * n_r)], axis=1)
    rec["data"] = data
    rec["label"] = samples.labels
    rec["seed"] = samples.seeds
    rec["snr_db"] = samples.snr_db
    return rec


def serialize(samples: Samples, path) -> str:
    """Write ``samples`` atomically; returns the file's sha256."""
    path = Path(path)
    n_rb, n_r, n_t = samples.dims
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, MODES[samples.mode], 0, n_rb, n_r, n_t, len(samples))
    payload = header + _pack(samples).tobytes()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return hashlib.sha256(payload).hexdigest()


def deserialize(path) -> Samples:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, mode_code, _, n_rb, n_r, n_t, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    modes = {v: k for k, v in MODES.items()}
    if mode_code not in modes:
        raise DatasetFormatError(f"{path}: unknown mode {mode_code}")
    mode, dims = modes[mode_code], (n_rb, n_r, n_t)
    dt = _record_dtype(mode, dims)
    body = raw[_HEADER.size:]
    if len(body) != count * dt.itemsize:
        raise DatasetFormatError(f"{path}: expected {count} records, payload is {len(body)} bytes")
    rec = np.frombuffer(body, dt)
    data = rec["data"]
    out = Samples(mode, rec["label"].copy(), rec["seed"].copy(), rec["snr_db"].copy(), dims=dims)
    if mode == "csi":
        out.h = data.copy().view(np.complex64).reshape(count, n_rb, n_r, n_t)
    else:
        ku = n_rb * n_r * n_r * 2
        out.u = np.ascontiguousarray(data[:, :ku]).view(np.complex64).reshape(count, n_rb, n_r, n_r)
        out.s = data[:, ku:].reshape(count, n_rb, n_r).copy()
    return out


def file_name(mode: str) -> str:
    return f"samples_{mode}.bin"


def generate_dataset(per_class: int, link: LinkConfig, master_seed: int, out_dir=None,
                     modes=("csi", "emev"), split_seed: int | None = None,
                     ratios=DEFAULT_RATIOS, split: bool = True) -> tuple[dict[str, Samples], DatasetManifest]:
    """Generate a balanced dataset (``per_class`` per profile) and, unless
    ``split`` is false, its stratified split.

    When ``out_dir`` is given, one sample file per mode plus ``manifest.json``
    are written there.
    """
    h, labels, seeds = generate_h(per_class, link, master_seed)
    split_seed = master_seed if split_seed is None else split_seed
    parts = stratified_split(labels, ratios, split_seed) if split else {}
    manifest = DatasetManifest(
        master_seed=int(master_seed),
        per_class={p: per_class for p in PROFILE_IDS},
        link=link_summary(link),
        speeds_kmh=list(SPEEDS_KMH),
        splits={k: v.tolist() for k, v in parts.items()},
        split_seed=int(split_seed) if split else None,
        ratios=list(ratios),
    )
    out = {m: to_mode(h, labels, seeds, m) for m in modes}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for m, samples in out.items():
            manifest.files[file_name(m)] = serialize(samples, out_dir / file_name(m))
        write_manifest(manifest, out_dir)
    return out, manifest


def write_manifest(manifest: DatasetManifest, out_dir) -> Path:
    path = Path(out_dir) / "manifest.json"
    tmp = path.with_name("manifest.json.tmp")
    tmp.write_text(manifest.to_json())
    os.replace(tmp, path)
    return path


def read_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    return DatasetManifest.from_json(path.read_text())


def regenerate(manifest: DatasetManifest, mode: str) -> Samples:
    """Rebuild one mode's samples from the manifest alone."""
    counts = set(manifest.per_class.values())
    if len(counts) != 1:
        raise ValueError("regeneration expects equal per-class counts")
    h, labels, seeds = generate_h(counts.pop(), manifest.link_config(), manifest.master_seed)
    return to_mode(h, labels, seeds, mode)


def model_inputs(samples: Samples) -> list[np.ndarray]:
    """Real-valued, channels-last network inputs for a block of samples."""
    if samples.mode == "emev":
        u = np.stack([samples.u.real, samples.u.imag], axis=-1).astype(np.float32)
        return [u, samples.s[..., None].astype(np.float32)]
    h = np.stack([samples.h.real, samples.h.imag], axis=-1).astype(np.float32)
    return [h]
