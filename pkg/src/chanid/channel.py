"""CDL (clustered delay line) MIMO channel synthesis for a UPA-to-UPA link.

Each realization is the frequency response sampled once per resource block,
shaped ``(n_rb, n_rx, n_tx)``.  Cluster tables are loaded from the text files
shipped in ``chanid/profiles`` (override the directory with ``CHANID_PROFILE_DIR``).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
PROFILE_IDS = ("A", "B", "C", "D", "E")
LABELS = {p: i for i, p in enumerate(PROFILE_IDS)}

# Default delay spreads (seconds) of the data generator, one per profile.
DEFAULT_DELAY_SPREAD = {"A": 129e-9, "B": 634e-9, "C": 634e-9, "D": 65e-9, "E": 65e-9}

# Ray offset angles for unit rms angle spread (20 rays, symmetric about 0).
RAY_OFFSETS = np.array([
    0.0447, -0.0447, 0.1413, -0.1413, 0.2492, -0.2492, 0.3715, -0.3715,
    0.5129, -0.5129, 0.6797, -0.6797, 0.8844, -0.8844, 1.1481, -1.1481,
    1.5195, -1.5195, 2.1551, -2.1551,
])

PROFILE_DIR_ENV = "CHANID_PROFILE_DIR"


class ProfileLoadError(Exception):
    """Raised when a profile table is missing or malformed."""


@dataclass(frozen=True)
class ArrayConfig:
    rows: int
    cols: int
    element_spacing: float = 0.5
    boresight_azimuth: float = 0.0
    boresight_zenith: float = math.pi / 2

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"array needs at least one row and column, got {self.rows}x{self.cols}")
        if self.element_spacing <= 0:
            raise ValueError("element spacing must be positive")

    @property
    def n_elements(self) -> int:
        return self.rows * self.cols

    def element_positions(self) -> np.ndarray:
        """Element positions in wavelengths, shape ``(rows*cols, 3)``.

        The panel spans the plane orthogonal to the boresight; columns run
        along the horizontal axis, rows along the vertical one.
        """
        az, zen = self.boresight_azimuth, self.boresight_zenith
        bore = unit_direction(az, zen)
        horiz = np.array([-math.sin(az), math.cos(az), 0.0])
        vert = np.cross(bore, horiz)
        vert /= np.linalg.norm(vert)
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        pos = c.reshape(-1, 1) * horiz + r.reshape(-1, 1) * vert
        return pos * self.element_spacing


BS_ARRAY = ArrayConfig(8, 8)
UE_ARRAY = ArrayConfig(2, 2, boresight_azimuth=math.pi)


@dataclass(frozen=True)
class ClusterParam:
    delay_normalized: float
    power_db: float
    aod_deg: float
    aoa_deg: float
    zod_deg: float
    zoa_deg: float
    is_los_ray: bool = False


@dataclass(frozen=True)
class CdlProfileSpec:
    profile_id: str
    is_los: bool
    clusters: tuple[ClusterParam, ...]
    k_factor_db: float | None = None
    rays_per_cluster: int = 20
    # per-cluster rms spreads in degrees: (ASD, ASA, ZSD, ZSA)
    angle_spread: tuple[float, float, float, float] = (5.0, 11.0, 3.0, 3.0)
    source: str = ""

    @property
    def label(self) -> int:
        return LABELS[self.profile_id]

    def linear_powers(self) -> np.ndarray:
        """Normalized linear cluster powers (sum 1).

        For LOS profiles the specular ray power is set from the K-factor
        relative to the first diffuse cluster.
        """
        p_db = np.array([c.power_db for c in self.clusters])
        if self.is_los and self.k_factor_db is not None:
            los = np.array([c.is_los_ray for c in self.clusters])
            first_diffuse = p_db[~los][0]
            p_db = np.where(los, first_diffuse + self.k_factor_db, p_db)
        p = 10.0 ** (p_db / 10.0)
        return p / p.sum()

    def normalized_delays(self) -> np.ndarray:
        return np.array([c.delay_normalized for c in self.clusters])


@dataclass(frozen=True)
class LinkConfig:
    carrier_hz: float = 28e9
    scs_hz: float = 60e3
    n_rb: int = 13
    ue_speed_mps: float = 0.0
    travel_azimuth_deg: float = 0.0
    delay_spread_s: float | None = None  # None: the profile default
    snapshot_time_s: float = 0.0
    bs_array: ArrayConfig = BS_ARRAY
    ue_array: ArrayConfig = UE_ARRAY

    def __post_init__(self):
        if self.carrier_hz <= 0:
            raise ValueError("carrier frequency must be positive")
        if self.n_rb < 1:
            raise ValueError("n_rb must be >= 1")
        if self.delay_spread_s is not None and self.delay_spread_s <= 0:
            raise ValueError("delay spread must be positive")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    def rb_frequencies(self) -> np.ndarray:
        """Center-subcarrier offset of each RB relative to the carrier (Hz)."""
        idx = np.arange(self.n_rb) - (self.n_rb - 1) / 2
        return idx * 12 * self.scs_hz

    def resolved_delay_spread(self, profile_id: str) -> float:
        if self.delay_spread_s is not None:
            return self.delay_spread_s
        return DEFAULT_DELAY_SPREAD[profile_id]


@dataclass
class ChannelRealization:
    h: np.ndarray
    label: int
    seed: int
    link: LinkConfig
    # realized power-delay profile: absolute cluster delays and the
    # array-averaged power each cluster delivered in this draw
    cluster_delays_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cluster_powers: np.ndarray = field(default_factory=lambda: np.zeros(0))


def los_probability(d_2d: float, h_ut: float) -> float:
    """UMa LOS probability for 2-D distance ``d_2d`` and UE height ``h_ut`` (meters)."""
    if d_2d < 0 or not math.isfinite(d_2d):
        raise ValueError(f"d_2d must be a finite non-negative distance, got {d_2d}")
    if h_ut < 0 or h_ut > 28 or not math.isfinite(h_ut):
        raise ValueError(f"h_ut must lie in [0, 28] m, got {h_ut}")
    if d_2d <= 18.0:
        return 1.0
    c = 0.0 if h_ut <= 13.0 else ((h_ut - 13.0) / 10.0) ** 1.5
    first = 18.0 / d_2d + math.exp(-d_2d / 63.0) * (1.0 - 18.0 / d_2d)
    second = 1.0 + 0.8 * c * (d_2d / 100.0) ** 3 * math.exp(-d_2d / 150.0)
    return min(1.0, max(0.0, first * second))


def profile_dir() -> Path:
    env = os.environ.get(PROFILE_DIR_ENV)
    return Path(env) if env else Path(__file__).parent / "profiles"


def _parse_profile(path: Path) -> CdlProfileSpec:
    header: dict[str, str] = {}
    comments: list[str] = []
    with open(path, newline="") as fh:
        for line in fh:
            line = line.strip()
            if line == "---":
                break
            if not line:
                continue
            if line.startswith("#"):
                comments.append(line.lstrip("# "))
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ProfileLoadError(f"{path}: malformed header line {line!r}")
            header[key.strip()] = value.strip()
        else:
            raise ProfileLoadError(f"{path}: missing '---' separator before cluster rows")
        rows = list(csv.DictReader(fh))

    try:
        pid = header["profile"]
        is_los = header["is_los"].lower() == "true"
        kf = header.get("k_factor_db", "none")
        clusters = [
            ClusterParam(
                float(r["delay_normalized"]), float(r["power_db"]),
                float(r["aod"]), float(r["aoa"]), float(r["zod"]), float(r["zoa"]),
                r["is_los_ray"].strip() == "1",
            )
            for r in rows
        ]
        spec = CdlProfileSpec(
            profile_id=pid,
            is_los=is_los,
            clusters=tuple(sorted(clusters, key=lambda c: c.delay_normalized)),
            k_factor_db=None if kf == "none" else float(kf),
            rays_per_cluster=int(header.get("rays_per_cluster", 20)),
            angle_spread=tuple(float(header[k]) for k in ("c_asd", "c_asa", "c_zsd", "c_zsa")),
            source=comments[0] if comments else "",
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ProfileLoadError(f"{path}: {exc!r}") from exc
    _validate(spec, path)
    return spec


def _validate(spec: CdlProfileSpec, path: Path) -> None:
    if spec.profile_id not in PROFILE_IDS:
        raise ProfileLoadError(f"{path}: unknown profile id {spec.profile_id!r}")
    if not spec.clusters:
        raise ProfileLoadError(f"{path}: no cluster rows")
    if spec.rays_per_cluster < 1:
        raise ProfileLoadError(f"{path}: rays_per_cluster must be >= 1")
    n_los = sum(c.is_los_ray for c in spec.clusters)
    if spec.is_los != (n_los == 1) or n_los > 1:
        raise ProfileLoadError(f"{path}: is_los={spec.is_los} but {n_los} LOS rows")
    if spec.is_los and spec.k_factor_db is None:
        raise ProfileLoadError(f"{path}: LOS profile without k_factor_db")
    if any(c.delay_normalized < 0 for c in spec.clusters):
        raise ProfileLoadError(f"{path}: negative delay")


_PROFILE_CACHE: dict[tuple[str, str], CdlProfileSpec] = {}


def load_profile(profile_id: str, directory: str | Path | None = None) -> CdlProfileSpec:
    """Load and validate the cluster table for CDL-``profile_id``."""
    pid = str(profile_id).upper()
    if pid not in PROFILE_IDS:
        raise ValueError(f"profile must be one of {PROFILE_IDS}, got {profile_id!r}")
    base = Path(directory) if directory is not None else profile_dir()
    path = base / f"cdl_{pid.lower()}.txt"
    key = (str(path), pid)
    if key not in _PROFILE_CACHE:
        if not path.is_file():
            raise ProfileLoadError(f"profile file not found: {path}")
        _PROFILE_CACHE[key] = _parse_profile(path)
    return _PROFILE_CACHE[key]


def unit_direction(azimuth, zenith) -> np.ndarray:
    """Unit vectors for (azimuth, zenith) in radians; broadcasts, last axis = xyz."""
    azimuth, zenith = np.asarray(azimuth, float), np.asarray(zenith, float)
    return np.stack([
        np.sin(zenith) * np.cos(azimuth),
        np.sin(zenith) * np.sin(azimuth),
        np.cos(zenith),
    ], axis=-1)


def steering_vector(array: ArrayConfig, azimuth, zenith, wavelength: float) -> np.ndarray:
    """Array response ``exp(j 2pi/lambda <d_p, u>)`` for each element ``p``.

    ``azimuth``/``zenith`` may be arrays; the element axis is appended last.
    """
    if wavelength <= 0:
        raise ValueError("wavelength must be positive")
    pos = array.element_positions() * wavelength
    u = unit_direction(azimuth, zenith)
    phase = 2 * np.pi / wavelength * (u @ pos.T)
    return np.exp(1j * phase)


def scaled_delays(profile: CdlProfileSpec, delay_spread_s: float) -> np.ndarray:
    """Cluster delays in seconds, scaled so the analytic rms delay equals ``delay_spread_s``."""
    tau = profile.normalized_delays()
    rms_norm = pdp_rms(tau, profile.linear_powers())
    if rms_norm == 0:
        return tau * delay_spread_s
    return tau * (delay_spread_s / rms_norm)


def pdp_rms(delays, powers) -> float:
    delays, powers = np.asarray(delays, float), np.asarray(powers, float)
    w = powers / powers.sum()
    mean = np.sum(w * delays)
    return float(np.sqrt(max(np.sum(w * delays**2) - mean**2, 0.0)))


def rms_delay_spread(profile: CdlProfileSpec, delay_spread_s: float) -> float:
    return pdp_rms(scaled_delays(profile, delay_spread_s), profile.linear_powers())


def _ray_angles(profile: CdlProfileSpec, rng: np.random.Generator):
    """Per-ray (aod, aoa, zod, zoa) in radians plus cluster index and ray power.

    Diffuse clusters get ``M`` rays at the fixed offset pattern, with the
    arrival/zenith offsets randomly coupled to the departure ones.  The LOS
    row is a single undispersed ray.
    """
    m = profile.rays_per_cluster
    offsets = RAY_OFFSETS if m == len(RAY_OFFSETS) else np.linspace(-2.1551, 2.1551, m) if m > 1 else np.zeros(1)
    c_asd, c_asa, c_zsd, c_zsa = profile.angle_spread
    powers = profile.linear_powers()

    aod, aoa, zod, zoa, idx, pw, is_los = [], [], [], [], [], [], []
    for n, cl in enumerate(profile.clusters):
        if cl.is_los_ray:
            aod.append([cl.aod_deg]); aoa.append([cl.aoa_deg])
            zod.append([cl.zod_deg]); zoa.append([cl.zoa_deg])
            idx.append([n]); pw.append([powers[n]]); is_los.append([True])
            continue
        aod.append(cl.aod_deg + c_asd * offsets)
        aoa.append(cl.aoa_deg + c_asa * offsets[rng.permutation(m)])
        zod.append(cl.zod_deg + c_zsd * offsets[rng.permutation(m)])
        zoa.append(cl.zoa_deg + c_zsa * offsets[rng.permutation(m)])
        idx.append(np.full(m, n)); pw.append(np.full(m, powers[n] / m)); is_los.append(np.zeros(m, bool))
    cat = lambda xs: np.concatenate([np.asarray(x, float) for x in xs])
    return (np.deg2rad(cat(aod)), np.deg2rad(cat(aoa)), np.deg2rad(cat(zod)), np.deg2rad(cat(zoa)),
            np.concatenate(idx).astype(int), cat(pw), np.concatenate(is_los).astype(bool))


def generate_channel(profile: CdlProfileSpec, link: LinkConfig, seed: int) -> ChannelRealization:
    """Draw one realization of ``profile`` over ``link``.

    Randomness (ray coupling and initial phases) comes only from ``seed``;
    the snapshot time and speed are taken from ``link`` as given.
    """
    rng = np.random.default_rng(seed)
    aod, aoa, zod, zoa, cidx, pw, los = _ray_angles(profile, rng)
    phases = rng.uniform(0.0, 2 * np.pi, size=pw.shape)
    phases[los] = 0.0

    lam = link.wavelength
    doppler = (link.ue_speed_mps / lam) * np.cos(aoa - np.deg2rad(link.travel_azimuth_deg)) * np.sin(zoa)
    gain = np.sqrt(pw) * np.exp(1j * (phases + 2 * np.pi * doppler * link.snapshot_time_s))

    a_rx = steering_vector(link.ue_array, aoa, zoa, lam)  # (rays, n_rx)
    a_tx = steering_vector(link.bs_array, aod, zod, lam)  # (rays, n_tx)

    tau = scaled_delays(profile, link.resolved_delay_spread(profile.profile_id))
    ray_tau = tau[cidx]
    freq = np.exp(-2j * np.pi * np.outer(link.rb_frequencies(), ray_tau))  # (n_rb, rays)
    w = freq * gain  # (n_rb, rays)
    h = np.einsum("br,ru,rs->bus", w, a_rx, a_tx, optimize=True)

    # per-cluster realized power, averaged over antenna pairs
    # rays are grouped contiguously by cluster
    starts = np.flatnonzero(np.r_[True, np.diff(cidx) != 0])
    per_cluster = np.add.reduceat(gain[:, None, None] * a_rx[:, :, None] * a_tx[:, None, :], starts, axis=0)
    cl_power = np.mean(np.abs(per_cluster) ** 2, axis=(1, 2))

    return ChannelRealization(
        h=h, label=profile.label, seed=int(seed), link=link,
        cluster_delays_s=tau, cluster_powers=cl_power,
    )


def realization_rms_delay(real: ChannelRealization) -> float:
    """RMS delay spread of the realized power-delay profile."""
    return pdp_rms(real.cluster_delays_s, real.cluster_powers)


def with_motion(link: LinkConfig, speed_mps: float, snapshot_time_s: float) -> LinkConfig:
    return replace(link, ue_speed_mps=speed_mps, snapshot_time_s=snapshot_time_s)
