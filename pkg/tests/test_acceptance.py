"""End-to-end acceptance checks, one test per criterion.

The desk-scale criteria (5 and 6) generate 2,000 channels per class and
train both networks, which takes roughly half an hour on one CPU core.
``CHANID_CSI_EPOCHS`` caps the CSI-IdNet epoch budget (default 3).
"""

import hashlib
import os
import time

import numpy as np
import pytest

from chanid.channel import PROFILE_IDS, LinkConfig, generate_channel, load_profile, realization_rms_delay
from chanid.dataset import (
    SNR_GRID_DB, add_awgn, generate_dataset, measure_power, model_inputs, read_manifest, regenerate,
    serialize, split_counts, stratified_split, to_mode,
)
from chanid.eigen import deprecode, precode, svd, transmit
from chanid.nn.models import Model, build_spec, count_flops, count_params
from chanid.nn.training import TrainConfig, evaluate, inference_latency, train
from helpers import model_gradient_check

MASTER_SEED = 42
PER_CLASS = 2000
CSI_EPOCHS = int(os.environ.get("CHANID_CSI_EPOCHS", "3"))
LOS_GROUP = np.array([0, 0, 0, 1, 1])


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def check(record_property, ok: bool, detail: str):
    record_property("detail", detail)
    assert ok, detail


# ---- shared desk-scale run ----

@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    samples, manifest = generate_dataset(PER_CLASS, LinkConfig(), MASTER_SEED)
    split = {k: np.array(v) for k, v in manifest.splits.items()}
    return {"samples": samples, "split": split, "gen_seconds": time.perf_counter() - t0}


def fit(desk, mode, epochs):
    s, sp = desk["samples"][mode], desk["split"]
    x = model_inputs(s)
    model = Model(build_spec(mode), seed=1)
    t0 = time.perf_counter()
    _, hist = train(model, [a[sp["train"]] for a in x], s.labels[sp["train"]],
                    [a[sp["val"]] for a in x], s.labels[sp["val"]], TrainConfig(epochs=epochs, seed=1))
    return model, hist, time.perf_counter() - t0


@pytest.fixture(scope="module")
def emev_run(desk):
    return fit(desk, "emev", 30)


@pytest.fixture(scope="module")
def csi_run(desk):
    return fit(desk, "csi", CSI_EPOCHS)


def snr_sweep(desk, model, mode):
    te = desk["split"]["test"]
    h = desk["samples"]["csi"]
    acc = []
    for snr in SNR_GRID_DB:
        noisy = to_mode(h.h[te], h.labels[te], h.seeds[te], mode, snr)
        acc.append(evaluate(model, model_inputs(noisy), noisy.labels).accuracy)
    return np.array(acc)


# ---- criteria ----

def test_criterion_01_parameter_counts(record_property):
    e, c = count_params(build_spec("emev")), count_params(build_spec("csi"))
    check(record_property, 574_000 <= e <= 576_500 and 6_841_000 <= c <= 6_856_000,
          f"emev {e:,}, csi {c:,}")


def test_criterion_02_flop_counts(record_property):
    e, c = count_flops(build_spec("emev")), count_flops(build_spec("csi"))
    de, dc = e / 14e6 - 1, c / 204e6 - 1
    check(record_property, abs(de) <= 0.05 and abs(dc) <= 0.05,
          f"emev {e / 1e6:.2f} M ({de:+.1%}), csi {c / 1e6:.2f} M ({dc:+.1%})")


def test_criterion_03_svd_suite(record_property):
    rng = np.random.default_rng(2024)
    m = crandn(rng, 1000, 4, 64)
    res = svd(m)
    herm = lambda a: np.conj(np.swapaxes(a, -1, -2))
    recon = np.max(np.linalg.norm(res.reconstruct() - m, axis=(-2, -1)) / np.linalg.norm(m, axis=(-2, -1)))
    unit = max(np.max(np.linalg.norm(herm(q) @ q - np.eye(q.shape[-1]), axis=(-2, -1))) for q in (res.u, res.v))
    ordered = bool(np.all(res.s >= 0) and np.all(np.diff(res.s, axis=-1) <= 0))
    x = crandn(rng, 1000, 64)
    y = np.stack([deprecode(res.u[i], transmit(m[i], precode(res.v[i], x[i]), np.zeros(4))) for i in range(1000)])
    chain = np.max(np.abs(y - res.s * x[:, :4]))
    check(record_property, recon <= 1e-10 and unit <= 1e-10 and ordered and chain <= 1e-10,
          f"recon {recon:.1e}, unitarity {unit:.1e}, ordered {ordered}, zero-noise chain {chain:.1e}")


def test_criterion_04_gradient_checks(record_property):
    e = model_gradient_check("emev", n_coords=100, seed=11)
    c = model_gradient_check("csi", n_coords=100, seed=11)
    ok = e.size == c.size == 100 and max(e.max(), c.max()) <= 1e-4
    check(record_property, ok, f"max rel err emev {e.max():.1e}, csi {c.max():.1e} (100 coords each)")


@pytest.mark.slow
def test_criterion_05_desk_scale_accuracy(record_property, desk, emev_run):
    model, hist, secs = emev_run
    te = desk["split"]["test"]
    s = desk["samples"]["emev"]
    r = evaluate(model, [a[te] for a in model_inputs(s)], s.labels[te])
    cross = r.confusion[LOS_GROUP[:, None] != LOS_GROUP[None, :]].sum() / r.confusion.sum()
    check(record_property, r.accuracy >= 0.95 and cross <= 0.005,
          f"clean acc {r.accuracy:.4f}, LOS/NLOS cross {cross:.2%}, {len(hist)} epochs, "
          f"train {secs / 60:.1f} min, gen {desk['gen_seconds'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_06_noise_robustness(record_property, desk, emev_run, csi_run):
    emev = snr_sweep(desk, emev_run[0], "emev")
    csi = snr_sweep(desk, csi_run[0], "csi")
    monotone = bool(np.all(np.diff(emev) >= -0.02))
    gain = emev[-1] - emev[0]
    csi_ahead = bool(csi[0] >= emev[0] and csi[1] >= emev[1])
    fmt = lambda a: " ".join(f"{v:.3f}" for v in a)
    check(record_property, monotone and gain >= 0.10 and csi_ahead,
          f"emev [{fmt(emev)}], csi [{fmt(csi)}] over {list(SNR_GRID_DB)} dB; "
          f"csi trained {len(csi_run[1])} epochs")


def test_criterion_07_awgn_calibration(record_property):
    worst = 0.0
    for snr in SNR_GRID_DB:
        rng = np.random.default_rng(100 + snr)
        h = crandn(rng, 100_000)
        noise = add_awgn(h, snr, snr) - h
        worst = max(worst, abs(10 * np.log10(measure_power(h) / measure_power(noise)) - snr))
    check(record_property, worst <= 0.1, f"worst deviation {worst:.3f} dB over {len(SNR_GRID_DB)} grid points")


def test_criterion_08_determinism_and_split(record_property, tmp_path):
    _, manifest = generate_dataset(20, LinkConfig(), MASTER_SEED, tmp_path)
    manifest = read_manifest(tmp_path)
    same = []
    for name, digest in manifest.files.items():
        mode = name.removeprefix("samples_").removesuffix(".bin")
        same.append(serialize(regenerate(manifest, mode), tmp_path / f"re_{name}") == digest ==
                    hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
    labels = np.repeat(np.arange(5), 10_000)
    split = stratified_split(labels, seed=MASTER_SEED)
    counts = {tuple(int(np.sum(labels[split[k]] == c)) for k in ("train", "val", "test")) for c in range(5)}
    ok = all(same) and counts == {(6500, 1500, 2000)} and split_counts(10_000) == [6500, 1500, 2000]
    check(record_property, ok, f"regeneration identical {all(same)}, per-class split {sorted(counts)}")


def test_criterion_09_channel_physics(record_property):
    spec = load_profile("A")
    rms = float(np.mean([realization_rms_delay(generate_channel(spec, LinkConfig(), s)) for s in range(100)]))
    invariant = all(
        generate_channel(load_profile(p), LinkConfig(snapshot_time_s=0.0), 7).h.tobytes()
        == generate_channel(load_profile(p), LinkConfig(snapshot_time_s=1e-3), 7).h.tobytes()
        for p in PROFILE_IDS)
    power = float(np.mean([np.mean(np.abs(generate_channel(load_profile(PROFILE_IDS[i % 5]), LinkConfig(), i).h) ** 2)
                           for i in range(500)]))
    ok = abs(rms / 129e-9 - 1) <= 0.2 and invariant and 0.9 <= power <= 1.1
    check(record_property, ok, f"CDL-A rms {rms * 1e9:.1f} ns, zero-speed invariant {invariant}, mean |h|^2 {power:.3f}")


def test_criterion_10_overhead_ordering(record_property):
    rng = np.random.default_rng(0)
    lat = {}
    for arch in ("emev", "csi"):
        model = Model(build_spec(arch), seed=0)
        x = [rng.standard_normal((1,) + s).astype(np.float32) for s in model.spec.input_shapes]
        lat[arch] = inference_latency(model, x, 50)
    check(record_property, lat["emev"] < lat["csi"],
          f"median latency emev {lat['emev'] * 1e3:.2f} ms, csi {lat['csi'] * 1e3:.2f} ms")
