"""Command-line entry point: ``chanid {generate,train,eval,overhead,los-prob}``.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every JSON result
embeds the resolved config, its hash and the seeds used; CSV outputs carry a
schema version in their first comment line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import channel, dataset
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn.models import Model, build_spec, count_flops, count_params
from .nn.training import TrainConfig, evaluate, inference_latency, train

log = logging.getLogger("chanid")

SCHEMA_VERSION = 1
LOCK_NAME = ".chanid.lock"
ARCH_MODE = {"emev": "emev", "csi": "csi"}
LOS_GROUP = np.array([0, 0, 0, 1, 1])  # A, B, C NLOS; D, E LOS

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class ExperimentConfig:
    command: str
    params: dict
    out_dir: str | None = None
    link: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _result(cfg: ExperimentConfig, kind: str, **payload) -> dict:
    return {"schema": f"chanid.{kind}/{SCHEMA_VERSION}", "config": cfg.as_dict(),
            "config_hash": cfg.digest(), "created_unix": round(time.time(), 3), **payload}


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    os.replace(tmp, path)


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _write_csv(path: Path, kind: str, cfg: ExperimentConfig, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema=chanid.{kind}/{SCHEMA_VERSION} config_hash={cfg.digest()}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


@contextmanager
def output_lock(out_dir: Path):
    """Refuse to run two commands against one output directory at once."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _snr_list(text: str) -> list[float]:
    if text == "grid":
        return [float(s) for s in dataset.SNR_GRID_DB]
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from None


def _link_from_args(args) -> channel.LinkConfig:
    return channel.LinkConfig(carrier_hz=args.carrier_hz, scs_hz=args.scs_hz, n_rb=args.n_rb)


# ---- generate ---------------------------------------------------------------

def cmd_generate(args) -> int:
    link = _link_from_args(args)
    out = Path(args.out)
    cfg = ExperimentConfig("generate", {"per_class": args.per_class, "seed": args.seed,
                                        "split_seed": args.split_seed, "modes": args.modes},
                           str(out), dataset.link_summary(link))
    with output_lock(out):
        t0 = time.perf_counter()
        _, manifest = dataset.generate_dataset(args.per_class, link, args.seed, out,
                                               modes=tuple(args.modes), split_seed=args.split_seed)
        elapsed = time.perf_counter() - t0
    n = args.per_class * len(channel.PROFILE_IDS)
    print(f"generated {n} samples ({args.per_class}/class, master_seed {args.seed}) in {elapsed:.1f} s")
    for name, size in ((k, len(v)) for k, v in manifest.splits.items()):
        print(f"  {name:5s} {size}")
    for fname, digest in manifest.files.items():
        print(f"  {fname} sha256 {digest}")
    return EXIT_OK


# ---- train ------------------------------------------------------------------

def _load_mode(data_dir: Path, mode: str) -> dataset.Samples:
    path = data_dir / dataset.file_name(mode)
    if not path.is_file():
        others = [m for m in dataset.MODES if m != mode and (data_dir / dataset.file_name(m)).is_file()]
        hint = f" (found {', '.join(others)} data; arch and data mode must match)" if others else ""
        raise FileNotFoundError(f"no {mode} samples at {path}{hint}")
    samples = dataset.deserialize(path)
    if samples.mode != mode:
        raise ValueError(f"{path} holds {samples.mode} samples, expected {mode}")
    return samples


def _split(manifest: dataset.DatasetManifest, name: str) -> np.ndarray:
    if name not in manifest.splits:
        raise ValueError(f"manifest has no {name!r} split")
    return np.asarray(manifest.splits[name], dtype=np.int64)


def cmd_train(args) -> int:
    data_dir, out = Path(args.data), Path(args.out)
    tcfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       seed=args.seed, patience=args.patience)
    manifest = dataset.read_manifest(data_dir)
    cfg = ExperimentConfig("train", {"arch": args.arch, "data": str(data_dir), "train": asdict(tcfg),
                                     "master_seed": manifest.master_seed},
                           str(out), manifest.link)
    samples = _load_mode(data_dir, ARCH_MODE[args.arch])
    tr, va = _split(manifest, "train"), _split(manifest, "val")
    x = dataset.model_inputs(samples)
    model = Model(build_spec(args.arch, *samples.dims), seed=args.seed)

    with output_lock(out):
        t0 = time.perf_counter()
        _, history = train(model, [a[tr] for a in x], samples.labels[tr],
                           [a[va] for a in x], samples.labels[va], tcfg)
        elapsed = time.perf_counter() - t0
        ckpt = out / f"{args.arch}.ckpt"
        size = save_checkpoint(model, ckpt)
        cols = ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "seconds"]
        _write_csv(out / f"{args.arch}_history.csv", "history", cfg, cols,
                   [[row[c] for c in cols] for row in history])
        val = evaluate(model, [a[va] for a in x], samples.labels[va])
        _write_json(out / f"{args.arch}_train.json", _result(
            cfg, "train", checkpoint=ckpt.name, checkpoint_bytes=size, epochs_run=len(history),
            train_seconds=elapsed, val_accuracy=val.accuracy, val_loss=val.loss))
    print(f"{args.arch}: {len(history)} epochs in {elapsed:.0f} s, val accuracy {val.accuracy:.4f} -> {ckpt}")
    return EXIT_OK


# ---- eval -------------------------------------------------------------------

def _clean_h(data_dir: Path, manifest: dataset.DatasetManifest) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clean normalized H for every sample, from disk or regenerated from the manifest."""
    path = data_dir / dataset.file_name("csi")
    if path.is_file():
        s = dataset.deserialize(path)
        return s.h, s.labels, s.seeds
    log.info("no csi file in %s, regenerating channels from the manifest", data_dir)
    counts = set(manifest.per_class.values())
    return dataset.generate_h(counts.pop(), manifest.link_config(), manifest.master_seed)


def confusion_rows(confusion: np.ndarray):
    return [[channel.PROFILE_IDS[i], *map(int, row)] for i, row in enumerate(confusion)]


def los_cross_rate(confusion: np.ndarray) -> float:
    """Fraction of samples predicted across the LOS/NLOS boundary."""
    cross = LOS_GROUP[:, None] != LOS_GROUP[None, :]
    return float(confusion[cross].sum() / confusion.sum())


def cmd_eval(args) -> int:
    data_dir, out = Path(args.data), Path(args.out)
    model = load_checkpoint(args.checkpoint)
    arch = "emev" if model.spec.arch == "emev_idnet" else "csi"
    manifest = dataset.read_manifest(data_dir)
    cfg = ExperimentConfig("eval", {"checkpoint": str(args.checkpoint), "arch": arch, "data": str(data_dir),
                                    "split": args.split, "snr_db": args.snr,
                                    "master_seed": manifest.master_seed},
                           str(out), manifest.link)
    samples = _load_mode(data_dir, ARCH_MODE[arch])
    dims = (model.spec.n_rb, model.spec.n_r, model.spec.n_t)
    if tuple(samples.dims) != dims:
        raise ValueError(f"checkpoint expects dims {dims}, data has {tuple(samples.dims)}")
    idx = _split(manifest, args.split)
    if idx.size == 0:
        raise ValueError(f"split {args.split!r} is empty")
    labels = samples.labels[idx]

    with output_lock(out):
        clean = evaluate(model, [a[idx] for a in dataset.model_inputs(samples)], labels)
        sweep = []
        if args.snr:
            h, _, seeds = _clean_h(data_dir, manifest)
            for snr in args.snr:
                noisy = dataset.to_mode(h[idx], labels, seeds[idx], ARCH_MODE[arch], snr)
                r = evaluate(model, dataset.model_inputs(noisy), labels)
                sweep.append({"snr_db": snr, "accuracy": r.accuracy,
                              "per_class_accuracy": r.per_class_accuracy().tolist()})
                log.info("snr %g dB: accuracy %.4f", snr, r.accuracy)
        _write_json(out / f"eval_{arch}.json", _result(
            cfg, "eval", n_samples=int(idx.size), accuracy=clean.accuracy, loss=clean.loss,
            per_class_accuracy=dict(zip(channel.PROFILE_IDS, clean.per_class_accuracy().tolist())),
            confusion=clean.confusion, los_nlos_cross_rate=los_cross_rate(clean.confusion),
            snr_sweep=sweep))
        _write_csv(out / f"confusion_{arch}.csv", "confusion", cfg,
                   ["true\\pred", *channel.PROFILE_IDS], confusion_rows(clean.confusion))
        if sweep:
            _write_csv(out / f"snr_{arch}.csv", "snr_sweep", cfg, ["snr_db", "accuracy"],
                       [[p["snr_db"], p["accuracy"]] for p in sweep])

    print(f"{arch}: clean accuracy {clean.accuracy:.4f} on {idx.size} {args.split} samples")
    for p in sweep:
        print(f"  {p['snr_db']:>5g} dB  {p['accuracy']:.4f}")
    return EXIT_OK


# ---- overhead ---------------------------------------------------------------

def overhead_report(n_rb: int, n_r: int, n_t: int, repetitions: int, seed: int, out_dir: Path) -> dict:
    rng = np.random.default_rng(seed)
    rows = {}
    for arch in ("emev", "csi"):
        spec = build_spec(arch, n_rb, n_r, n_t)
        model = Model(spec, seed=seed)
        size = save_checkpoint(model, out_dir / f"overhead_{arch}.ckpt")
        sample = [rng.standard_normal((1,) + s).astype(np.float32) for s in spec.input_shapes]
        rows[arch] = {"params": count_params(spec), "flops": count_flops(spec), "file_bytes": size,
                      "latency_s": inference_latency(model, sample, repetitions)}
    ratios = {k: rows["emev"][k] / rows["csi"][k] for k in rows["emev"]}
    return {"models": rows, "emev_over_csi": ratios}


def cmd_overhead(args) -> int:
    out = Path(args.out)
    cfg = ExperimentConfig("overhead", {"repetitions": args.repetitions, "seed": args.seed,
                                        "n_rb": args.n_rb, "n_r": args.n_r, "n_t": args.n_t}, str(out))
    with output_lock(out):
        rep = overhead_report(args.n_rb, args.n_r, args.n_t, args.repetitions, args.seed, out)
        _write_json(out / "overhead.json", _result(cfg, "overhead", **rep))
    m, r = rep["models"], rep["emev_over_csi"]
    print(f"{'':12s}{'EMEV-IdNet':>14s}{'CSI-IdNet':>14s}{'ratio':>9s}")
    for key, fmt in (("params", "{:,}"), ("flops", "{:,}"), ("file_bytes", "{:,}"), ("latency_s", "{:.2e}")):
        print(f"{key:12s}{fmt.format(m['emev'][key]):>14s}{fmt.format(m['csi'][key]):>14s}{r[key]:>9.3f}")
    return EXIT_OK


# ---- los-prob ---------------------------------------------------------------

def cmd_los_prob(args) -> int:
    try:
        p = channel.los_probability(args.d2d, args.hut)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{p:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chanid", description="CDL channel identification workbench")
    p.add_argument("--profile-dir", help=f"directory of CDL profile files (env {channel.PROFILE_DIR_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesize a dataset")
    g.add_argument("--per-class", type=_positive_int, default=2000)
    g.add_argument("--seed", type=int, default=42, help="master seed")
    g.add_argument("--split-seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--modes", nargs="+", choices=sorted(dataset.MODES), default=["csi", "emev"])
    g.add_argument("--carrier-hz", type=_positive_float, default=28e9)
    g.add_argument("--scs-hz", type=_positive_float, default=60e3)
    g.add_argument("--n-rb", type=_positive_int, default=13)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train EMEV-IdNet or CSI-IdNet")
    t.add_argument("--arch", choices=sorted(ARCH_MODE), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=_positive_int, default=30)
    t.add_argument("--lr", type=_positive_float, default=1e-3)
    t.add_argument("--batch-size", type=_positive_int, default=64)
    t.add_argument("--patience", type=_positive_int, default=3)
    t.add_argument("--seed", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, optionally under AWGN")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--snr", type=_snr_list, default=[],
                   help="comma-separated SNRs in dB, or 'grid' for 10,12,...,20")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("overhead", help="params, FLOPs, file size and CPU latency of both nets")
    o.add_argument("--out", required=True)
    o.add_argument("--repetitions", type=_positive_int, default=200)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--n-rb", type=_positive_int, default=13)
    o.add_argument("--n-r", type=_positive_int, default=4)
    o.add_argument("--n-t", type=_positive_int, default=64)
    o.set_defaults(func=cmd_overhead)

    lp = sub.add_parser("los-prob", help="LOS probability for a 2-D distance and UE height")
    lp.add_argument("--d2d", type=float, required=True)
    lp.add_argument("--hut", type=float, required=True)
    lp.set_defaults(func=cmd_los_prob)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.profile_dir:
        os.environ[channel.PROFILE_DIR_ENV] = args.profile_dir
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, CheckpointError, channel.ProfileLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
