"""Full pipeline at desk scale: generate, train both networks, sweep SNR, profile overhead.

    python scripts/run_desk_scale.py --out runs/desk --per-class 2000 --csi-epochs 3
"""

import argparse
import json
import sys
import time
from pathlib import Path

from chanid import cli


def step(argv):
    t0 = time.perf_counter()
    rc = cli.main(argv)
    print(f"[{time.perf_counter() - t0:7.1f}s] chanid {' '.join(argv)} -> {rc}", flush=True)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--per-class", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--emev-epochs", type=int, default=30)
    ap.add_argument("--csi-epochs", type=int, default=3)
    args = ap.parse_args()

    data, models = args.out / "data", args.out / "models"
    step(["generate", "--per-class", str(args.per_class), "--seed", str(args.seed), "--out", str(data)])
    for arch, epochs in (("emev", args.emev_epochs), ("csi", args.csi_epochs)):
        step(["train", "--arch", arch, "--data", str(data), "--out", str(models), "--epochs", str(epochs)])
        step(["eval", "--checkpoint", str(models / f"{arch}.ckpt"), "--data", str(data),
              "--out", str(args.out / "eval"), "--snr", "grid"])
    step(["overhead", "--out", str(args.out)])

    print("\nSNR (dB)   " + "  ".join(f"{a:>6}" for a in ("emev", "csi")))
    sweeps = {a: json.loads((args.out / "eval" / f"eval_{a}.json").read_text()) for a in ("emev", "csi")}
    print(f"{'clean':<10} " + "  ".join(f"{sweeps[a]['accuracy']:6.4f}" for a in ("emev", "csi")))
    for i, point in enumerate(sweeps["emev"]["snr_sweep"]):
        print(f"{point['snr_db']:<10g} " + "  ".join(f"{sweeps[a]['snr_sweep'][i]['accuracy']:6.4f}"
                                               for a in ("emev", "csi")))


if __name__ == "__main__":
    main()
