"""Jacobi SVD against numpy.linalg.svd on random 4x64 complex matrices.

numpy is used here only as a cross-check; the package never calls it.
"""

import argparse
import time

import numpy as np

from chanid.eigen import svd


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    m = rng.standard_normal((args.n, 4, 64)) + 1j * rng.standard_normal((args.n, 4, 64))
    t0 = time.perf_counter()
    res = svd(m)
    ours = time.perf_counter() - t0
    t0 = time.perf_counter()
    ref = np.linalg.svd(m, compute_uv=False)
    theirs = time.perf_counter() - t0
    rel = np.max(np.abs(res.s - ref) / ref[..., :1])
    recon = np.max(np.linalg.norm(res.reconstruct() - m, axis=(-2, -1)) / np.linalg.norm(m, axis=(-2, -1)))
    print(f"{args.n} matrices: max singular value deviation {rel:.2e} (relative to s_max), "
          f"max reconstruction error {recon:.2e}")
    print(f"time: jacobi {ours:.3f}s, LAPACK {theirs:.3f}s")


if __name__ == "__main__":
    main()
