"""Complex SVD (one-sided Jacobi) and per-RB eigen feature extraction.

The SVD is computed with Hestenes' one-sided Jacobi method on the tall
orientation of the input, vectorized over any leading batch axes.  Every
decision (rotate or skip) depends only on the matrix itself, so a matrix
gives bit-identical factors whether it is decomposed alone or in a batch.

Phase convention: in each column of ``u`` the entry of largest magnitude is
real and positive; the matching column of ``v`` absorbs the conjugate phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROTATION_TOL = 1e-14
MAX_SWEEPS = 60


class SvdDomainError(ValueError):
    pass


class SvdConvergenceError(RuntimeError):
    pass


@dataclass
class SvdResult:
    u: np.ndarray  # (..., p, p)
    s: np.ndarray  # (..., min(p, q))
    v: np.ndarray  # (..., q, q)

    def reconstruct(self) -> np.ndarray:
        p, q = self.u.shape[-1], self.v.shape[-1]
        k = self.s.shape[-1]
        sigma = np.zeros(self.s.shape[:-1] + (p, q))
        idx = np.arange(k)
        sigma[..., idx, idx] = self.s
        return self.u @ sigma @ np.conj(np.swapaxes(self.v, -1, -2))


@dataclass
class EigenFeatures:
    u_stack: np.ndarray  # (n_rb, n_r, n_r) complex
    s_stack: np.ndarray  # (n_rb, n_r) real
    label: int = -1


def _null_floor(cols: np.ndarray) -> np.ndarray:
    """Squared norm below which a column counts as numerically zero.

    A rounding-level share of the total energy; rotating such columns only
    churns noise, and they are treated as null-space directions.
    """
    total = np.sum(cols.real**2 + cols.imag**2, axis=(1, 2))
    return total * (cols.shape[-1] * np.finfo(float).eps) ** 2


def _jacobi_columns(cols: np.ndarray, tol: float, max_sweeps: int, floor: np.ndarray):
    """Orthogonalize the rows of ``cols`` (shape ``(B, n, m)``, row i = column i).

    Pairs involving a column whose squared norm is at most ``floor`` are
    skipped.  Returns the rotated vectors and the accumulated unitary, also stored
    column-as-row, shape ``(B, n, n)``.
    """
    b, n, _ = cols.shape
    acc = np.broadcast_to(np.eye(n, dtype=complex), (b, n, n)).copy()
    pairs = [(i, j) for i in range(n - 1) for j in range(i + 1, n)]
    for _ in range(max_sweeps):
        rotated = False
        for i, j in pairs:
            ai, aj = cols[:, i], cols[:, j]
            alpha = np.sum(ai.real**2 + ai.imag**2, axis=-1)
            beta = np.sum(aj.real**2 + aj.imag**2, axis=-1)
            gamma = np.sum(np.conj(ai) * aj, axis=-1)
            mag = np.abs(gamma)
            active = (mag > tol * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not active.any():
                continue
            rotated = True
            sel = np.nonzero(active)[0]
            mag_s = mag[sel]
            phase = np.conj(gamma[sel] / mag_s)[:, None]
            zeta = (beta[sel] - alpha[sel]) / (2 * mag_s)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1 + zeta**2))
            c = (1 / np.sqrt(1 + t**2))[:, None]
            s = c * t[:, None]
            for arr in (cols, acc):
                xi = arr[sel, i]
                xj = arr[sel, j] * phase
                arr[sel, i] = c * xi - s * xj
                arr[sel, j] = s * xi + c * xj
        if not rotated:
            return cols, acc
    raise SvdConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


def _complete_basis(basis: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill invalid rows of ``basis`` (shape ``(B, m, m)``) with orthonormal vectors.

    Batch items whose invalid rows are exactly the trailing block get the
    orthogonal complement from a complete QR of the valid rows.  Anything
    else falls back to Gram-Schmidt on the standard basis vectors
    (orthogonalized twice, largest residual first).
    """
    out = basis.copy()
    b, k, m = out.shape
    n_valid = valid.sum(axis=1)
    trailing = np.all(valid == (np.arange(k)[None, :] < n_valid[:, None]), axis=1)
    for nv in np.unique(n_valid[trailing]):
        if nv == k:
            continue
        sel = np.nonzero(trailing & (n_valid == nv))[0]
        if nv == 0:
            out[sel] = np.eye(m, dtype=complex)[:k]
            continue
        q, _ = np.linalg.qr(np.swapaxes(out[sel, :nv], -1, -2), mode="complete")
        out[sel, nv:] = np.swapaxes(q[:, :, nv:k], -1, -2)
    eye = np.eye(m, dtype=complex)
    for bi in np.nonzero(~trailing)[0]:
        have = [out[bi, r] for r in range(k) if valid[bi, r]]
        for r in range(k):
            if valid[bi, r]:
                continue
            q = np.array(have) if have else np.zeros((0, m), complex)
            cand = eye.copy()
            for _ in range(2):
                cand = cand - (cand @ np.conj(q).T) @ q
            norms = np.linalg.norm(cand, axis=1)
            pick = int(np.argmax(norms))
            vec = cand[pick] / norms[pick]
            out[bi, r] = vec
            have.append(vec)
    return out


def svd(m: np.ndarray, tol: float = ROTATION_TOL, max_sweeps: int = MAX_SWEEPS,
        compute_v: bool = True) -> SvdResult:
    """Full SVD ``m = u @ diag_rect(s) @ v^H`` of a complex matrix or stack of matrices.

    ``s`` is sorted descending and holds ``min(p, q)`` singular values.  With
    ``compute_v=False`` on a wide input the null-space completion of ``v`` is
    skipped and ``v`` holds only its first ``p`` columns.
    """
    a = np.asarray(m)
    if a.ndim < 2:
        raise SvdDomainError(f"expected a matrix, got shape {a.shape}")
    if a.shape[-1] < 1 or a.shape[-2] < 1:
        raise SvdDomainError(f"empty matrix shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SvdDomainError("matrix contains non-finite entries")
    lead = a.shape[:-2]
    p, q = a.shape[-2:]
    a = a.reshape((-1, p, q)).astype(complex)
    nb = a.shape[0]
    # power-of-two rescaling (exact) keeps squared norms clear of under/overflow
    peak = np.max(np.abs(a), axis=(1, 2))
    exp2 = np.where(peak > 0, np.frexp(peak)[1], 0)
    a = np.ldexp(a.real, -exp2[:, None, None]) + 1j * np.ldexp(a.imag, -exp2[:, None, None])

    wide = p <= q
    # rows of `cols` are the columns of the tall matrix (m^H if wide, m if tall)
    cols = np.ascontiguousarray(np.conj(a) if wide else np.swapaxes(a, -1, -2))
    k, long = (p, q) if wide else (q, p)
    floor = _null_floor(cols)
    cols, acc = _jacobi_columns(cols, tol, max_sweeps, floor)

    norms = np.sqrt(np.sum(cols.real**2 + cols.imag**2, axis=-1))
    order = np.argsort(-norms, axis=1, kind="stable")
    norms = np.take_along_axis(norms, order, axis=1)
    cols = np.take_along_axis(cols, order[:, :, None], axis=1)
    acc = np.take_along_axis(acc, order[:, :, None], axis=1)

    valid = norms**2 > floor[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        thin = np.where(valid[:, :, None], cols / norms[:, :, None], 0)
    full = np.zeros((nb, long, long), complex)
    full[:, :k] = thin
    full_valid = np.zeros((nb, long), bool)
    full_valid[:, :k] = valid
    if compute_v or not wide:
        full = _complete_basis(full, full_valid)
    else:
        full = full[:, :k]
    s = np.ldexp(np.where(valid, norms, 0.0), exp2[:, None])

    # stored column-as-row -> transpose into matrix form
    small = np.swapaxes(acc, -1, -2)  # (nb, k, k), unitary of the short side
    big = np.swapaxes(full, -1, -2)  # (nb, long, long), or (nb, long, k) when v is skipped
    if wide:
        u, v = small, big
    else:
        u, v = big, small

    # phase convention on u columns
    piv = np.argmax(np.abs(u), axis=-2)  # (nb, p)
    lead_entries = np.take_along_axis(u, piv[:, None, :], axis=-2)[:, 0, :]
    mag = np.abs(lead_entries)
    rot = np.where(mag > 0, np.conj(lead_entries) / np.where(mag > 0, mag, 1), 1.0)
    u = u * rot[:, None, :]
    kk = min(p, q)
    v[:, :, :kk] = v[:, :, :kk] * rot[:, None, :kk]
    u[np.arange(nb)[:, None], piv, np.arange(p)[None, :]] = mag  # exactly real

    return SvdResult(u.reshape(lead + (p, p)), s.reshape(lead + (kk,)), v.reshape(lead + v.shape[-2:]))


def extract_emev(h, label: int | None = None) -> EigenFeatures:
    """Per-RB SVD of a CSI tensor ``(n_rb, n_r, n_t)``; keeps ``u`` and ``s``, drops ``v``.

    Accepts a raw array or anything with ``.h`` and ``.label`` attributes.
    """
    arr = getattr(h, "h", h)
    if label is None:
        label = getattr(h, "label", -1)
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"expected (n_rb, n_r, n_t), got shape {arr.shape}")
    bad = ~np.isfinite(arr).all(axis=(1, 2))
    if bad.any():
        raise SvdDomainError(f"non-finite channel entries in RB {int(np.argmax(bad))}")
    res = svd(arr, compute_v=False)
    n_r = arr.shape[1]
    s = np.zeros((arr.shape[0], n_r))
    s[:, : res.s.shape[-1]] = res.s
    return EigenFeatures(res.u, s, int(label))


def extract_emev_batch(h: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized extraction over ``(N, n_rb, n_r, n_t)``; returns ``(u, s)`` stacks."""
    h = np.asarray(h)
    n, n_rb, n_r, n_t = h.shape
    flat = h.reshape(-1, n_r, n_t)
    u = np.empty((flat.shape[0], n_r, n_r), complex)
    s = np.zeros((flat.shape[0], n_r))
    for start in range(0, flat.shape[0], chunk):
        res = svd(flat[start:start + chunk], compute_v=False)
        u[start:start + chunk] = res.u
        s[start:start + chunk, : res.s.shape[-1]] = res.s
    return u.reshape(n, n_rb, n_r, n_r), s.reshape(n, n_rb, n_r)


def precode(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    v, x = np.asarray(v), np.asarray(x)
    if v.ndim != 2 or x.shape != (v.shape[1],):
        raise ValueError(f"shape mismatch: v {v.shape}, x {x.shape}")
    return v @ x


def transmit(h: np.ndarray, x_t: np.ndarray, noise: np.ndarray) -> np.ndarray:
    h, x_t, noise = np.asarray(h), np.asarray(x_t), np.asarray(noise)
    if h.ndim != 2 or x_t.shape != (h.shape[1],) or noise.shape != (h.shape[0],):
        raise ValueError(f"shape mismatch: h {h.shape}, x_t {x_t.shape}, noise {noise.shape}")
    return h @ x_t + noise


def deprecode(u: np.ndarray, y: np.ndarray) -> np.ndarray:
    u, y = np.asarray(u), np.asarray(y)
    if u.ndim != 2 or y.shape != (u.shape[0],):
        raise ValueError(f"shape mismatch: u {u.shape}, y {y.shape}")
    return np.conj(u).T @ y
