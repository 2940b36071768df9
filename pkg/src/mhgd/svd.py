"""Truncated SVD of sensed feature maps and its gradient.

The forward pass eigen-decomposes the smaller Gram matrix of each
``(H*W) x D`` map with a cyclic Jacobi solver. The solver works on a whole
batch at once and applies each round of disjoint rotations (round-robin
pair ordering) as one batched matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor, make_result

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 60
DEGENERATE_RATIO = 1e-7
GAP_EPS = 1e-4
GRAD_CLIP = 1e3


class DegenerateRankError(ArithmeticError):
    def __init__(self, k: int, ratio: float, index: Optional[int] = None):
        self.k, self.ratio, self.index = k, ratio, index
        where = "" if index is None else f" (batch element {index})"
        super().__init__(f"rank too low for k={k}: sigma_k/sigma_1 = {ratio:.3g}{where}")


@dataclass
class SvdResult:
    sigma: np.ndarray    # (k,) descending
    V: np.ndarray        # (D, k) right singular vectors, sign-fixed
    U: np.ndarray        # (H*W, k) matching left singular vectors


@dataclass
class FeatureVectorSet:
    vectors: Tensor      # (N, k*D), unit rows
    origin: str = ""

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


@lru_cache(maxsize=None)
def _round_robin(n: int) -> Tuple[Tuple[np.ndarray, np.ndarray], ...]:
    players = list(range(n + (n % 2)))
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(rounds)


def jacobi_eigh(c: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS,
                backend: Optional[str] = None):
    """Eigen-decompose a batch of symmetric matrices ``(..., n, n)``.

    Returns eigenvalues sorted descending and the matching eigenvector columns.
    Sweeps stop once the off-diagonal Frobenius norm falls below ``tol``
    times the full norm. ``backend`` picks ``"compiled"`` (cyclic row order,
    one matrix at a time, needs numba) or ``"numpy"`` (round-robin order,
    whole batch at once); the default is compiled when available.
    """
    a = np.array(c, dtype=np.float64)
    batch_shape, n = a.shape[:-2], a.shape[-1]
    a = np.ascontiguousarray(a.reshape(-1, n, n))
    backend = backend or ("compiled" if _kernel is not None else "numpy")
    if backend == "compiled":
        if _kernel is None:
            raise RuntimeError("numba is not installed; use backend='numpy'")
        vecs = _kernel(a, tol, max_sweeps)
    elif backend == "numpy":
        a, vecs = _jacobi_numpy(a, tol, max_sweeps)
    else:
        raise ValueError(f"unknown Jacobi backend {backend!r}")
    evals = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=2)
    return evals.reshape(batch_shape + (n,)), vecs.reshape(batch_shape + (n, n))


def _jacobi_numpy(a: np.ndarray, tol: float, max_sweeps: int):
    n = a.shape[-1]
    b = a.shape[0]
    vecs = np.broadcast_to(np.eye(n), (b, n, n)).copy()
    scale = np.sqrt((a ** 2).sum(axis=(1, 2)))
    scale[scale == 0] = 1.0
    off_mask = ~np.eye(n, dtype=bool)
    eye = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt((a[:, off_mask] ** 2).sum(axis=1))
        if n < 2 or np.all(off <= tol * scale):
            break
        for p, q in _round_robin(n):
            app, aqq, apq = a[:, p, p], a[:, q, q], a[:, p, q]
            active = np.abs(apq) > 0
            theta = (aqq - app) / (2.0 * np.where(active, apq, 1.0))
            t = np.where(theta == 0, 1.0,
                         np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0)))
            t = np.where(active, t, 0.0)
            cos = 1.0 / np.sqrt(t * t + 1.0)
            sin = t * cos
            # All rotations of a round touch disjoint index pairs, so they
            # compose into one orthogonal matrix.
            rot = np.broadcast_to(eye, (b, n, n)).copy()
            rot[:, p, p] = cos
            rot[:, q, q] = cos
            rot[:, p, q] = sin
            rot[:, q, p] = -sin
            a = np.swapaxes(rot, 1, 2) @ a @ rot
            vecs = vecs @ rot
    return a, vecs


def _jacobi_rows(a, tol, max_sweeps):
    """In-place cyclic Jacobi on each ``a[b]``; returns the eigenvector batch."""
    batch, n = a.shape[0], a.shape[1]
    vecs = np.zeros((batch, n, n))
    for b in range(batch):
        m = a[b]
        v = vecs[b]
        scale = 0.0
        for i in range(n):
            v[i, i] = 1.0
            for j in range(n):
                scale += m[i, j] * m[i, j]
        scale = np.sqrt(scale)
        if scale == 0.0:
            scale = 1.0
        for _ in range(max_sweeps):
            off = 0.0
            for i in range(n):
                for j in range(n):
                    if i != j:
                        off += m[i, j] * m[i, j]
            if np.sqrt(off) <= tol * scale:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = m[p, q]
                    if apq == 0.0:
                        continue
                    theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                    if theta == 0.0:
                        t = 1.0
                    else:
                        t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                        if theta < 0.0:
                            t = -t
                    cos = 1.0 / np.sqrt(t * t + 1.0)
                    sin = t * cos
                    for r in range(n):
                        x, y = m[p, r], m[q, r]
                        m[p, r] = cos * x - sin * y
                        m[q, r] = sin * x + cos * y
                    for r in range(n):
                        x, y = m[r, p], m[r, q]
                        m[r, p] = cos * x - sin * y
                        m[r, q] = sin * x + cos * y
                    for r in range(n):
                        x, y = v[r, p], v[r, q]
                        v[r, p] = cos * x - sin * y
                        v[r, q] = sin * x + cos * y
    return vecs


try:
    import numba
    _kernel = numba.njit(cache=True)(_jacobi_rows)
except ImportError:  # pragma: no cover
    _kernel = None


def fix_signs(v: np.ndarray) -> np.ndarray:
    """Flip columns so that the entry of largest magnitude is positive (lowest index on ties)."""
    idx = np.argmax(np.abs(v), axis=-2)
    pivot = np.take_along_axis(v, idx[..., None, :], axis=-2)
    return v * np.where(pivot < 0, -1.0, 1.0)


def _batched_svd(f: np.ndarray, k: int):
    """Top-k factors for a batch of matrices ``(B, m, D)`` via the smaller Gram matrix.

    Returns sigma (B, k), V (B, D, k), U (B, m, k), plus the Gram eigenvalues
    (B, r) and right vectors (B, D, r) for r = min(m, D), which the backward
    pass needs. Right vectors whose singular value vanishes are zeroed.
    """
    f = np.asarray(f, dtype=np.float64)
    m, d = f.shape[-2:]
    if k < 1 or k > min(m, d):
        raise DimensionError(f"k={k} must lie in [1, min({m}, {d})]")
    ft = np.swapaxes(f, -1, -2)
    if d <= m:
        lam, basis = jacobi_eigh(ft @ f)
        lam = np.maximum(lam, 0.0)
    else:
        lam, left = jacobi_eigh(f @ ft)
        lam = np.maximum(lam, 0.0)
        sig_all = np.sqrt(lam)
        live = sig_all > 1e-8 * np.maximum(sig_all[..., :1], 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            basis = (ft @ left) / np.where(live, sig_all, 1.0)[..., None, :]
        basis = np.where(live[..., None, :], basis, 0.0)
    basis = np.concatenate([fix_signs(basis[..., :k]), basis[..., k:]], axis=-1)
    sigma = np.sqrt(lam[..., :k])
    v = basis[..., :k]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (f @ v) / sigma[..., None, :]
    return sigma, v, np.nan_to_num(u), lam, basis


def _check_rank(sigma: np.ndarray, k: int) -> None:
    s1 = sigma[..., 0]
    sk = sigma[..., k - 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s1 > 0, sk / np.where(s1 > 0, s1, 1.0), 0.0)
    bad = np.flatnonzero(ratio.reshape(-1) < DEGENERATE_RATIO)
    if bad.size:
        i = int(bad[0])
        raise DegenerateRankError(k, float(ratio.reshape(-1)[i]), i if sigma.ndim > 1 else None)


def truncated_svd(f, k: int = 1) -> SvdResult:
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionError(f"truncated_svd expects a matrix, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("truncated_svd: non-finite input")
    sigma, v, u, _, _ = _batched_svd(f[None], k)
    _check_rank(sigma[0], k)
    return SvdResult(sigma=sigma[0], V=v[0], U=u[0])


def svd_backward(f: np.ndarray, basis: np.ndarray, lam: np.ndarray, grad_v: np.ndarray,
                 gap_eps: float = GAP_EPS, clip: float = GRAD_CLIP) -> np.ndarray:
    """Vector-Jacobian product of the top-k right singular vectors w.r.t. ``f``.

    ``basis`` holds the right vectors (B, D, r) with Gram eigenvalues ``lam``
    (B, r), sign-fixed retained vectors first; ``grad_v`` is the upstream
    gradient (B, D, k). Directions outside ``basis`` carry eigenvalue 0.
    Every ``1 / (l_i - l_j)`` is replaced by ``d / (d**2 + gap_eps)``.
    """
    f = np.asarray(f, dtype=np.float64)
    k = grad_v.shape[-1]
    if not np.any(grad_v):
        return np.zeros_like(f)
    v = basis[..., :k]
    diff = lam[..., :k, None] - lam[..., None, :]              # [i, j] = l_i - l_j
    coupling = diff / (diff ** 2 + gap_eps)
    idx = np.arange(k)
    coupling[..., idx, idx] = 0.0
    proj = np.swapaxes(basis, -1, -2) @ grad_v                  # [j, i] = v_j . g_i
    inner = proj * np.swapaxes(coupling, -1, -2)               # (B, r, k)
    c_bar = basis @ inner @ np.swapaxes(v, -1, -2)
    # Directions outside span(basis) belong to the zero eigenvalue.
    resid = grad_v - basis @ proj
    lk = lam[..., :k]
    c_bar = c_bar + (resid * (lk / (lk ** 2 + gap_eps))[..., None, :]) @ np.swapaxes(v, -1, -2)
    c_sym = 0.5 * (c_bar + np.swapaxes(c_bar, -1, -2))
    return np.clip(2.0 * f @ c_sym, -clip, clip)


def _fv_op(x: Tensor, k: int) -> Tensor:
    """Concatenated top-k right singular vectors per batch element (unnormalised)."""
    n, h, w, d = x.shape
    f = x.data.reshape(n, h * w, d).astype(np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("compress_feature_map: non-finite feature map")
    sigma, v, _, lam, basis = _batched_svd(f, k)
    _check_rank(sigma, k)
    rows = np.swapaxes(v, -1, -2).reshape(n, k * d)           # v_1 ... v_k per row

    def backward(g):
        gv = np.swapaxes(g.reshape(n, k, d), -1, -2)
        gf = svd_backward(f, basis, lam, gv.astype(np.float64))
        return (gf.reshape(x.shape).astype(x.dtype),)

    return make_result(rows.astype(x.dtype), (x,), backward, "svd_compress")


def compress_feature_map(x: Tensor, k: int = 1, origin: str = "") -> FeatureVectorSet:
    """One unit-norm vector per image: top-k right singular vectors, concatenated."""
    if x.ndim != 4:
        raise DimensionError(f"compress_feature_map expects N x H x W x D, got {x.shape}")
    return FeatureVectorSet(ops.l2_normalize_rows(_fv_op(x, k)), origin)


def sign_align_pair(student: FeatureVectorSet, teacher: FeatureVectorSet) -> FeatureVectorSet:
    """Flip each student row that points away from its teacher row."""
    s, t = student.vectors, teacher.vectors
    if s.shape != t.shape:
        raise DimensionError(f"sign_align_pair: student {s.shape} vs teacher {t.shape}")
    dots = (s.data.astype(np.float64) * t.data).sum(axis=1, keepdims=True)
    signs = np.where(dots < 0, -1.0, 1.0).astype(s.dtype)
    return FeatureVectorSet(ops.mul(s, Tensor(signs, dtype=s.dtype)), student.origin)


def reconstruction_error(f: np.ndarray, res: SvdResult) -> float:
    approx = res.U @ np.diag(res.sigma) @ res.V.T
    return float(((np.asarray(f, dtype=np.float64) - approx) ** 2).sum())


def feature_vector_sets(maps: List[Tensor], k: int) -> List[FeatureVectorSet]:
    return [compress_feature_map(m, k) for m in maps]
