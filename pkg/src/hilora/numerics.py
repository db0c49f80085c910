"""Small dense linear-algebra and sampling kernels.

Everything works on float64 numpy arrays. Matrices are at most a few dozen
rows at desk scale, so clarity beats blocking tricks here.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DegenerateInput,
    DimensionMismatch,
    EmptyInput,
    InvalidProbabilities,
    KTooLarge,
    NonPositiveDiagonal,
    NotPositiveDefinite,
)

PIVOT_RTOL = 1e-12
SYMMETRY_RTOL = 1e-9


def _hash_to_u64(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little", signed=False)


@dataclass
class RngStream:
    """Seeded PCG64 stream; child streams are addressed by key paths.

    Two streams with the same (seed, stream_id) replay identical draws on any
    platform numpy supports. A stream is single-owner: hand each concurrent
    task its own ``child(...)``.
    """

    seed: int
    stream_id: int = 0
    algorithm: str = "pcg64"
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.algorithm != "pcg64":
            raise ValueError(f"unsupported rng algorithm {self.algorithm!r}")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(self.stream_id) & 0xFFFFFFFFFFFFFFFF
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(seq))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    def child(self, *keys) -> "RngStream":
        """Derive an independent stream from this one's id and ``keys``."""
        path = ":".join(str(k) for k in (self.stream_id, *keys))
        return RngStream(self.seed, _hash_to_u64(path), self.algorithm)

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def cholesky(m) -> np.ndarray:
    """Lower-triangular L with L @ L.T == m.

    Raises NotPositiveDefinite when a pivot falls to or below
    ``1e-12 * max(diag(m))``; callers are expected to regularize and retry.
    """
    a = as_matrix(m)
    n, n2 = a.shape
    if n != n2:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {a.shape}")
    if n == 0:
        raise EmptyInput("cholesky of an empty matrix")
    scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
    if np.max(np.abs(a - a.T)) > SYMMETRY_RTOL * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    max_diag = np.max(np.diag(a))
    if max_diag <= 0:
        raise NotPositiveDefinite("non-positive diagonal")
    threshold = PIVOT_RTOL * max_diag
    low = np.zeros_like(a)
    for j in range(n):
        row = low[j, :j]
        pivot = a[j, j] - row @ row
        if not pivot > threshold:
            raise NotPositiveDefinite(f"pivot {pivot:.3e} at column {j} below {threshold:.3e}")
        d = np.sqrt(pivot)
        low[j, j] = d
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ row) / d
    return low


def log_det_from_cholesky(chol) -> float:
    low = as_matrix(chol, "chol")
    diag = np.diag(low)
    if np.any(diag <= 0):
        raise NonPositiveDiagonal("Cholesky factor must have a positive diagonal")
    return float(2.0 * np.sum(np.log(diag)))


def mahalanobis_sq(z, mu, chol) -> np.ndarray | float:
    """(z - mu)^T Sigma^{-1} (z - mu) given Sigma's Cholesky factor.

    ``z`` may be a single vector or an (n, d) batch; a batch returns n values.
    """
    mu = as_vector(mu, "mu")
    z = np.asarray(z, dtype=np.float64)
    chol = np.asarray(chol, dtype=np.float64)
    if z.shape[-1] != mu.shape[0] or chol.shape != (mu.shape[0], mu.shape[0]):
        raise DimensionMismatch(f"z {z.shape}, mu {mu.shape}, chol {chol.shape} disagree")
    diff = (z - mu).T
    w = solve_triangular(chol, diff, lower=True, check_finite=False)
    out = np.sum(w * w, axis=0)
    return float(out) if out.ndim == 0 else out


def solve_spd(chol, rhs) -> np.ndarray:
    """Solve Sigma x = rhs with Sigma = chol @ chol.T."""
    y = solve_triangular(chol, rhs, lower=True, check_finite=False)
    return solve_triangular(chol.T, y, lower=False, check_finite=False)


def inverse_from_cholesky(chol) -> np.ndarray:
    inv = solve_spd(chol, np.eye(chol.shape[0]))
    return 0.5 * (inv + inv.T)


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyInput("softmax of an empty array")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax inputs must be finite")
    e = np.exp(s - np.max(s))
    return e / np.sum(e)


def top_k_indices(values, k: int) -> np.ndarray:
    """Indices of the k largest values, returned in ascending index order.

    Ties are resolved in favour of the lower index.
    """
    v = np.asarray(values, dtype=np.float64)
    if k > v.shape[-1]:
        raise KTooLarge(f"k={k} exceeds length {v.shape[-1]}")
    if k < 0:
        raise ValueError("k must be non-negative")
    # stable sort on the negation keeps lower indices first among equals
    order = np.argsort(-v, kind="stable")[:k]
    return np.sort(order)


def top_k_rows(values, k: int) -> np.ndarray:
    """Row-wise :func:`top_k_indices` for a (T, n) array; returns (T, k)."""
    v = np.asarray(values, dtype=np.float64)
    if k > v.shape[1]:
        raise KTooLarge(f"k={k} exceeds row length {v.shape[1]}")
    order = np.argsort(-v, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def multinomial_sample(n: int, probs, rng: RngStream) -> np.ndarray:
    """Multinomial draw via sequential conditional binomials."""
    p = np.asarray(probs, dtype=np.float64)
    if n < 0:
        raise InvalidProbabilities("n must be non-negative")
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidProbabilities(f"invalid probability vector {p!r}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvalidProbabilities(f"probabilities sum to {p.sum()!r}, not 1")
    counts = np.zeros(p.size, dtype=np.int64)
    remaining = int(n)
    mass = 1.0
    for j in range(p.size - 1):
        if remaining == 0:
            break
        if mass <= 0:
            break
        frac = min(1.0, max(0.0, p[j] / mass))
        c = int(rng.gen.binomial(remaining, frac))
        counts[j] = c
        remaining -= c
        mass -= p[j]
    if remaining:
        # assign the tail to the last category with positive mass
        pos = np.flatnonzero(p > 0)
        counts[pos[-1]] += remaining
    return counts


def _power_iteration(cov, v0, tol=1e-10, max_iter=10_000):
    v = v0 / np.linalg.norm(v0)
    lam = 0.0
    for _ in range(max_iter):
        w = cov @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0, v
        w /= nrm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        lam = float(v @ cov @ v)
        if done:
            break
    return lam, v


def pca_2d(points) -> tuple[np.ndarray, tuple[float, float]]:
    """Project points onto the top-2 principal axes of their sample covariance.

    Returns the (n, 2) projections and the explained-variance fractions of
    the two axes.
    """
    x = as_matrix(points, "points")
    n, d = x.shape
    if n < 2 or d < 2:
        raise DegenerateInput(f"pca_2d needs >= 2 points of dim >= 2, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DegenerateInput("all points are identical")
    # deterministic, non-special start vector
    v0 = np.linspace(1.0, 2.0, d)
    lam1, v1 = _power_iteration(cov, v0)
    deflated = cov - lam1 * np.outer(v1, v1)
    start = v0 - (v0 @ v1) * v1
    if np.linalg.norm(start) < 1e-12:
        start = np.roll(v0, 1) - (np.roll(v0, 1) @ v1) * v1
    lam2, v2 = _power_iteration(deflated, start)
    v2 = v2 - (v2 @ v1) * v1
    v2 /= np.linalg.norm(v2)
    lam2 = max(lam2, 0.0)
    proj = centered @ np.column_stack([v1, v2])
    return proj, (min(1.0, lam1 / total), min(1.0, lam2 / total))
