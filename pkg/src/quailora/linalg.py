"""Dense real linear algebra: products, truncated SVD, SPD solves.

All routines work on 2-D ``numpy.float64`` arrays.  Inputs in lower
precision are widened before any arithmetic; every public function is a
pure function of its arguments and is deterministic for identical input.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericError, ShapeError, SingularSystemError

__all__ = ["TruncatedSVD", "as_matrix", "matmul", "svd_truncated", "solve_spd"]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and widen an array-like into a finite float64 2-D array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class TruncatedSVD:
    """Top-r singular triplets: ``u @ diag(sigma) @ v.T`` approximates the input.

    ``u`` is m-by-r and ``v`` is n-by-r, both with orthonormal columns;
    ``sigma`` holds the r largest singular values in non-increasing order.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def matmul(a, b) -> np.ndarray:
    """Real matrix product with double-precision accumulation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    return a @ b


def svd_truncated(m, r: int) -> TruncatedSVD:
    """Top-r singular value decomposition of a dense matrix.

    The reconstruction ``u @ diag(sigma) @ v.T`` is a best rank-r
    approximation of ``m`` in Frobenius norm.  Each left singular vector
    is oriented so its largest-magnitude entry is non-negative, making
    the factors reproducible across runs.
    """
    m = as_matrix(m, "m")
    if not 1 <= r <= min(m.shape):
        raise ShapeError(f"rank {r} out of range for shape {m.shape}")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"SVD did not converge: {e}") from e
    u = u[:, :r].copy()
    s = s[:r].copy()
    v = vt[:r].T.copy()
    for j in range(r):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0.0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return TruncatedSVD(u=u, sigma=s, v=v)


def solve_spd(g, rhs) -> np.ndarray:
    """Solve ``g @ x = rhs`` for symmetric positive-definite ``g`` via Cholesky.

    If the factorization fails, retries with jitter ``g + eps*I`` where
    ``eps = 1e-10 * trace(g)/dim``, escalating eps by 10x up to three
    times before giving up.
    """
    g = as_matrix(g, "g")
    rhs = as_matrix(rhs, "rhs")
    n = g.shape[0]
    if g.shape[0] != g.shape[1]:
        raise ShapeError(f"g must be square, got {g.shape}")
    if rhs.shape[0] != n:
        raise ShapeError(f"rhs has {rhs.shape[0]} rows, expected {n}")
    scale = np.max(np.abs(g)) if n else 0.0
    if np.max(np.abs(g - g.T)) > 1e-8 * scale + 1e-12:
        raise ShapeError("g is not symmetric")
    gs = 0.5 * (g + g.T)

    base_eps = 1e-10 * max(np.trace(gs) / n, np.finfo(np.float64).tiny)
    jitters = [0.0] + [base_eps * 10.0**k for k in range(4)]
    for eps in jitters:
        try:
            c, low = scipy.linalg.cho_factor(
                gs + eps * np.eye(n) if eps else gs, lower=True, check_finite=False
            )
        except scipy.linalg.LinAlgError:
            continue
        return scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
    raise SingularSystemError(
        f"system of dim {n} stayed singular after jitter up to {jitters[-1]:.3e}"
    )
