"""Low-rank initialization against quantization error.

Given the dense weight matrix, its quantized counterpart, and the
activation correlation statistic, this module produces the rank-r pair
(A, B) whose product compensates quantization error on the calibration
distribution: an SVD warm start on the raw error followed by alternating
exact coordinate minimization of the activation-weighted objective.
"""

from dataclasses import dataclass

import numpy as np

from .calibration import CorrelationMatrix
from .errors import ShapeError
from .linalg import as_matrix, solve_spd, svd_truncated
from .quantizer import QuantizedTensor, quant_error

__all__ = [
    "LoraPair",
    "InitReport",
    "uncalibrated_objective",
    "calibrated_objective",
    "init_uncalibrated",
    "update_a",
    "update_b",
    "quailora_init",
    "baseline_init",
]

DEFAULT_RANK = 64
DEFAULT_ITERS = 20
DEFAULT_ALPHA = 16.0


@dataclass(frozen=True)
class LoraPair:
    """Trainable low-rank factors: ``a`` is m-by-r, ``b`` is n-by-r."""

    a: np.ndarray
    b: np.ndarray
    rank: int
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        a = as_matrix(self.a, "a")
        b = as_matrix(self.b, "b")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if a.shape[1] != self.rank or b.shape[1] != self.rank:
            raise ShapeError(
                f"factor widths {a.shape[1]}/{b.shape[1]} do not match rank {self.rank}"
            )

    def product(self) -> np.ndarray:
        """The dense update ``a @ b.T`` this pair encodes."""
        return self.a @ self.b.T


@dataclass(frozen=True)
class InitReport:
    """Objective values recorded while computing an initialization."""

    objective_trace: list
    iterations_run: int
    rank: int
    layer_name: str = ""


def _residual(delta: np.ndarray, pair: LoraPair) -> np.ndarray:
    delta = as_matrix(delta, "delta")
    if delta.shape != (pair.a.shape[0], pair.b.shape[0]):
        raise ShapeError(
            f"delta shape {delta.shape} does not match factors "
            f"({pair.a.shape[0]}, {pair.b.shape[0]})"
        )
    return delta - pair.product()


def uncalibrated_objective(delta, pair: LoraPair) -> float:
    """Half the squared Frobenius norm of ``delta - a @ b.T``."""
    e = _residual(delta, pair)
    return 0.5 * float(np.sum(e * e))


def calibrated_objective(delta, pair: LoraPair, h: CorrelationMatrix) -> float:
    """Activation-weighted error ``1/2 * trace(E H E^T)`` with ``E = delta - a b^T``.

    Algebraically equal to half the squared Frobenius norm of ``E X``
    where ``H = X X^T``, but computed from the n-by-n statistic alone.
    """
    e = _residual(delta, pair)
    if h.dim != e.shape[1]:
        raise ShapeError(f"H dim {h.dim} does not match delta columns {e.shape[1]}")
    return 0.5 * float(np.sum((e @ h.h) * e))


def init_uncalibrated(delta, r: int, alpha: float = DEFAULT_ALPHA) -> LoraPair:
    """Best rank-r warm start: split the top-r SVD of ``delta`` evenly.

    With ``delta = U S V^T``, returns ``a = U_r sqrt(S_r)`` and
    ``b = V_r sqrt(S_r)``, so ``a @ b.T`` is a best rank-r approximation.
    Singular values at (numerical) zero produce zero columns.
    """
    svd = svd_truncated(delta, r)
    root = np.sqrt(svd.sigma)
    return LoraPair(a=svd.u * root, b=svd.v * root, rank=r, alpha=alpha)


def update_a(delta, b, h: CorrelationMatrix) -> np.ndarray:
    """Exact minimizer over the left factor with the right factor fixed.

    Solves the r-by-r system ``(B^T H B) A^T = (delta H B)^T``, i.e.
    ``A = delta H B (B^T H B)^{-1}``.
    """
    delta = as_matrix(delta, "delta")
    b = as_matrix(b, "b")
    if h.dim != delta.shape[1] or b.shape[0] != delta.shape[1]:
        raise ShapeError(
            f"incompatible shapes: delta {delta.shape}, b {b.shape}, H dim {h.dim}"
        )
    hb = h.h @ b
    gram = b.T @ hb
    return solve_spd(gram, (delta @ hb).T).T


def update_b(delta, a) -> np.ndarray:
    """Exact minimizer over the right factor with the left factor fixed.

    Solves ``(A^T A) B^T = A^T delta``, i.e. ``B = delta^T A (A^T A)^{-1}``.
    Whenever the activation statistic is nonsingular this is also the
    minimizer of the calibrated objective: the weighting drops out.
    """
    delta = as_matrix(delta, "delta")
    a = as_matrix(a, "a")
    if a.shape[0] != delta.shape[0]:
        raise ShapeError(f"incompatible shapes: delta {delta.shape}, a {a.shape}")
    return solve_spd(a.T @ a, a.T @ delta).T


def quailora_init(
    w,
    q: QuantizedTensor,
    h: CorrelationMatrix,
    r: int = DEFAULT_RANK,
    iters: int = DEFAULT_ITERS,
    alpha: float = DEFAULT_ALPHA,
    layer_name: str = "",
    codebook=None,
):
    """Quantization-aware initialization of a low-rank pair for one layer.

    Computes the quantization error ``delta = w - dequantize(q)``, warm
    starts from its top-r SVD, then runs ``iters`` rounds of alternating
    exact updates (left factor first) on the calibrated objective.
    Returns the final pair and a report whose objective trace has one
    entry at the warm start plus one per full round; the trace is
    non-increasing because every half-step is an exact coordinate
    minimizer.
    """
    if iters < 0:
        raise ShapeError(f"iters must be >= 0, got {iters}")
    delta = quant_error(w, q, codebook)
    pair = init_uncalibrated(delta, r, alpha)
    trace = [calibrated_objective(delta, pair, h)]
    a, b = pair.a, pair.b
    for _ in range(iters):
        a = update_a(delta, b, h)
        b = update_b(delta, a)
        pair = LoraPair(a=a, b=b, rank=r, alpha=alpha)
        trace.append(calibrated_objective(delta, pair, h))
    report = InitReport(
        objective_trace=trace, iterations_run=iters, rank=r, layer_name=layer_name
    )
    return pair, report


def baseline_init(
    m: int, n: int, r: int, seed: int, alpha: float = DEFAULT_ALPHA
) -> LoraPair:
    """Reference initialization: left factor random normal, right factor zero.

    Entries of ``a`` are i.i.d. normal with variance 1/r from a seeded
    generator; ``b`` is zero, so the encoded update ``a @ b.T`` vanishes
    and the quantized mapping is unchanged at initialization.
    """
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, r)) / np.sqrt(r)
    return LoraPair(a=a, b=np.zeros((n, r)), rank=r, alpha=alpha)
