"""Streaming accumulation of the activation correlation statistic.

Calibration activations arrive as batches of column vectors; what the
initializer needs is only the n-by-n second-moment matrix of those
columns, optionally stabilized with a small diagonal damping term.
Only the upper triangle is updated during accumulation and it is
mirrored on finalization, so the result is symmetric by construction.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStatisticsError, ShapeError
from .linalg import as_matrix

__all__ = [
    "CorrAccumulator",
    "CorrelationMatrix",
    "accumulate",
    "merge",
    "finalize",
    "finalize_guarded",
    "activation_layers",
    "activation_batches",
]


@dataclass
class CorrAccumulator:
    """Single-writer accumulator for the sum of column outer products."""

    dim: int
    upper: np.ndarray = field(default=None, repr=False)
    samples_seen: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ShapeError(f"dim must be >= 1, got {self.dim}")
        if self.upper is None:
            self.upper = np.zeros((self.dim, self.dim))

    def full(self) -> np.ndarray:
        """Mirror the stored triangle into a dense symmetric matrix."""
        return self.upper + np.triu(self.upper, 1).T


def accumulate(acc: CorrAccumulator, x_batch) -> CorrAccumulator:
    """Add a batch of activation columns to the running second moment."""
    x = as_matrix(x_batch, "x_batch")
    if x.shape[0] != acc.dim:
        raise ShapeError(f"batch has {x.shape[0]} rows, accumulator dim is {acc.dim}")
    acc.upper += np.triu(x @ x.T)
    acc.samples_seen += x.shape[1]
    return acc


def merge(a: CorrAccumulator, b: CorrAccumulator) -> CorrAccumulator:
    """Combine two accumulators built over disjoint batch shards."""
    if a.dim != b.dim:
        raise ShapeError(f"cannot merge accumulators of dim {a.dim} and {b.dim}")
    return CorrAccumulator(
        dim=a.dim, upper=a.upper + b.upper, samples_seen=a.samples_seen + b.samples_seen
    )


@dataclass(frozen=True)
class CorrelationMatrix:
    """Finalized symmetric PSD activation statistic plus damping metadata."""

    h: np.ndarray
    damping_lambda: float = 0.0
    samples: int = 0

    @property
    def dim(self) -> int:
        return self.h.shape[0]


def finalize(acc: CorrAccumulator, damping_fraction: float = 0.0) -> CorrelationMatrix:
    """Mirror the accumulated triangle and add diagonal damping.

    The damping term is ``damping_fraction`` times the mean diagonal of
    the accumulated sum, added to every diagonal entry.
    """
    if damping_fraction < 0:
        raise ShapeError(f"damping_fraction must be >= 0, got {damping_fraction}")
    if acc.samples_seen == 0 and damping_fraction == 0.0:
        raise DegenerateStatisticsError(
            "no samples accumulated and no damping requested"
        )
    h = acc.full()
    lam = damping_fraction * float(np.mean(np.diag(h)))
    if lam:
        h = h + lam * np.eye(acc.dim)
    return CorrelationMatrix(h=h, damping_lambda=lam, samples=acc.samples_seen)


def finalize_guarded(
    acc: CorrAccumulator, damping_fraction: float = 0.01
) -> CorrelationMatrix:
    """Finalize without damping, falling back to damping only if needed.

    The undamped statistic is kept whenever it admits a Cholesky
    factorization; otherwise (too few samples, collinear activations)
    the damped version is returned instead.
    """
    plain = finalize(acc, 0.0)
    try:
        np.linalg.cholesky(plain.h)
        return plain
    except np.linalg.LinAlgError:
        return finalize(acc, damping_fraction)


def activation_layers(container) -> list:
    """Layer names that have activation batches stored in a container."""
    layers = []
    for name in container.names():
        if name.startswith("acts/") and "/" in name[len("acts/") :]:
            layer = name[len("acts/") :].rsplit("/", 1)[0]
            if layer not in layers:
                layers.append(layer)
    return layers


def activation_batches(container, layer: str) -> list:
    """Activation batches for one layer, ordered by batch index."""
    prefix = f"acts/{layer}/"
    found = []
    for name in container.names():
        if name.startswith(prefix):
            suffix = name[len(prefix) :]
            if "/" in suffix:
                continue
            try:
                idx = int(suffix)
            except ValueError:
                raise ShapeError(f"activation entry {name!r} has a non-integer batch index")
            found.append((idx, name))
    found.sort()
    return [np.asarray(container.get_array(name), dtype=np.float64) for _, name in found]
