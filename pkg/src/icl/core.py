"""Domain types, the representation-space metric and the neighbourhood indicator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

DEFAULT_SMOOTHING = 1e-8


class ContractViolation(ValueError):
    """Raised when inputs break an operation's preconditions (shapes, finiteness)."""


class DegenerateBatchError(ValueError):
    """Raised when a batch is too small for a pairwise estimator."""


class PreconditionError(ValueError):
    """Raised when a mathematical hypothesis of an operation is not met."""


@dataclass(frozen=True)
class ExtraneousSpec:
    """Description of the extraneous variable ``c``.

    Discrete variables are integer coded ``0..n_classes-1``. Continuous
    variables are compared through a neighbourhood of radius ``delta`` after
    min-max normalisation to ``[0, 1]``.
    """

    kind: str
    n_classes: Optional[int] = None
    delta: Optional[float] = None

    def __post_init__(self):
        if self.kind == "discrete":
            if self.n_classes is None or self.n_classes < 2:
                raise ContractViolation("discrete spec needs n_classes >= 2")
        elif self.kind == "continuous":
            if self.delta is None or not self.delta >= 0:
                raise ContractViolation("continuous spec needs delta >= 0")
        else:
            raise ContractViolation(f"unknown extraneous kind {self.kind!r}")

    @classmethod
    def discrete(cls, n_classes: int) -> "ExtraneousSpec":
        return cls("discrete", n_classes=int(n_classes))

    @classmethod
    def continuous(cls, delta: float) -> "ExtraneousSpec":
        return cls("continuous", delta=float(delta))

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    def validate(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64).ravel()
        if not np.all(np.isfinite(c)):
            raise ContractViolation("extraneous values must be finite")
        if self.is_discrete:
            if np.any(c != np.round(c)) or np.any(c < 0) or np.any(c >= self.n_classes):
                raise ContractViolation(
                    f"discrete codes must lie in 0..{self.n_classes - 1}"
                )
        return c


@dataclass(frozen=True)
class IclParams:
    """Shape parameters of the pair energies: ``f = exp(alpha - beta d)``.

    ``delta`` is the neighbourhood radius used when ``c`` is continuous.
    """

    alpha: float = 0.0
    beta: float = 1.0
    delta: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ContractViolation("beta must be > 0")
        if not self.delta >= 0:
            raise ContractViolation("delta must be >= 0")


@dataclass(frozen=True)
class Metric:
    """Euclidean metric; ``epsilon`` smooths the distance for gradient use."""

    epsilon: float = 0.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ContractViolation("epsilon must be >= 0")


@dataclass
class LabeledBatch:
    """Features, representations, extraneous values and targets for n samples."""

    x: np.ndarray
    c: np.ndarray
    y: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.c = np.asarray(self.c, dtype=np.float64).ravel()
        n = self.x.shape[0]
        if n < 1:
            raise ContractViolation("batch must contain at least one sample")
        if self.c.shape[0] != n:
            raise ContractViolation("c length does not match x rows")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.c))):
            raise ContractViolation("batch rows must be finite")
        if self.y is not None:
            self.y = np.asarray(self.y).ravel()
            if self.y.shape[0] != n:
                raise ContractViolation("y length does not match x rows")
        if self.z is not None:
            self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
            if self.z.shape[0] != n or not np.all(np.isfinite(self.z)):
                raise ContractViolation("z must be finite with one row per sample")

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(
            x=self.x[idx],
            c=self.c[idx],
            y=None if self.y is None else self.y[idx],
            z=None if self.z is None else self.z[idx],
        )


def distance(metric: Metric, a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractViolation(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ContractViolation("distance inputs must be finite")
    sq = float(np.sum((a - b) ** 2))
    if metric.epsilon == 0:
        return float(np.sqrt(sq))
    return float(np.sqrt(sq + metric.epsilon**2))


def pairwise_distances(a, b=None) -> np.ndarray:
    """Exact Euclidean distance matrix (difference based, zero diagonal for a=b)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ContractViolation("dimension mismatch between samples")
    return cdist(a, b, "euclidean")


def smooth(d: np.ndarray, epsilon: float = DEFAULT_SMOOTHING) -> np.ndarray:
    return np.sqrt(d * d + epsilon * epsilon)


def same_neighborhood(spec: ExtraneousSpec, c, c_prime):
    """Indicator that ``c_prime`` lies in the neighbourhood of ``c``.

    Works elementwise on arrays (broadcasting), or on scalars.
    """
    c = np.asarray(c, dtype=np.float64)
    c_prime = np.asarray(c_prime, dtype=np.float64)
    if spec.is_discrete:
        out = c == c_prime
    else:
        out = np.abs(c - c_prime) <= spec.delta
    return bool(out) if out.ndim == 0 else out


def neighborhood_matrix(spec: ExtraneousSpec, c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64).ravel()
    return same_neighborhood(spec, c[:, None], c[None, :])


def minmax_normalize(values, lo=None, hi=None):
    """Scale to [0, 1] with statistics ``lo``/``hi`` (fit on ``values`` if omitted).

    Values outside the fitted range are clipped. Returns ``(scaled, lo, hi)``.
    """
    values = np.asarray(values, dtype=np.float64)
    lo = float(values.min()) if lo is None else float(lo)
    hi = float(values.max()) if hi is None else float(hi)
    if hi <= lo:
        return np.zeros_like(values), lo, hi
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0), lo, hi


def check_representations(z, min_rows: int = 2) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2:
        raise ContractViolation("representations must be a 2-D array")
    if z.shape[0] < min_rows:
        raise DegenerateBatchError(f"need at least {min_rows} samples, got {z.shape[0]}")
    if not np.all(np.isfinite(z)):
        raise ContractViolation("representations must be finite")
    return z
