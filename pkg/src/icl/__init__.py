"""Inverse contrastive loss for learning representations invariant to an extraneous variable."""

from .core import (
    ContractViolation,
    DegenerateBatchError,
    ExtraneousSpec,
    IclParams,
    LabeledBatch,
    Metric,
    PreconditionError,
)
from .energy import crossing_point, f_repulse, force_curves, g_kernel, s_attract, w_potential
from .losses import decompose_check, icl_empirical, kl_compression, mmd_empirical, rw_empirical
from .training import (
    AdversaryProbe,
    InvariantClassifier,
    InvariantVAE,
    lambda_schedule,
    lemma2_check,
    measure_invariance,
    select_hyperparameters,
)

__version__ = "0.1.0"

__all__ = [
    "AdversaryProbe",
    "ContractViolation",
    "DegenerateBatchError",
    "ExtraneousSpec",
    "IclParams",
    "InvariantClassifier",
    "InvariantVAE",
    "LabeledBatch",
    "Metric",
    "PreconditionError",
    "crossing_point",
    "decompose_check",
    "f_repulse",
    "force_curves",
    "g_kernel",
    "icl_empirical",
    "kl_compression",
    "lambda_schedule",
    "lemma2_check",
    "measure_invariance",
    "mmd_empirical",
    "rw_empirical",
    "s_attract",
    "select_hyperparameters",
    "w_potential",
]
