"""Conflict-aware gradient agreement for augmentation-combination training."""

__version__ = "0.1.0"

from .gradkit import (
    AgreementMode,
    DampingDistribution,
    GradientSet,
    StepDiagnostics,
    WeightVector,
    cg2a_step,
    conflict_mask,
    gas_weights,
    sample_damping,
    sgs_apply,
    weighted_combine,
)

__all__ = [
    "AgreementMode",
    "DampingDistribution",
    "GradientSet",
    "StepDiagnostics",
    "WeightVector",
    "cg2a_step",
    "conflict_mask",
    "gas_weights",
    "sample_damping",
    "sgs_apply",
    "weighted_combine",
    "__version__",
]
