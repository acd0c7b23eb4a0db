"""Conflict-aware combination of per-augmentation gradients.

Two cooperating pieces operate on a set of flattened loss gradients:

* agreement weighting (``gas_weights``): each gradient receives a weight
  proportional to its dot product with the sum of all gradients, then the
  weights are L1-normalized.  Gradients aligned with the consensus
  direction get more say; weights may be negative.
* soft surgery (``sgs_apply``): components whose sign agrees across every
  gradient in the set are kept verbatim, every other component is scaled
  by a damping factor drawn once per update from a uniform interval.

``cg2a_step`` composes the two: weights and mask are both computed from
the raw gradient set, surgery is applied first, then the weighted sum is
taken.  All arithmetic is 64-bit regardless of how the model stores its
parameters.

Everything here is a pure function of its arguments plus an explicitly
passed random generator; no hidden state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError, StructuralError

# A FlatGradient is a 1-D float64 array: one loss gradient, flattened in
# parameter order (see gradtape.ParamSet for the flattening contract).
FlatGradient = np.ndarray

# A ConflictMask is a 1-D bool array, True where all gradients agree.
ConflictMask = np.ndarray

DEFAULT_EPSILON = 1e-12


class AgreementMode(enum.Enum):
    """How per-component sign agreement is decided.

    STRICT counts only all-positive components as agreement (the sign sum
    must equal the set size).  SIGN_SYMMETRIC also accepts all-negative
    components.  A zero component never agrees in either mode because
    sign(0) = 0.
    """

    STRICT = "strict"
    SIGN_SYMMETRIC = "symmetric"

    @classmethod
    def parse(cls, name: str) -> "AgreementMode":
        for mode in cls:
            if mode.value == name:
                return mode
        raise StructuralError(f"unknown agreement mode {name!r}")


@dataclass(frozen=True)
class DampingDistribution:
    """Uniform interval U(alpha, beta) for the per-step damping factor."""

    alpha: float = 0.22
    beta: float = 0.28

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise NumericError("damping bounds must be finite")
        if not (0.0 <= self.alpha <= self.beta <= 1.0):
            raise StructuralError(
                f"damping interval requires 0 <= alpha <= beta <= 1, "
                f"got ({self.alpha}, {self.beta})"
            )


class GradientSet:
    """A stack of equal-length flat gradients, one per loss term.

    Index 0 is conventionally the unaugmented loss.  Stored as a single
    (count, length) float64 array; inputs are validated once here so the
    per-step operations can stay branch-free.
    """

    __slots__ = ("stacked",)

    def __init__(self, grads: Sequence[np.ndarray] | np.ndarray):
        if isinstance(grads, np.ndarray) and grads.ndim == 2:
            arr = grads.astype(np.float64, copy=False)
        else:
            members = [np.asarray(g, dtype=np.float64) for g in grads]
            if not members:
                raise StructuralError("gradient set must hold at least one gradient")
            lengths = {m.shape for m in members}
            if any(m.ndim != 1 for m in members) or len(lengths) != 1:
                raise StructuralError(
                    f"gradients must be 1-D and equal-length, got shapes "
                    f"{sorted(m.shape for m in members)}"
                )
            arr = np.stack(members)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise StructuralError(f"gradient set needs shape (n, m), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("gradient set contains non-finite values")
        self.stacked = arr

    @property
    def count(self) -> int:
        return self.stacked.shape[0]

    @property
    def length(self) -> int:
        return self.stacked.shape[1]

    def member(self, i: int) -> FlatGradient:
        return self.stacked[i]

    def __len__(self) -> int:
        return self.count


@dataclass(frozen=True)
class WeightVector:
    """L1-normalized combination weights plus a degenerate-case flag."""

    w: np.ndarray
    fallback_used: bool = False

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", w)
        if w.ndim != 1 or w.size < 1:
            raise StructuralError("weights must be a non-empty vector")
        if self.fallback_used:
            if not np.all(w == 1.0 / w.size):
                raise StructuralError("fallback weights must all equal 1/(N+1)")
        elif abs(np.abs(w).sum() - 1.0) > 1e-9:
            raise StructuralError(
                f"weights must be L1-normalized, got sum {np.abs(w).sum()!r}"
            )

    @classmethod
    def uniform(cls, count: int, fallback: bool = False) -> "WeightVector":
        return cls(np.full(count, 1.0 / count), fallback_used=fallback)


@dataclass
class StepDiagnostics:
    """Per-update record of the quantities the combination step computed."""

    per_grad_l2_norm: np.ndarray
    pairwise_cosine: np.ndarray
    weights: WeightVector
    conflict_fraction: float
    gamma_sampled: float


def gas_weights(grads: GradientSet, epsilon_denominator: float = DEFAULT_EPSILON) -> WeightVector:
    """Agreement weights: w_i = s_i / sum_k |s_k| with s_i = sum_j g_i.g_j.

    When the denominator falls below ``epsilon_denominator`` (every
    alignment score cancels) the weights fall back to uniform 1/(N+1) and
    the vector is flagged.  The regularization scale of the underlying
    derivation cancels under L1 normalization and is not a parameter.
    """
    if epsilon_denominator <= 0:
        raise NumericError("epsilon_denominator must be positive")
    g = grads.stacked
    scores = g @ g.sum(axis=0)
    denom = np.abs(scores).sum()
    if denom < epsilon_denominator:
        return WeightVector.uniform(grads.count, fallback=True)
    return WeightVector(scores / denom, fallback_used=False)


def conflict_mask(grads: GradientSet, mode: AgreementMode = AgreementMode.SIGN_SYMMETRIC) -> ConflictMask:
    """Per-component agreement mask over the whole set.

    A component agrees when the sum of its signs has magnitude equal to
    the set size: all strictly positive in STRICT mode, all strictly
    positive or all strictly negative in SIGN_SYMMETRIC mode.  Zero
    components never agree.
    """
    sign_sum = np.sign(grads.stacked).sum(axis=0)
    n = float(grads.count)
    if mode is AgreementMode.STRICT:
        return sign_sum == n
    if mode is AgreementMode.SIGN_SYMMETRIC:
        return np.abs(sign_sum) == n
    raise StructuralError(f"unknown agreement mode {mode!r}")


def sample_damping(rng: np.random.Generator, dist: DampingDistribution) -> float:
    """Draw the one damping factor used for all conflicting components."""
    return float(rng.uniform(dist.alpha, dist.beta))


def sgs_apply(grads: GradientSet, mask: ConflictMask, gamma: float) -> GradientSet:
    """Keep agreed components verbatim, scale conflicting ones by gamma.

    Agreed components are bit-identical to the input; every conflicting
    component across every gradient is multiplied by the same gamma.
    """
    mask = np.asarray(mask)
    if mask.shape != (grads.length,):
        raise StructuralError(
            f"mask length {mask.shape} does not match gradient length {grads.length}"
        )
    if not (np.isfinite(gamma) and 0.0 <= gamma <= 1.0):
        raise NumericError(f"gamma must lie in [0, 1], got {gamma}")
    out = np.where(mask, grads.stacked, gamma * grads.stacked)
    return GradientSet(out)


def weighted_combine(grads: GradientSet, weights: WeightVector | np.ndarray) -> FlatGradient:
    """Linear combination sum_i w_i * g_i in 64-bit arithmetic."""
    w = weights.w if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    if w.shape != (grads.count,):
        raise StructuralError(
            f"weight count {w.shape} does not match gradient count {grads.count}"
        )
    return w @ grads.stacked


def pairwise_cosines(grads: GradientSet) -> np.ndarray:
    """Symmetric cosine-similarity matrix of the raw gradients.

    Rows/columns belonging to an exactly zero gradient are set to 0
    (cosine undefined); the diagonal is 1 for every nonzero gradient.
    """
    g = grads.stacked
    norms = np.linalg.norm(g, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = g / safe[:, None]
    cos = unit @ unit.T
    cos = 0.5 * (cos + cos.T)
    zero = norms == 0.0
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    np.fill_diagonal(cos, np.where(zero, 0.0, 1.0))
    return cos


def cg2a_step(
    grads: GradientSet,
    rng: np.random.Generator,
    mode: AgreementMode = AgreementMode.SIGN_SYMMETRIC,
    dist: DampingDistribution = DampingDistribution(),
) -> tuple[FlatGradient, StepDiagnostics]:
    """One full combination step: surgery, then the weighted sum.

    Weights and mask are computed independently from the raw gradient
    set; the damping factor is sampled once; the output is
    ``weighted_combine(sgs_apply(grads, mask, gamma), weights)``.
    """
    weights = gas_weights(grads)
    mask = conflict_mask(grads, mode)
    gamma = sample_damping(rng, dist)
    surged = sgs_apply(grads, mask, gamma)
    combined = weighted_combine(surged, weights)
    diag = StepDiagnostics(
        per_grad_l2_norm=np.linalg.norm(grads.stacked, axis=1),
        pairwise_cosine=pairwise_cosines(grads),
        weights=weights,
        conflict_fraction=float(np.count_nonzero(~mask)) / grads.length,
        gamma_sampled=gamma,
    )
    return combined, diag
