"""Importance-weighted feature dropout.

Columns of the cut-layer matrix are kept with probability proportional to
their (normalized) standard deviation, calibrated so the expected number of
surviving columns equals the target width.  Survivors are rescaled by the
inverse keep probability, which makes the zero-filled reconstruction an
unbiased estimate of the original matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IntermediateMatrix

__all__ = [
    "DropoutPlan",
    "DropoutMask",
    "compute_probabilities",
    "keep_all_plan",
    "sample_mask",
    "apply_dropout",
    "drop_gradients",
    "backprop_scale",
]

#: Tolerance on the calibration identity sum(1 - p) == target_cols.
_CALIBRATION_TOL = 1e-9


@dataclass(frozen=True)
class DropoutPlan:
    """Per-column drop probabilities for one uplink transmission."""

    stds: np.ndarray        # importance scores the plan was built from
    weights: np.ndarray     # raw keep weights before clipping into [0, 1]
    probs: np.ndarray       # drop probability per column
    bias: float             # weight-flattening constant (0 when unused)
    target_cols: float      # expected number of survivors
    total_cols: int

    def __post_init__(self):
        expected = float(np.sum(1.0 - self.probs))
        if abs(expected - self.target_cols) > _CALIBRATION_TOL:
            raise ValueError(
                f"drop probabilities sum to {expected} survivors, "
                f"expected {self.target_cols}"
            )

    @property
    def keep_probs(self):
        return 1.0 - self.probs


@dataclass(frozen=True)
class DropoutMask:
    """Realized keep/drop decision: ``bits[j]`` is 1 iff column j survives."""

    bits: np.ndarray
    kept: np.ndarray

    @property
    def num_kept(self):
        return int(self.kept.size)


def compute_probabilities(stds, target_cols, bias_override=None) -> DropoutPlan:
    """Build a DropoutPlan from per-column scores ``stds``.

    ``target_cols`` is the expected survivor count, strictly between 0 and
    the column count.  Keep weights are proportional to the scores; when the
    largest weight would exceed 1, all scores are flattened by a shared bias
    so probabilities stay in [0, 1] while the expected survivor count is
    preserved.  ``bias_override`` raises (never lowers) that bias.
    """
    stds = np.asarray(stds, dtype=np.float64)
    if stds.ndim != 1 or stds.size == 0:
        raise ValueError("scores must be a non-empty vector")
    if np.any(stds < 0) or not np.isfinite(stds).all():
        raise ValueError("scores must be finite and non-negative")
    total = stds.size
    if not 0.0 < target_cols < total:
        raise ValueError("target column count must lie strictly inside (0, total)")

    score_sum = float(stds.sum())
    if score_sum == 0.0:
        # No information to rank by: drop uniformly.
        weights = np.full(total, target_cols / total)
        probs = np.full(total, 1.0 - target_cols / total)
        return DropoutPlan(stds, weights, probs, 0.0, float(target_cols), total)

    weights = stds * (target_cols / score_sum)
    bias = 0.0
    if weights.max() > 1.0:
        # Flatten scores just enough that the largest keep weight is 1.
        bias = (float(stds.max()) * target_cols - score_sum) / (total - target_cols)
        if bias_override is not None:
            bias = max(float(bias_override), bias)
        flattened = stds + bias
        # The largest weight is exactly 1 in exact arithmetic; clip the
        # floating-point overshoot so probabilities stay inside [0, 1].
        weights = np.minimum(flattened * (target_cols / float(flattened.sum())), 1.0)
    probs = 1.0 - weights
    return DropoutPlan(stds, weights, probs, bias, float(target_cols), total)


def keep_all_plan(total_cols) -> DropoutPlan:
    """Dropout off-switch: every column survives with probability 1."""
    ones = np.ones(total_cols)
    return DropoutPlan(
        stds=np.zeros(total_cols),
        weights=ones,
        probs=np.zeros(total_cols),
        bias=0.0,
        target_cols=float(total_cols),
        total_cols=int(total_cols),
    )


def sample_mask(plan: DropoutPlan, rng) -> DropoutMask:
    """Draw one keep/drop realization from ``plan``."""
    bits = (rng.random(plan.total_cols) < plan.keep_probs).astype(np.uint8)
    return DropoutMask(bits=bits, kept=np.flatnonzero(bits))


def apply_dropout(matrix, mask: DropoutMask, plan: DropoutPlan) -> IntermediateMatrix:
    """Keep the surviving columns of ``matrix``, rescaled by 1/(keep prob).

    The rescaling makes the zero-filled reconstruction unbiased column by
    column.  Dropped columns are removed, not zeroed: the result is the
    narrow matrix that actually gets transmitted.
    """
    data = matrix.data if isinstance(matrix, IntermediateMatrix) else np.asarray(matrix, dtype=np.float64)
    keep = plan.keep_probs[mask.kept]
    return IntermediateMatrix(data[:, mask.kept] / keep)


def drop_gradients(grads, mask: DropoutMask) -> IntermediateMatrix:
    """Restrict a full gradient matrix to the surviving columns (no scaling)."""
    data = grads.data if isinstance(grads, IntermediateMatrix) else np.asarray(grads, dtype=np.float64)
    return IntermediateMatrix(data[:, mask.kept])


def backprop_scale(kept_grads, mask: DropoutMask, plan: DropoutPlan) -> np.ndarray:
    """Chain the received gradient columns back through the dropout scaling.

    The forward pass multiplied surviving columns by 1/(keep prob), so the
    gradient w.r.t. the original matrix scales the received columns the same
    way and zero-fills the dropped ones.
    """
    data = kept_grads.data if isinstance(kept_grads, IntermediateMatrix) else np.asarray(kept_grads, dtype=np.float64)
    out = np.zeros((data.shape[0], plan.total_cols))
    out[:, mask.kept] = data / plan.keep_probs[mask.kept]
    return out
