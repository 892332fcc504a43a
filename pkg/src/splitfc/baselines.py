"""Reference compressors the adaptive codec is benchmarked against.

Uniform-probability dropout and largest-score deterministic dropout reuse
the main quantization path; top-S entry sparsification transmits raw 32-bit
values plus combinatorially-coded entry positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import IntermediateMatrix
from .dropout import DropoutMask, DropoutPlan

__all__ = [
    "rand_dropout_plan",
    "deterministic_drop",
    "log2_binomial",
    "max_entries_within_budget",
    "TopSSparse",
    "topS_sparsify",
]


def rand_dropout_plan(total_cols, reduction_ratio) -> DropoutPlan:
    """Uniform dropout at the rate the adaptive plan targets on average."""
    if reduction_ratio < 1:
        raise ValueError("reduction ratio must be at least 1")
    probs = np.full(total_cols, 1.0 - 1.0 / reduction_ratio)
    return DropoutPlan(
        stds=np.zeros(total_cols),
        weights=1.0 - probs,
        probs=probs,
        bias=0.0,
        target_cols=float(np.sum(1.0 - probs)),
        total_cols=int(total_cols),
    )


def deterministic_drop(stds, keep_count) -> DropoutMask:
    """Keep the ``keep_count`` highest-score columns (ties to the lower index).

    Unlike the stochastic plans, survivors are not rescaled — the caller
    transmits them as-is.
    """
    stds = np.asarray(stds, dtype=np.float64)
    if not 0 <= keep_count <= stds.size:
        raise ValueError("keep count out of range")
    order = np.argsort(-stds, kind="stable")
    kept = np.sort(order[:keep_count])
    bits = np.zeros(stds.size, dtype=np.uint8)
    bits[kept] = 1
    return DropoutMask(bits=bits, kept=kept)


def log2_binomial(n, k) -> float:
    """log2 of the binomial coefficient C(n, k), via log-gamma."""
    n = int(n)
    k = int(k)
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)) / math.log(2.0)


def max_entries_within_budget(pool_size, budget_bits) -> int:
    """Largest S with 32*S + log2(C(pool_size, S)) <= budget_bits.

    The cost is strictly increasing in S (each extra entry costs 32 bits and
    the position-coding term grows until the pool is nearly exhausted), so a
    binary search applies.
    """
    pool_size = int(pool_size)

    def cost(s):
        return 32.0 * s + log2_binomial(pool_size, s)

    if cost(pool_size) <= budget_bits:
        return pool_size
    lo, hi = 0, pool_size  # cost(lo) == 0 <= budget < cost(hi)
    if budget_bits < 0:
        return 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cost(mid) <= budget_bits:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class TopSSparse:
    """Sparse transmission: 32-bit values at combinatorially-coded positions."""

    shape: tuple
    indices: np.ndarray      # flat positions, ascending
    values: np.ndarray       # float32 payload values
    pool_size: int           # positions the index code chooses among
    nominal_bits: float

    @property
    def kept(self):
        return int(self.indices.size)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out.ravel()[self.indices] = self.values.astype(np.float64)
        return out


def topS_sparsify(matrix, budget_bits, support=None) -> TopSSparse:
    """Keep the largest-magnitude entries that fit the bit budget.

    With ``support`` given (flat indices), only those positions are eligible
    and the index code runs over the support — the gradient direction first
    restricts itself to the positions the forward pass transmitted.
    Magnitude ties resolve to the lower flat index.
    """
    data = matrix.data if isinstance(matrix, IntermediateMatrix) else np.asarray(matrix, dtype=np.float64)
    flat = data.ravel()
    if support is None:
        candidates = np.arange(flat.size)
    else:
        candidates = np.asarray(support, dtype=np.int64)
    pool = candidates.size
    keep = max_entries_within_budget(pool, budget_bits)
    order = np.argsort(-np.abs(flat[candidates]), kind="stable")
    chosen = np.sort(candidates[order[:keep]])
    return TopSSparse(
        shape=data.shape,
        indices=chosen,
        values=flat[chosen].astype(np.float32),
        pool_size=pool,
        nominal_bits=32.0 * keep + log2_binomial(pool, keep),
    )
