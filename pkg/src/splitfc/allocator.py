"""Bit allocation across column quantizers under a shared budget.

Each transmitted column gets a uniform quantizer whose level count is chosen
to minimize the total worst-case squared reconstruction error subject to a
bit budget.  The continuous relaxation has a water-filling solution driven by
a single Lagrange multiplier: every level count solves the same scalar cubic
in the multiplier, clamped into [2, 2^32].  The multiplier is found by
bisection on the (monotone) bits-vs-multiplier curve, and the real-valued
levels are then rounded to integers by a greedy marginal-cost repair that
never exceeds the budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LEVEL_MIN",
    "LEVEL_MAX",
    "AllocationProblem",
    "LevelAllocation",
    "CandidateSolution",
    "BudgetInfeasibleError",
    "level_from_multiplier",
    "levels_for_multiplier",
    "closed_form_level",
    "clamp_thresholds",
    "allocation_bits",
    "objective",
    "solve_continuous",
    "round_levels",
    "solve",
    "default_candidates",
    "select_M",
    "brute_force_oracle",
]

_LN2 = math.log(2.0)

LEVEL_MIN = 2.0
LEVEL_MAX = float(2**32)

#: Cubic parameter above which the interior root is clamped to LEVEL_MAX:
#: (Q-1)^3 = u*Q has its root at Q = 2^32 when u = (2^32-1)^3 / 2^32.
_U_CAP = (LEVEL_MAX - 1.0) ** 3 / LEVEL_MAX

#: Cubic parameter at/below which the root is clamped to LEVEL_MIN.
_U_FLOOR = 0.5

#: Bracket stretch and stop rule for the multiplier bisection.
_BISECT_SHRINK = 1e-3
_BISECT_ITERS = 60
_BISECT_RTOL = 1e-9

_FILL_STEP_CAP = 10_000


class BudgetInfeasibleError(Exception):
    """Raised when even the cheapest encoding exceeds the bit budget."""

    def __init__(self, required_bits, budget_bits):
        self.required_bits = float(required_bits)
        self.budget_bits = float(budget_bits)
        self.shortfall = self.required_bits - self.budget_bits
        super().__init__(
            f"minimum encoding needs {self.required_bits:.3f} bits, budget is "
            f"{self.budget_bits:.3f} bits (short by {self.shortfall:.3f})"
        )


@dataclass(frozen=True)
class AllocationProblem:
    """One bit-allocation instance.

    ``spans`` has length ``two_stage_count + 1``: slot 0 is the span of the
    column-mean quantizer (ignored when every kept column is two-stage), and
    slots 1.. are the quantized value ranges of the two-stage columns.  The
    budget covers the level-dependent payload plus the fixed header cost.
    """

    spans: np.ndarray
    batch_size: int
    kept_cols: int
    two_stage_count: int
    bit_budget: float
    endpoint_levels: int = 200

    def __post_init__(self):
        spans = np.asarray(self.spans, dtype=np.float64)
        if spans.shape != (self.two_stage_count + 1,):
            raise ValueError("spans must have one slot per two-stage column plus the mean slot")
        if not np.isfinite(spans).all() or np.any(spans < 0):
            raise ValueError("spans must be finite and non-negative")
        if self.batch_size < 1 or self.kept_cols < 0:
            raise ValueError("batch size and column count must be non-negative")
        if not 0 <= self.two_stage_count <= self.kept_cols:
            raise ValueError("two-stage count out of range")
        if self.endpoint_levels < 2:
            raise ValueError("endpoint grid needs at least two levels")
        object.__setattr__(self, "spans", spans)

    @property
    def mean_cols(self):
        return self.kept_cols - self.two_stage_count

    @property
    def fixed_bits(self):
        """Level-independent payload bits: endpoint indices, flags, metadata."""
        return (
            2.0 * self.two_stage_count * math.log2(self.endpoint_levels)
            + self.kept_cols
            + 128.0
        )

    @property
    def bit_coeffs(self):
        """Bits contributed per log2(level): mean slot then two-stage slots."""
        coeffs = np.full(self.two_stage_count + 1, float(self.batch_size))
        coeffs[0] = float(self.mean_cols)
        return coeffs

    @property
    def obj_weights(self):
        """Error-term numerators: weight / (level - 1)^2 per slot."""
        weights = self.spans**2 * (self.batch_size / 4.0)
        weights[0] = self.spans[0] ** 2 * self.batch_size * self.mean_cols / 2.0
        return weights

    @property
    def stationarity_scales(self):
        """k such that the interior optimum solves (Q-1)^3 = (k/multiplier)*Q."""
        scales = self.spans**2 * (_LN2 / 2.0)
        scales[0] = self.spans[0] ** 2 * self.batch_size * _LN2
        return scales

    @property
    def active(self):
        return self.bit_coeffs > 0

    @property
    def min_bits(self):
        """Total bits with every active slot at the two-level floor."""
        return self.fixed_bits + float(self.bit_coeffs[self.active].sum())

    @property
    def max_bits(self):
        """Total bits with every active slot as large as it will ever get."""
        width = np.where(self.stationarity_scales > 0, 32.0, 1.0)
        return self.fixed_bits + float((self.bit_coeffs * width)[self.active].sum())


@dataclass(frozen=True)
class LevelAllocation:
    """Solution of an AllocationProblem."""

    levels_real: np.ndarray
    levels_int: np.ndarray | None
    multiplier: float
    objective_real: float
    objective_int: float | None


@dataclass(frozen=True)
class CandidateSolution:
    """Winning entry of a two-stage-count selection sweep."""

    two_stage_count: int
    problem: AllocationProblem
    allocation: LevelAllocation
    mean_ranges: np.ndarray


def _interior_root(u):
    """Largest real root of x^3 - u*x - u = 0 for u > 0 (vectorized).

    Stable Cardano form on the single-real-root branch (u <= 27/4), the
    trigonometric form beyond it, then two Newton polish steps.
    """
    u = np.asarray(u, dtype=np.float64)
    x = np.empty_like(u)
    cardano = u <= 27.0 / 4.0
    if cardano.any():
        uc = u[cardano]
        s = np.sqrt(np.maximum(uc * uc / 4.0 - uc**3 / 27.0, 0.0))
        a = np.cbrt(uc / 2.0 + s)
        x[cardano] = a + uc / (3.0 * a)
    if (~cardano).any():
        ut = u[~cardano]
        theta = np.arccos(np.clip(1.5 * np.sqrt(3.0 / ut), -1.0, 1.0))
        x[~cardano] = 2.0 * np.sqrt(ut / 3.0) * np.cos(theta / 3.0)
    for _ in range(2):
        x = x - (x**3 - u * x - u) / (3.0 * x * x - u)
    return x


def closed_form_level(u):
    """Textbook closed form of the interior level, valid while 81 - 12u >= 0.

    Kept as a cross-check for the numeric root; the production path uses
    ``_interior_root`` which also covers the three-real-roots branch.
    """
    u = float(u)
    if 81.0 - 12.0 * u < 0:
        raise ValueError("closed form needs 81 - 12u >= 0")
    v = (u * math.sqrt(81.0 - 12.0 * u) + 9.0 * u) ** (1.0 / 3.0)
    return (2.0 / 3.0) ** (1.0 / 3.0) * u / v + v / (2.0 ** (1.0 / 3.0) * 3.0 ** (2.0 / 3.0)) + 1.0


def _scale_for(span, batch_size, mean):
    span = float(span)
    if mean:
        return span * span * batch_size * _LN2
    return span * span * _LN2 / 2.0


def clamp_thresholds(span, batch_size, mean=False):
    """Multiplier interval (lo, hi) outside which the level clamps.

    The level is exactly LEVEL_MAX for multipliers <= lo and exactly
    LEVEL_MIN for multipliers >= hi.
    """
    k = _scale_for(span, batch_size, mean)
    return k / _U_CAP, 2.0 * k


def level_from_multiplier(multiplier, span, batch_size, mean=False):
    """Real-valued optimal level count for one slot at a given multiplier."""
    nu = float(multiplier)
    if not nu > 0:
        raise ValueError("multiplier must be positive")
    k = _scale_for(span, batch_size, mean)
    if k == 0.0:
        return LEVEL_MIN  # nothing to encode; cheapest level is exact
    # Compare in multiplier space with the exact clamp_thresholds
    # expressions, so the switch points are reproduced bit for bit.
    if nu >= 2.0 * k:
        return LEVEL_MIN
    if nu <= k / _U_CAP:
        return LEVEL_MAX
    return float(np.clip(1.0 + _interior_root(k / nu), LEVEL_MIN, LEVEL_MAX))


def levels_for_multiplier(problem: AllocationProblem, multiplier) -> np.ndarray:
    """Real-valued levels for every slot of ``problem`` (vectorized)."""
    nu = float(multiplier)
    if not nu > 0:
        raise ValueError("multiplier must be positive")
    scales = problem.stationarity_scales
    levels = np.full(scales.size, LEVEL_MIN)
    pos = scales > 0
    if pos.any():
        k = scales[pos]
        lev = np.full(k.size, LEVEL_MIN)
        lev[nu <= k / _U_CAP] = LEVEL_MAX
        interior = (nu > k / _U_CAP) & (nu < 2.0 * k)
        if interior.any():
            u = k[interior] / nu
            lev[interior] = np.clip(1.0 + _interior_root(u), LEVEL_MIN, LEVEL_MAX)
        levels[pos] = lev
    levels[~problem.active] = LEVEL_MIN
    return levels


def allocation_bits(problem: AllocationProblem, levels) -> float:
    """Total payload bits for the given per-slot levels (fixed cost included)."""
    levels = np.asarray(levels, dtype=np.float64)
    active = problem.active
    return problem.fixed_bits + float(
        (problem.bit_coeffs[active] * np.log2(levels[active])).sum()
    )


def objective(problem: AllocationProblem, levels, mean_ranges=None) -> float:
    """Worst-case squared-error objective at the given levels.

    ``mean_ranges`` holds the raw value ranges of the mean-group columns;
    their level-independent penalty term is needed when comparing solutions
    across different two-stage counts.
    """
    levels = np.asarray(levels, dtype=np.float64)
    active = problem.active
    total = float(
        (problem.obj_weights[active] / (levels[active] - 1.0) ** 2).sum()
    )
    if mean_ranges is not None:
        ranges = np.asarray(mean_ranges, dtype=np.float64)
        total += float(ranges @ ranges) * problem.batch_size / 2.0
    return total


def solve_continuous(problem: AllocationProblem) -> LevelAllocation:
    """Water-filling solution of the continuous relaxation.

    Finds the multiplier at which the bits curve meets the budget (log-space
    bisection; the curve is continuous and non-increasing in the multiplier),
    or returns the all-max solution when the budget is not binding.
    """
    budget = problem.bit_budget
    if problem.min_bits > budget:
        raise BudgetInfeasibleError(problem.min_bits, budget)

    scales = problem.stationarity_scales
    informative = problem.active & (scales > 0)
    if problem.max_bits <= budget or not informative.any():
        # Budget not binding: clamp every informative slot to the top.
        if informative.any():
            nu = 0.5 * float((scales[informative] / _U_CAP).min())
        else:
            nu = 1.0
        levels = levels_for_multiplier(problem, nu)
        return LevelAllocation(levels, None, nu, objective(problem, levels), None)

    lo = _BISECT_SHRINK * float((scales[informative] / _U_CAP).min())
    hi = 2.0 * float(scales[informative].max())
    nu = math.sqrt(lo * hi)
    for _ in range(_BISECT_ITERS):
        nu = math.sqrt(lo * hi)
        gap = allocation_bits(problem, levels_for_multiplier(problem, nu)) - budget
        if abs(gap) <= _BISECT_RTOL * budget:
            break
        if gap > 0:
            lo = nu
        else:
            hi = nu
    levels = levels_for_multiplier(problem, nu)
    return LevelAllocation(levels, None, nu, objective(problem, levels), None)


def round_levels(problem: AllocationProblem, levels_real) -> np.ndarray:
    """Round real levels to integers without ever exceeding the budget.

    Nearest-integer start, then while over budget repeatedly decrement the
    level whose removal costs the least objective per bit saved; once under
    budget, increment the level that gains the most objective per bit spent,
    skipping increments that would overshoot.  Ties go to the lower slot.
    """
    budget = problem.bit_budget
    coeffs = problem.bit_coeffs
    weights = problem.obj_weights
    active = problem.active
    levels = np.clip(np.rint(np.asarray(levels_real, dtype=np.float64)), LEVEL_MIN, LEVEL_MAX)
    levels[~active] = LEVEL_MIN
    levels = levels.astype(np.int64)

    def total_bits(lv):
        return problem.fixed_bits + float((coeffs[active] * np.log2(lv[active].astype(np.float64))).sum())

    bits = total_bits(levels)
    while bits > budget:
        can_drop = active & (levels > 2)
        if not can_drop.any():
            raise BudgetInfeasibleError(bits, budget)
        q = np.where(can_drop, levels.astype(np.float64), 3.0)
        loss = weights * (1.0 / (q - 2.0) ** 2 - 1.0 / (q - 1.0) ** 2)
        saved = np.where(can_drop, coeffs * np.log2(q / (q - 1.0)), 1.0)
        ratio = np.where(can_drop, loss / saved, np.inf)
        pick = int(np.argmin(ratio))
        gap = bits - budget
        if gap > 1000.0 * saved[pick]:
            # A slot at several billion levels saves under 1e-8 bits per
            # decrement, so unit steps cannot close a wide gap before the
            # heat death of the universe; shrink the picked slot to the
            # largest count that covers the whole gap on its own.
            shrunk = math.floor(levels[pick] * 2.0 ** (-gap / float(coeffs[pick])))
            levels[pick] = max(2, min(levels[pick] - 1, shrunk))
        else:
            levels[pick] -= 1
        bits = total_bits(levels)

    for _ in range(_FILL_STEP_CAP):
        q = levels.astype(np.float64)
        cost = coeffs * np.log2((q + 1.0) / q)
        can_grow = active & (weights > 0) & (levels < 2**32) & (bits + cost <= budget)
        if not can_grow.any():
            break
        gain = weights * (1.0 / (q - 1.0) ** 2 - 1.0 / q**2)
        ratio = np.where(can_grow, gain / np.where(can_grow, cost, 1.0), -np.inf)
        pick = int(np.argmax(ratio))
        levels[pick] += 1
        bits = total_bits(levels)
    return levels


def solve(problem: AllocationProblem, mean_ranges=None) -> LevelAllocation:
    """Continuous solve followed by integer rounding."""
    alloc = solve_continuous(problem)
    levels_int = round_levels(problem, alloc.levels_real)
    return LevelAllocation(
        levels_real=alloc.levels_real,
        levels_int=levels_int,
        multiplier=alloc.multiplier,
        objective_real=alloc.objective_real,
        objective_int=objective(problem, levels_int, mean_ranges),
    )


def default_candidates(batch_size, kept_cols, bit_budget, endpoint_levels=200):
    """Default sweep grid for the two-stage column count.

    Ten evenly spaced fractions of the largest count whose minimum-level
    encoding still fits the budget, floored to integers and clamped to the
    kept-column count.
    """
    numerator = bit_budget - 2.0 * kept_cols - 128.0
    denominator = batch_size + 2.0 * math.log2(endpoint_levels) - 1.0
    top = min(float(kept_cols), numerator / denominator)
    grid = {min(kept_cols, max(0, math.floor(top * n / 10.0))) for n in range(1, 11)}
    return sorted(grid)


def select_M(candidates, build, snap=float) -> CandidateSolution:
    """Pick the two-stage column count with the best rounded objective.

    ``build(m)`` returns (problem, mean_ranges) for a candidate count, or
    None to skip it.  Candidates are evaluated in descending order and the
    sweep stops as soon as the objective worsens, returning the previous
    candidate.  ``snap`` post-processes the multiplier before levels are
    regenerated (the codec uses it to round to wire precision).
    """
    order = sorted({int(m) for m in candidates}, reverse=True)
    if not order:
        raise ValueError("candidate set is empty")
    best = None
    worst_shortfall = None
    for m in order:
        built = build(m)
        if built is None:
            continue
        problem, mean_ranges = built
        if problem.min_bits > problem.bit_budget:
            shortfall = (problem.min_bits, problem.bit_budget)
            if worst_shortfall is None or shortfall[0] < worst_shortfall[0]:
                worst_shortfall = shortfall
            continue
        cont = solve_continuous(problem)
        nu = float(snap(cont.multiplier))
        levels_real = levels_for_multiplier(problem, nu)
        levels_int = round_levels(problem, levels_real)
        obj = objective(problem, levels_int, mean_ranges)
        if best is not None and obj > best.allocation.objective_int:
            break
        best = CandidateSolution(
            two_stage_count=m,
            problem=problem,
            allocation=LevelAllocation(levels_real, levels_int, nu, cont.objective_real, obj),
            mean_ranges=np.asarray(mean_ranges, dtype=np.float64),
        )
    if best is None:
        if worst_shortfall is not None:
            raise BudgetInfeasibleError(*worst_shortfall)
        raise BudgetInfeasibleError(float("inf"), 0.0)
    return best


def brute_force_oracle(problem: AllocationProblem, level_cap, mean_ranges=None):
    """Exhaustive integer optimum with every level capped at ``level_cap``.

    Only for tiny instances (tests); the search space is the full grid over
    the active slots.
    """
    active_idx = np.flatnonzero(problem.active)
    n_active = active_idx.size
    if n_active == 0:
        levels = np.full(problem.two_stage_count + 1, 2, dtype=np.int64)
        return levels, objective(problem, levels, mean_ranges)
    span = int(level_cap) - 1
    if span < 1:
        raise ValueError("level cap must be at least 2")
    if span**n_active > 5_000_000:
        raise ValueError("brute-force grid too large")

    axes = np.meshgrid(*([np.arange(2, level_cap + 1)] * n_active), indexing="ij")
    grid = np.stack([a.ravel() for a in axes])  # (n_active, combinations)
    coeffs = problem.bit_coeffs[active_idx, None]
    weights = problem.obj_weights[active_idx, None]
    bits = problem.fixed_bits + (coeffs * np.log2(grid)).sum(axis=0)
    feasible = bits <= problem.bit_budget
    if not feasible.any():
        raise BudgetInfeasibleError(bits.min(), problem.bit_budget)
    err = (weights / (grid - 1.0) ** 2).sum(axis=0)
    err[~feasible] = np.inf
    pick = int(np.argmin(err))
    levels = np.full(problem.two_stage_count + 1, 2, dtype=np.int64)
    levels[active_idx] = grid[:, pick]
    return levels, objective(problem, levels, mean_ranges)
