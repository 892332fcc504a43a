"""Two-stage adaptive column quantization.

The kept columns of a matrix are split into two groups by value range: the
widest columns get their own per-column uniform quantizer whose endpoints
snap to a shared coarse endpoint grid, and the remaining columns are each
collapsed to their column mean, with the means sharing one uniform
quantizer.  Per-column level counts come from the bit allocator; the split
point is chosen by sweeping candidate counts.

Everything the decoder needs to rebuild the exact same codebooks travels in
the payload: endpoint grid indices, four range scalars, and the allocator's
multiplier — the last two rounded to wire (float32) precision *before* the
encoder uses them, so both sides regenerate identical levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import allocator
from .allocator import AllocationProblem, BudgetInfeasibleError
from .core import IntermediateMatrix
from .wire import available_budget

__all__ = [
    "CodecConfig",
    "EndpointGrid",
    "QuantizedPayload",
    "encode_symbols",
    "decode_symbols",
    "fwq_encode",
    "fwq_decode",
    "reconstruct_columns",
    "regenerate_levels",
    "payload_spans",
    "nominal_bits",
    "error_bound",
]


@dataclass(frozen=True)
class CodecConfig:
    """Shared encoder/decoder settings for one link direction."""

    batch_size: int
    total_cols: int
    bits_per_entry: float
    direction: str = "uplink"
    endpoint_levels: int = 200

    def __post_init__(self):
        if self.direction not in ("uplink", "downlink"):
            raise ValueError("direction must be 'uplink' or 'downlink'")
        if self.batch_size < 1 or self.total_cols < 1:
            raise ValueError("batch size and column count must be positive")
        if self.bits_per_entry <= 0:
            raise ValueError("per-entry bit budget must be positive")
        if self.endpoint_levels < 2:
            raise ValueError("endpoint grid needs at least two levels")

    @property
    def bit_budget(self):
        return available_budget(
            self.batch_size, self.total_cols, self.bits_per_entry, self.direction
        )


def _f32_down(x):
    """Largest float32 value <= x."""
    y = np.float32(x)
    if not np.isfinite(y):
        raise ValueError("value outside wire float range")
    if float(y) > x:
        y = np.nextafter(y, np.float32(-np.inf))
    return float(y)


def _f32_up(x):
    """Smallest float32 value >= x."""
    y = np.float32(x)
    if not np.isfinite(y):
        raise ValueError("value outside wire float range")
    if float(y) < x:
        y = np.nextafter(y, np.float32(np.inf))
    return float(y)


def _snap_multiplier(nu):
    """Round the allocator multiplier to its wire precision (positive float32)."""
    info = np.finfo(np.float32)
    if nu >= float(info.max):
        return float(info.max)
    snapped = float(np.float32(nu))
    if snapped <= 0.0:
        snapped = float(info.tiny)
    return snapped


@dataclass(frozen=True)
class EndpointGrid:
    """Shared uniform grid the per-column quantizer endpoints snap to."""

    lo: float
    hi: float
    levels: int

    @property
    def step(self):
        if self.levels < 2:
            return 0.0
        return (self.hi - self.lo) / (self.levels - 1)

    def codepoint(self, index):
        """Grid value for 1-based ``index``; the last index is exactly ``hi``."""
        index = np.asarray(index)
        value = self.lo + (index - 1) * self.step
        return np.where(index == self.levels, self.hi, value)

    def pair_for(self, col_min, col_max):
        """Endpoint indices bracketing [col_min, col_max], containment-exact.

        Floor/ceil snapping with a one-step fix-up so the bracketing survives
        float rounding in the index arithmetic.
        """
        col_min = np.asarray(col_min, dtype=np.float64)
        col_max = np.asarray(col_max, dtype=np.float64)
        if self.step == 0.0:
            lo_idx = np.ones(col_min.shape, dtype=np.int64)
            hi_idx = np.ones(col_max.shape, dtype=np.int64)
            return lo_idx, hi_idx
        lo_idx = np.floor((col_min - self.lo) / self.step).astype(np.int64) + 1
        hi_idx = np.ceil((col_max - self.lo) / self.step).astype(np.int64) + 1
        lo_idx = np.clip(lo_idx, 1, self.levels)
        hi_idx = np.clip(hi_idx, 1, self.levels)
        while True:
            bad = (np.asarray(self.codepoint(lo_idx)) > col_min) & (lo_idx > 1)
            if not bad.any():
                break
            lo_idx[bad] -= 1
        while True:
            bad = (np.asarray(self.codepoint(hi_idx)) < col_max) & (hi_idx < self.levels)
            if not bad.any():
                break
            hi_idx[bad] += 1
        return lo_idx, hi_idx


def encode_symbols(values, lo, hi, levels):
    """Nearest-codepoint symbols of ``values`` on a uniform [lo, hi] grid.

    Half-way points round up (away from lo).  Degenerate grids map to 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if levels < 2 or hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    step = (hi - lo) / (levels - 1)
    symbols = np.floor((values - lo) / step + 0.5)
    return np.clip(symbols, 0, levels - 1).astype(np.int64)


def decode_symbols(symbols, lo, hi, levels):
    """Codepoint values of ``symbols``; the top symbol decodes exactly to hi."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if levels < 2 or hi <= lo:
        return np.full(symbols.shape, float(lo))
    step = (hi - lo) / (levels - 1)
    values = lo + symbols * step
    return np.where(symbols == levels - 1, float(hi), values)


@dataclass(frozen=True, eq=False)
class QuantizedPayload:
    """Everything one compressed matrix transmission carries.

    ``levels`` is an encoder-side cache of the regenerated level vector
    ([mean slot] + flagged columns in natural order); it never travels on
    the wire — the decoder recomputes it from the other fields.
    """

    kept_cols: int
    two_stage_count: int
    flags: np.ndarray                 # bool, natural column order
    endpoint_pairs: np.ndarray        # (M, 2) 1-based grid indices
    entry_symbols: tuple              # per flagged column, int64[batch]
    mean_codes: np.ndarray            # int64, one per mean-group column
    value_hi: float                   # two-stage group max (float32 value)
    value_lo: float                   # two-stage group min (float32 value)
    mean_hi: float                    # column-mean max (float32 value)
    mean_lo: float                    # column-mean min (float32 value)
    multiplier: float                 # allocator multiplier (float32 value)
    endpoint_levels: int = 200
    mask_bits: np.ndarray | None = None   # uplink keep/drop mask, len total_cols
    levels: np.ndarray | None = None      # encoder-side cache, not serialized


def payload_spans(payload: QuantizedPayload):
    """Codebook geometry from payload metadata: (lows, highs, span vector).

    The span vector is allocator-ordered: slot 0 is the mean-quantizer span,
    then one slot per flagged column in natural column order.
    """
    grid = EndpointGrid(payload.value_lo, payload.value_hi, payload.endpoint_levels)
    pairs = np.asarray(payload.endpoint_pairs, dtype=np.int64).reshape(-1, 2)
    lows = np.asarray(grid.codepoint(pairs[:, 0]), dtype=np.float64)
    highs = np.asarray(grid.codepoint(pairs[:, 1]), dtype=np.float64)
    spans = np.concatenate(([payload.mean_hi - payload.mean_lo], highs - lows))
    return lows, highs, spans


def _payload_problem(payload: QuantizedPayload, config: CodecConfig) -> AllocationProblem:
    _, _, spans = payload_spans(payload)
    return AllocationProblem(
        spans=spans,
        batch_size=config.batch_size,
        kept_cols=payload.kept_cols,
        two_stage_count=payload.two_stage_count,
        bit_budget=config.bit_budget,
        endpoint_levels=payload.endpoint_levels,
    )


def regenerate_levels(payload: QuantizedPayload, config: CodecConfig):
    """Recompute the integer level vector both codec sides agree on."""
    problem = _payload_problem(payload, config)
    levels_real = allocator.levels_for_multiplier(problem, payload.multiplier)
    return allocator.round_levels(problem, levels_real)


def fwq_encode(matrix, config: CodecConfig, mask=None, candidates=None,
               two_stage_override=None) -> QuantizedPayload:
    """Compress the kept columns of ``matrix`` into a QuantizedPayload.

    ``matrix`` holds only the transmitted columns (batch x kept).  In the
    uplink direction ``mask`` must give the keep/drop bits over all
    ``config.total_cols`` columns so the receiver can zero-fill; downlink
    payloads carry no mask (the receiver already knows it).
    """
    data = matrix.data if isinstance(matrix, IntermediateMatrix) else np.asarray(matrix, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != config.batch_size:
        raise ValueError("matrix shape does not match codec config")
    kept = data.shape[1]

    mask_bits = None
    if config.direction == "uplink":
        if mask is None:
            raise ValueError("uplink encoding requires the keep/drop mask")
        mask_bits = np.asarray(getattr(mask, "bits", mask), dtype=np.uint8)
        if mask_bits.size != config.total_cols or int(mask_bits.sum()) != kept:
            raise ValueError("mask does not match matrix columns")
    elif mask is not None:
        raise ValueError("downlink payloads do not embed a mask")

    budget = config.bit_budget
    col_min = data.min(axis=0) if kept else np.zeros(0)
    col_max = data.max(axis=0) if kept else np.zeros(0)
    col_mean = data.mean(axis=0) if kept else np.zeros(0)
    ranges = col_max - col_min
    order = np.argsort(-ranges, kind="stable")  # widest first, ties lower index

    if two_stage_override is not None:
        sweep = [int(two_stage_override)]
    elif candidates is not None:
        sweep = [int(m) for m in candidates]
    else:
        sweep = allocator.default_candidates(
            config.batch_size, kept, budget, config.endpoint_levels
        )

    prep_cache = {}

    def build(m):
        if not 0 <= m <= kept:
            return None
        flagged = np.sort(order[:m])
        mean_group = np.sort(order[m:])
        if m > 0:
            value_lo = _f32_down(float(col_min[flagged].min()))
            value_hi = _f32_up(float(col_max[flagged].max()))
        else:
            value_lo = value_hi = 0.0
        grid = EndpointGrid(value_lo, value_hi, config.endpoint_levels)
        lo_idx, hi_idx = grid.pair_for(col_min[flagged], col_max[flagged])
        if mean_group.size > 0:
            mean_lo = _f32_down(float(col_mean[mean_group].min()))
            mean_hi = _f32_up(float(col_mean[mean_group].max()))
        else:
            mean_lo = mean_hi = 0.0
        lows = np.asarray(grid.codepoint(lo_idx), dtype=np.float64)
        highs = np.asarray(grid.codepoint(hi_idx), dtype=np.float64)
        spans = np.concatenate(([mean_hi - mean_lo], highs - lows))
        problem = AllocationProblem(
            spans=spans,
            batch_size=config.batch_size,
            kept_cols=kept,
            two_stage_count=m,
            bit_budget=budget,
            endpoint_levels=config.endpoint_levels,
        )
        prep_cache[m] = (flagged, mean_group, lo_idx, hi_idx, lows, highs,
                         value_lo, value_hi, mean_lo, mean_hi)
        return problem, ranges[mean_group]

    chosen = allocator.select_M(sweep, build, snap=_snap_multiplier)
    m_star = chosen.two_stage_count
    (flagged, mean_group, lo_idx, hi_idx, lows, highs,
     value_lo, value_hi, mean_lo, mean_hi) = prep_cache[m_star]
    levels = chosen.allocation.levels_int

    flags = np.zeros(kept, dtype=bool)
    flags[flagged] = True
    entry_symbols = tuple(
        encode_symbols(data[:, col], lows[j], highs[j], int(levels[1 + j]))
        for j, col in enumerate(flagged)
    )
    mean_codes = encode_symbols(col_mean[mean_group], mean_lo, mean_hi, int(levels[0]))

    return QuantizedPayload(
        kept_cols=kept,
        two_stage_count=m_star,
        flags=flags,
        endpoint_pairs=np.stack([lo_idx, hi_idx], axis=1) if m_star else np.zeros((0, 2), dtype=np.int64),
        entry_symbols=entry_symbols,
        mean_codes=mean_codes,
        value_hi=value_hi,
        value_lo=value_lo,
        mean_hi=mean_hi,
        mean_lo=mean_lo,
        multiplier=chosen.allocation.multiplier,
        endpoint_levels=config.endpoint_levels,
        mask_bits=mask_bits,
        levels=levels,
    )


def reconstruct_columns(payload: QuantizedPayload, config: CodecConfig) -> np.ndarray:
    """Decode the transmitted columns (batch x kept, no zero-fill)."""
    levels = regenerate_levels(payload, config)
    lows, highs, _ = payload_spans(payload)
    out = np.zeros((config.batch_size, payload.kept_cols))
    flagged = np.flatnonzero(payload.flags)
    for j, col in enumerate(flagged):
        out[:, col] = decode_symbols(
            payload.entry_symbols[j], lows[j], highs[j], int(levels[1 + j])
        )
    mean_group = np.flatnonzero(~payload.flags)
    if mean_group.size:
        means = decode_symbols(payload.mean_codes, payload.mean_lo, payload.mean_hi, int(levels[0]))
        out[:, mean_group] = np.broadcast_to(means, (config.batch_size, mean_group.size))
    return out


def fwq_decode(payload: QuantizedPayload, config: CodecConfig, mask=None) -> np.ndarray:
    """Decode to the full column width, zero-filling dropped columns.

    Uplink payloads carry their own mask; for downlink payloads the caller
    passes the mask it kept from the forward transmission.
    """
    kept_matrix = reconstruct_columns(payload, config)
    bits = payload.mask_bits
    if bits is None and mask is not None:
        bits = np.asarray(getattr(mask, "bits", mask), dtype=np.uint8)
    if bits is None:
        if payload.kept_cols != config.total_cols:
            raise ValueError("no mask available to place decoded columns")
        return kept_matrix
    if bits.size != config.total_cols or int(bits.sum()) != payload.kept_cols:
        raise ValueError("mask does not match payload columns")
    out = np.zeros((config.batch_size, config.total_cols))
    out[:, np.flatnonzero(bits)] = kept_matrix
    return out


def nominal_bits(payload: QuantizedPayload, config: CodecConfig) -> float:
    """Information-theoretic payload size in bits.

    Endpoint indices + per-entry symbols + mean codes at their exact
    (fractional) widths, plus assignment flags and the four metadata floats,
    plus the keep/drop mask when embedded.  The version byte, the two header
    counters, and the multiplier are fixed protocol framing and are excluded.
    """
    levels = regenerate_levels(payload, config)
    m = payload.two_stage_count
    total = 2.0 * m * math.log2(payload.endpoint_levels)
    total += config.batch_size * float(np.log2(levels[1:].astype(np.float64)).sum())
    mean_cols = payload.kept_cols - m
    if mean_cols > 0:
        total += mean_cols * math.log2(float(levels[0]))
    total += payload.kept_cols + 128.0
    if payload.mask_bits is not None:
        total += payload.mask_bits.size
    return total


def error_bound(matrix, payload: QuantizedPayload, config: CodecConfig) -> float:
    """Worst-case squared Frobenius reconstruction error of the kept columns.

    Two-stage columns contribute the uniform-quantizer bound; mean-group
    columns contribute their within-column spread plus the mean-code bound.
    ``matrix`` is the same kept-column matrix that was encoded.
    """
    data = matrix.data if isinstance(matrix, IntermediateMatrix) else np.asarray(matrix, dtype=np.float64)
    levels = regenerate_levels(payload, config)
    _, _, spans = payload_spans(payload)
    b = config.batch_size
    bound = float(
        (spans[1:] ** 2 * b / (4.0 * (levels[1:].astype(np.float64) - 1.0) ** 2)).sum()
    )
    mean_group = np.flatnonzero(~payload.flags)
    if mean_group.size:
        ranges = data[:, mean_group].max(axis=0) - data[:, mean_group].min(axis=0)
        bound += float((ranges**2).sum()) * b / 2.0
        bound += spans[0] ** 2 * b * mean_group.size / (2.0 * (float(levels[0]) - 1.0) ** 2)
    return bound
