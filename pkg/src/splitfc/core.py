"""Shared array types and per-channel statistics.

The cut-layer activations travel as a dense batch-by-feature matrix.  A
ChannelLayout groups feature columns into channels so that min-max
normalization can be applied per channel; for a fully-connected cut layer
every column is its own channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ChannelLayout",
    "IntermediateMatrix",
    "ColumnStats",
    "normalize_per_channel",
    "column_stats",
    "make_rng",
]


def make_rng(seed):
    """Return the deterministic generator used for every stochastic choice.

    PCG64 under a fixed integer seed yields the same uniform stream on every
    platform, which the reproducibility contract relies on.
    """
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class ChannelLayout:
    """Partition of feature columns into channels.

    groups[c] holds the column indices of channel c.  Together the groups
    must cover 0..num_cols-1 exactly once.
    """

    groups: tuple = ()

    def __post_init__(self):
        groups = tuple(np.asarray(g, dtype=np.intp) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if groups:
            merged = np.concatenate(groups)
            expected = np.arange(self.num_cols, dtype=np.intp)
            if merged.size != expected.size or not np.array_equal(np.sort(merged), expected):
                raise ValueError("channel groups must partition the column range")

    @property
    def num_channels(self):
        return len(self.groups)

    @property
    def num_cols(self):
        return int(sum(g.size for g in self.groups))

    @classmethod
    def per_column(cls, num_cols):
        """One channel per column (fully-connected cut layer)."""
        return cls(tuple(np.array([j]) for j in range(num_cols)))

    @classmethod
    def single(cls, num_cols):
        """All columns in one channel."""
        return cls((np.arange(num_cols),))


@dataclass(frozen=True)
class IntermediateMatrix:
    """Batch-by-feature activation (or activation-gradient) matrix."""

    data: np.ndarray
    layout: ChannelLayout | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("intermediate matrix must be 2-D (batch x features)")
        if not np.isfinite(data).all():
            raise ValueError("intermediate matrix must be finite")
        if self.layout is not None and self.layout.num_cols != data.shape[1]:
            raise ValueError("channel layout does not match column count")
        object.__setattr__(self, "data", data)

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class ColumnStats:
    """Per-column summary of a matrix (population standard deviation)."""

    minimum: np.ndarray
    maximum: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def value_range(self):
        return self.maximum - self.minimum


def _as_matrix(m) -> IntermediateMatrix:
    if isinstance(m, IntermediateMatrix):
        return m
    return IntermediateMatrix(np.asarray(m))


def normalize_per_channel(m) -> IntermediateMatrix:
    """Min-max normalize each channel of ``m`` into [0, 1].

    A constant channel (max == min) maps to all zeros.  Ordering within a
    channel is preserved; the output shares the input's layout.
    """
    m = _as_matrix(m)
    layout = m.layout or ChannelLayout.single(m.cols)
    out = np.zeros_like(m.data)
    for group in layout.groups:
        block = m.data[:, group]
        lo = block.min()
        hi = block.max()
        if hi > lo:
            out[:, group] = (block - lo) / (hi - lo)
    return IntermediateMatrix(out, m.layout)


def column_stats(m) -> ColumnStats:
    """Per-column min/max/mean/std of ``m`` (std over the batch, divisor B)."""
    data = _as_matrix(m).data
    return ColumnStats(
        minimum=data.min(axis=0),
        maximum=data.max(axis=0),
        mean=data.mean(axis=0),
        std=data.std(axis=0),
    )
