"""Bit-exact serialization of quantized payloads, plus link-budget formulas.

Stream layout (little-endian header, then an MSB-first bit section):

  byte 0        format version
  bytes 1-8     kept column count, two-stage count (uint32 each)
  bytes 9-28    value_hi, value_lo, mean_hi, mean_lo, multiplier (float32)
  bit section   keep/drop mask (uplink only) | assignment flags |
                endpoint-index group | per-column symbol blocks | mean block
  padding       zeros to the next byte boundary

Symbol groups are packed as single big-endian base-Q integers, so each group
wastes less than one bit to rounding; the version byte, the two counters and
the multiplier are protocol framing outside the information accounting.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "VERSION",
    "PROTOCOL_EXTRA_BITS",
    "WireFormatError",
    "BitWriter",
    "BitReader",
    "block_bits",
    "pack_symbols",
    "unpack_symbols",
    "pack",
    "unpack",
    "CommReport",
    "build_report",
    "packing_slack_bound",
    "dropout_comm_overhead",
    "available_budget",
]

VERSION = 1

_HEADER = struct.Struct("<BIIfffff")

#: Framing bits outside the information accounting: version byte, the two
#: uint32 counters, and the float32 multiplier.
PROTOCOL_EXTRA_BITS = 8 + 32 + 32 + 32


class WireFormatError(Exception):
    """Raised for malformed, truncated, or inconsistent streams."""


class BitWriter:
    """MSB-first bit sink over a byte buffer."""

    def __init__(self):
        self._buf = bytearray()
        self._acc = 0
        self._nbits = 0

    def write_bits(self, value, nbits):
        value = int(value)
        nbits = int(nbits)
        if value < 0 or nbits < 0 or value.bit_length() > nbits:
            raise ValueError("value does not fit in the requested bit width")
        self._acc = (self._acc << nbits) | value
        self._nbits += nbits
        whole = self._nbits - (self._nbits % 8)
        if whole:
            rem = self._nbits - whole
            self._buf += (self._acc >> rem).to_bytes(whole // 8, "big")
            self._acc &= (1 << rem) - 1
            self._nbits = rem

    @property
    def bit_count(self):
        return len(self._buf) * 8 + self._nbits

    def finalize(self) -> bytes:
        """Zero-pad to a byte boundary and return the buffer."""
        if self._nbits:
            self._buf.append((self._acc << (8 - self._nbits)) & 0xFF)
            self._acc = 0
            self._nbits = 0
        return bytes(self._buf)


class BitReader:
    """MSB-first bit source over a byte string."""

    def __init__(self, data: bytes, offset_bytes=0):
        self._value = int.from_bytes(data[offset_bytes:], "big")
        self._remaining = (len(data) - offset_bytes) * 8

    def read_bits(self, nbits) -> int:
        nbits = int(nbits)
        if nbits < 0 or nbits > self._remaining:
            raise WireFormatError("bit stream truncated")
        self._remaining -= nbits
        out = self._value >> self._remaining
        self._value &= (1 << self._remaining) - 1
        return out

    @property
    def bits_left(self):
        return self._remaining


def block_bits(base, count) -> int:
    """Exact bit width of a packed base-``base`` group of ``count`` digits."""
    base = int(base)
    count = int(count)
    if count == 0:
        return 0
    if base < 2:
        raise ValueError("base must be at least 2")
    return (base**count - 1).bit_length()


def pack_symbols(symbols, base):
    """Pack digits as one big-endian base-``base`` integer: (value, bit width)."""
    base = int(base)
    value = 0
    for s in np.asarray(symbols).ravel():
        s = int(s)
        if not 0 <= s < base:
            raise ValueError("symbol out of range for base")
        value = value * base + s
    return value, block_bits(base, np.asarray(symbols).size)


def unpack_symbols(value, base, count) -> np.ndarray:
    """Inverse of pack_symbols."""
    base = int(base)
    value = int(value)
    if count and value >= base**count:
        raise WireFormatError("packed group exceeds its base-power range")
    digits = []
    for _ in range(int(count)):
        value, digit = divmod(value, base)
        digits.append(digit)
    if value:
        raise WireFormatError("packed group exceeds its base-power range")
    return np.array(digits[::-1], dtype=np.int64)


def _bits_to_int(bits) -> int:
    packed = np.packbits(np.asarray(bits, dtype=np.uint8))
    value = int.from_bytes(packed.tobytes(), "big")
    pad = packed.size * 8 - np.asarray(bits).size
    return value >> pad


def _int_to_bits(value, count) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    raw = (value << (-count % 8)).to_bytes((count + 7) // 8, "big")
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:count]


def packing_slack_bound(two_stage_count) -> int:
    """Max allowed gap between packed content bits and the nominal size.

    One sub-bit ceiling per symbol block, one for the endpoint group, one
    for the mean block, plus byte-boundary padding.
    """
    return (int(two_stage_count) + 3) + 7


def pack(payload, config) -> bytes:
    """Serialize a QuantizedPayload; asserts the packing-slack invariant."""
    from .quantizer import nominal_bits, regenerate_levels

    levels = regenerate_levels(payload, config)
    writer = BitWriter()
    header = _HEADER.pack(
        VERSION,
        payload.kept_cols,
        payload.two_stage_count,
        payload.value_hi,
        payload.value_lo,
        payload.mean_hi,
        payload.mean_lo,
        payload.multiplier,
    )
    for byte in header:
        writer.write_bits(byte, 8)

    if config.direction == "uplink":
        if payload.mask_bits is None:
            raise WireFormatError("uplink payloads must carry the keep/drop mask")
        writer.write_bits(_bits_to_int(payload.mask_bits), payload.mask_bits.size)
    elif payload.mask_bits is not None:
        raise WireFormatError("downlink payloads must not carry a mask")

    if payload.kept_cols:
        writer.write_bits(_bits_to_int(payload.flags), payload.kept_cols)

    m = payload.two_stage_count
    if m:
        digits = (np.asarray(payload.endpoint_pairs, dtype=np.int64) - 1).ravel()
        value, nbits = pack_symbols(digits, payload.endpoint_levels)
        writer.write_bits(value, nbits)
    for j in range(m):
        value, nbits = pack_symbols(payload.entry_symbols[j], int(levels[1 + j]))
        writer.write_bits(value, nbits)
    mean_cols = payload.kept_cols - m
    if mean_cols:
        value, nbits = pack_symbols(payload.mean_codes, int(levels[0]))
        writer.write_bits(value, nbits)

    blob = writer.finalize()
    content_bits = len(blob) * 8 - PROTOCOL_EXTRA_BITS
    nominal = nominal_bits(payload, config)
    floor = math.ceil(nominal - 1e-9)
    if not floor <= content_bits <= floor + packing_slack_bound(m):
        raise WireFormatError(
            f"packing slack violated: content {content_bits} bits vs nominal "
            f"{nominal:.3f} (+{packing_slack_bound(m)} allowed)"
        )
    return blob


def unpack(data: bytes, config):
    """Parse a stream produced by ``pack`` back into a QuantizedPayload."""
    from .quantizer import QuantizedPayload, regenerate_levels

    if len(data) < _HEADER.size:
        raise WireFormatError("stream shorter than the header")
    version, kept, m, value_hi, value_lo, mean_hi, mean_lo, multiplier = _HEADER.unpack_from(data)
    if version != VERSION:
        raise WireFormatError(f"unsupported format version {version}")
    if m > kept or kept > config.total_cols:
        raise WireFormatError("inconsistent column counts in header")

    reader = BitReader(data, offset_bytes=_HEADER.size)
    mask_bits = None
    if config.direction == "uplink":
        mask_bits = _int_to_bits(reader.read_bits(config.total_cols), config.total_cols)
        if int(mask_bits.sum()) != kept:
            raise WireFormatError("mask population does not match kept column count")
    flags = _int_to_bits(reader.read_bits(kept), kept).astype(bool)
    if int(flags.sum()) != m:
        raise WireFormatError("flag population does not match two-stage count")

    if m:
        group = reader.read_bits(block_bits(config.endpoint_levels, 2 * m))
        digits = unpack_symbols(group, config.endpoint_levels, 2 * m) + 1
        pairs = digits.reshape(m, 2)
        if np.any(pairs[:, 0] > pairs[:, 1]) or np.any(pairs > config.endpoint_levels):
            raise WireFormatError("endpoint indices out of order or range")
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)

    skeleton = QuantizedPayload(
        kept_cols=int(kept),
        two_stage_count=int(m),
        flags=flags,
        endpoint_pairs=pairs,
        entry_symbols=(),
        mean_codes=np.zeros(0, dtype=np.int64),
        value_hi=value_hi,
        value_lo=value_lo,
        mean_hi=mean_hi,
        mean_lo=mean_lo,
        multiplier=multiplier,
        endpoint_levels=config.endpoint_levels,
        mask_bits=mask_bits,
    )
    levels = regenerate_levels(skeleton, config)

    entry_symbols = []
    for j in range(m):
        base = int(levels[1 + j])
        raw = reader.read_bits(block_bits(base, config.batch_size))
        entry_symbols.append(unpack_symbols(raw, base, config.batch_size))
    mean_cols = kept - m
    if mean_cols:
        base = int(levels[0])
        raw = reader.read_bits(block_bits(base, mean_cols))
        mean_codes = unpack_symbols(raw, base, mean_cols)
    else:
        mean_codes = np.zeros(0, dtype=np.int64)
    if reader.bits_left >= 8:
        raise WireFormatError("trailing bytes after payload")

    return QuantizedPayload(
        kept_cols=int(kept),
        two_stage_count=int(m),
        flags=flags,
        endpoint_pairs=pairs,
        entry_symbols=tuple(entry_symbols),
        mean_codes=mean_codes,
        value_hi=value_hi,
        value_lo=value_lo,
        mean_hi=mean_hi,
        mean_lo=mean_lo,
        multiplier=multiplier,
        endpoint_levels=config.endpoint_levels,
        mask_bits=mask_bits,
    )


@dataclass(frozen=True)
class CommReport:
    """Per-transmission accounting: exact information size vs bytes on wire."""

    nominal_bits: float
    packed_bits: int
    direction: str
    iteration: int | None = None
    device: int | None = None


def build_report(payload, blob, config, iteration=None, device=None) -> CommReport:
    from .quantizer import nominal_bits

    return CommReport(
        nominal_bits=nominal_bits(payload, config),
        packed_bits=len(blob) * 8,
        direction=config.direction,
        iteration=iteration,
        device=device,
    )


def dropout_comm_overhead(batch_size, total_cols, reduction_ratio, direction) -> float:
    """Expected per-iteration bits for dropout-only compression at 32-bit values.

    The uplink additionally carries the one-bit-per-column keep/drop mask.
    """
    if reduction_ratio < 1:
        raise ValueError("reduction ratio must be at least 1")
    base = 32.0 * batch_size * total_cols / reduction_ratio
    if direction == "uplink":
        return base + total_cols
    if direction == "downlink":
        return base
    raise ValueError("direction must be 'uplink' or 'downlink'")


def available_budget(batch_size, total_cols, bits_per_entry, direction) -> float:
    """Bit budget left for the quantized payload at a per-entry target rate.

    The uplink budget pre-pays the keep/drop mask (one bit per column).
    """
    base = batch_size * total_cols * float(bits_per_entry)
    if direction == "uplink":
        return base - total_cols
    if direction == "downlink":
        return base
    raise ValueError("direction must be 'uplink' or 'downlink'")
