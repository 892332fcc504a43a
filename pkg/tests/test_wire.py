"""Bitstream packing: exact widths, round trips, tamper detection, budgets."""

import math

import numpy as np
import pytest

from splitfc.core import make_rng
from splitfc.dropout import compute_probabilities, sample_mask
from splitfc.quantizer import CodecConfig, fwq_encode, reconstruct_columns
from splitfc.wire import (
    PROTOCOL_EXTRA_BITS,
    VERSION,
    BitReader,
    BitWriter,
    WireFormatError,
    available_budget,
    block_bits,
    build_report,
    dropout_comm_overhead,
    pack,
    pack_symbols,
    packing_slack_bound,
    unpack,
    unpack_symbols,
)
from splitfc.quantizer import nominal_bits


class TestBitIO:
    def test_round_trip_random_widths(self):
        rng = make_rng(101)
        for _ in range(50):
            fields = []
            writer = BitWriter()
            for _ in range(int(rng.integers(1, 60))):
                nbits = int(rng.integers(1, 90))
                value = int.from_bytes(rng.bytes((nbits + 7) // 8), "big") >> (-nbits % 8)
                fields.append((value, nbits))
                writer.write_bits(value, nbits)
            total = writer.bit_count
            blob = writer.finalize()
            assert len(blob) == (total + 7) // 8
            reader = BitReader(blob)
            for value, nbits in fields:
                assert reader.read_bits(nbits) == value

    def test_writer_rejects_oversized_values(self):
        writer = BitWriter()
        with pytest.raises(ValueError):
            writer.write_bits(4, 2)

    def test_reader_raises_on_truncation(self):
        reader = BitReader(b"\xff")
        reader.read_bits(8)
        with pytest.raises(WireFormatError):
            reader.read_bits(1)


class TestSymbolGroups:
    def test_frozen_base4_example(self):
        # Digits (3,0,1) base 4 pack to 3*16 + 0*4 + 1 = 49 in 6 bits
        # (4^3 - 1 = 63 needs 6 bits).
        value, nbits = pack_symbols(np.array([3, 0, 1]), 4)
        assert (value, nbits) == (49, 6)

    def test_frozen_base3_width(self):
        # 3^4 - 1 = 80 needs 7 bits, below the 8 bits of 4 ceil(log2 3) digits.
        assert block_bits(3, 4) == 7

    def test_width_is_the_exact_ceiling(self):
        rng = make_rng(103)
        for _ in range(300):
            base = int(rng.integers(2, 2**20))
            count = int(rng.integers(0, 40))
            width = block_bits(base, count)
            assert width == math.ceil(count * math.log2(base) - 1e-12) or base ** count - 1 == 0 or (
                2 ** (width - 1) <= base**count - 1 < 2**width
            )

    def test_pack_unpack_inverse(self):
        rng = make_rng(107)
        for _ in range(100):
            base = int(rng.integers(2, 500))
            count = int(rng.integers(0, 30))
            symbols = rng.integers(0, base, size=count)
            value, _ = pack_symbols(symbols, base)
            np.testing.assert_array_equal(unpack_symbols(value, base, count), symbols)

    def test_unpack_rejects_out_of_range_group(self):
        with pytest.raises(WireFormatError):
            unpack_symbols(3**4, 3, 4)

    def test_pack_rejects_bad_symbols(self):
        with pytest.raises(ValueError):
            pack_symbols(np.array([4]), 4)


def _payload_pair(rng, direction):
    batch = int(rng.integers(4, 40))
    cols = int(rng.integers(4, 32))
    ce = max(float(rng.uniform(0.3, 1.2)), (3.0 * cols + 160.0) / (batch * cols))
    config = CodecConfig(batch, cols, ce, direction)
    matrix = rng.normal(size=(batch, cols)) * 10.0 ** rng.integers(-2, 3)
    if direction == "uplink":
        plan = compute_probabilities(rng.uniform(0.1, 2.0, size=cols), cols * 0.7)
        mask = sample_mask(plan, rng)
        payload = fwq_encode(matrix[:, mask.kept], config, mask=mask)
    else:
        payload = fwq_encode(matrix, config)
    return payload, config


class TestPackUnpack:
    def test_round_trip_reproduces_every_field(self):
        rng = make_rng(109)
        for _ in range(30):
            direction = "uplink" if rng.random() < 0.5 else "downlink"
            payload, config = _payload_pair(rng, direction)
            echoed = unpack(pack(payload, config), config)
            assert echoed.kept_cols == payload.kept_cols
            assert echoed.two_stage_count == payload.two_stage_count
            np.testing.assert_array_equal(echoed.flags, payload.flags)
            np.testing.assert_array_equal(echoed.endpoint_pairs, payload.endpoint_pairs)
            for a, b in zip(echoed.entry_symbols, payload.entry_symbols):
                np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(echoed.mean_codes, payload.mean_codes)
            assert echoed.value_hi == payload.value_hi
            assert echoed.value_lo == payload.value_lo
            assert echoed.mean_hi == payload.mean_hi
            assert echoed.mean_lo == payload.mean_lo
            assert echoed.multiplier == payload.multiplier
            if direction == "uplink":
                np.testing.assert_array_equal(echoed.mask_bits, payload.mask_bits)
            np.testing.assert_array_equal(
                reconstruct_columns(echoed, config), reconstruct_columns(payload, config)
            )

    def test_packed_size_within_slack_of_nominal(self):
        rng = make_rng(113)
        for _ in range(30):
            direction = "uplink" if rng.random() < 0.5 else "downlink"
            payload, config = _payload_pair(rng, direction)
            blob = pack(payload, config)
            content = len(blob) * 8 - PROTOCOL_EXTRA_BITS
            floor = math.ceil(nominal_bits(payload, config) - 1e-9)
            assert 0 <= content - floor <= packing_slack_bound(payload.two_stage_count)

    def test_truncated_stream_raises(self):
        rng = make_rng(127)
        payload, config = _payload_pair(rng, "downlink")
        blob = pack(payload, config)
        with pytest.raises(WireFormatError):
            unpack(blob[: len(blob) - 1], config)
        with pytest.raises(WireFormatError):
            unpack(blob[:10], config)

    def test_trailing_bytes_raise(self):
        rng = make_rng(131)
        payload, config = _payload_pair(rng, "downlink")
        blob = pack(payload, config)
        with pytest.raises(WireFormatError):
            unpack(blob + b"\x00\x00", config)

    def test_bad_version_raises(self):
        rng = make_rng(137)
        payload, config = _payload_pair(rng, "downlink")
        blob = bytearray(pack(payload, config))
        blob[0] = VERSION + 1
        with pytest.raises(WireFormatError):
            unpack(bytes(blob), config)

    def test_inconsistent_counts_raise(self):
        rng = make_rng(139)
        payload, config = _payload_pair(rng, "downlink")
        blob = bytearray(pack(payload, config))
        blob[1:5] = (config.total_cols + 1).to_bytes(4, "little")  # kept > total
        with pytest.raises(WireFormatError):
            unpack(bytes(blob), config)


class TestCommReport:
    def test_report_carries_sizes_and_position(self):
        rng = make_rng(149)
        payload, config = _payload_pair(rng, "downlink")
        blob = pack(payload, config)
        report = build_report(payload, blob, config, iteration=3, device=1)
        assert report.packed_bits == len(blob) * 8
        assert report.nominal_bits == pytest.approx(nominal_bits(payload, config))
        assert report.direction == "downlink"
        assert (report.iteration, report.device) == (3, 1)


class TestLinkBudgets:
    def test_frozen_dropout_overhead(self):
        # 256x1152 features at reduction 16: uplink ships 32*256*1152/16
        # value bits plus a 1152-bit mask; the downlink has no mask.
        assert dropout_comm_overhead(256, 1152, 16, "uplink") == 590976.0
        assert dropout_comm_overhead(256, 1152, 16, "downlink") == 589824.0

    def test_frozen_available_budget(self):
        assert available_budget(256, 1152, 0.4, "uplink") == pytest.approx(116812.8)
        assert available_budget(256, 1152, 0.4, "downlink") == pytest.approx(117964.8)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            dropout_comm_overhead(4, 4, 0.5, "uplink")
        with pytest.raises(ValueError):
            available_budget(4, 4, 0.5, "sideways")
