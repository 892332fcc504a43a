"""Reference compressors: uniform dropout, top-score drop, sparse top entries."""

import math

import numpy as np
import pytest

from splitfc.baselines import (
    deterministic_drop,
    log2_binomial,
    max_entries_within_budget,
    rand_dropout_plan,
    topS_sparsify,
)
from splitfc.core import make_rng


class TestRandDropoutPlan:
    def test_uniform_probability_matches_reduction_ratio(self):
        plan = rand_dropout_plan(64, 16.0)
        np.testing.assert_allclose(plan.probs, np.full(64, 1.0 - 1.0 / 16.0))
        assert float(np.sum(plan.keep_probs)) == pytest.approx(4.0)

    def test_ratio_one_keeps_everything(self):
        plan = rand_dropout_plan(8, 1.0)
        np.testing.assert_array_equal(plan.probs, np.zeros(8))

    def test_rejects_sub_unit_ratio(self):
        with pytest.raises(ValueError):
            rand_dropout_plan(8, 0.5)


class TestDeterministicDrop:
    def test_keeps_highest_scores_ties_to_lower_index(self):
        mask = deterministic_drop(np.array([1.0, 3.0, 3.0, 0.0]), 2)
        np.testing.assert_array_equal(mask.kept, [1, 2])
        np.testing.assert_array_equal(mask.bits, [0, 1, 1, 0])

    def test_extremes(self):
        stds = np.array([0.5, 0.1, 0.9])
        assert deterministic_drop(stds, 0).num_kept == 0
        np.testing.assert_array_equal(deterministic_drop(stds, 3).kept, [0, 1, 2])

    def test_rejects_bad_count(self):
        with pytest.raises(ValueError):
            deterministic_drop(np.ones(3), 4)


class TestLog2Binomial:
    def test_frozen_example(self):
        # C(8,3) = 56.
        assert log2_binomial(8, 3) == pytest.approx(math.log2(56.0), rel=1e-12)

    def test_edges_are_zero(self):
        assert log2_binomial(10, 0) == pytest.approx(0.0, abs=1e-12)
        assert log2_binomial(10, 10) == pytest.approx(0.0, abs=1e-12)

    def test_symmetry(self):
        rng = make_rng(151)
        for _ in range(50):
            n = int(rng.integers(1, 4000))
            k = int(rng.integers(0, n + 1))
            assert log2_binomial(n, k) == pytest.approx(log2_binomial(n, n - k), rel=1e-10, abs=1e-9)

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            log2_binomial(4, 5)


class TestMaxEntriesWithinBudget:
    @staticmethod
    def _cost(pool, s):
        return 32.0 * s + log2_binomial(pool, s)

    def test_straddles_the_budget(self):
        rng = make_rng(157)
        for _ in range(100):
            pool = int(rng.integers(1, 5000))
            budget = float(rng.uniform(0.0, 40.0 * pool))
            s = max_entries_within_budget(pool, budget)
            assert self._cost(pool, s) <= budget + 1e-9
            if s < pool:
                assert self._cost(pool, s + 1) > budget - 1e-9

    def test_zero_budget_keeps_nothing(self):
        assert max_entries_within_budget(100, 0.0) == 0

    def test_lavish_budget_keeps_the_pool(self):
        assert max_entries_within_budget(10, 1e9) == 10


class TestTopSSparsify:
    def test_keeps_largest_magnitudes(self):
        m = np.array([[1.0, -9.0, 2.0], [0.5, 3.0, -8.0]])
        budget = self._budget_for(6, 2)
        sparse = topS_sparsify(m, budget)
        np.testing.assert_array_equal(sparse.indices, [1, 5])  # -9 and -8
        np.testing.assert_allclose(sparse.values, [-9.0, -8.0])

    def test_magnitude_tie_resolves_to_lower_flat_index(self):
        m = np.array([[2.0, -2.0, 2.0]])
        sparse = topS_sparsify(m, self._budget_for(3, 1))
        np.testing.assert_array_equal(sparse.indices, [0])

    def test_dense_zero_fills(self):
        m = np.array([[1.0, -9.0], [0.5, 3.0]])
        sparse = topS_sparsify(m, self._budget_for(4, 2))
        dense = sparse.dense()
        assert dense.shape == m.shape
        assert dense[0, 1] == pytest.approx(-9.0)
        assert dense[0, 0] == 0.0

    def test_support_restricts_candidates_and_pool(self):
        rng = make_rng(163)
        m = rng.normal(size=(4, 8))
        support = np.array([1, 5, 9, 20, 31])
        sparse = topS_sparsify(m, self._budget_for(5, 3), support=support)
        assert sparse.pool_size == 5
        assert np.isin(sparse.indices, support).all()

    def test_nominal_bits_accounting(self):
        m = np.arange(12.0).reshape(3, 4)
        sparse = topS_sparsify(m, self._budget_for(12, 4))
        assert sparse.nominal_bits == pytest.approx(32.0 * 4 + log2_binomial(12, 4))

    def test_values_travel_as_float32(self):
        m = np.array([[math.pi, -math.e]])
        sparse = topS_sparsify(m, self._budget_for(2, 2))
        assert sparse.values.dtype == np.float32

    @staticmethod
    def _budget_for(pool, s):
        """Smallest budget that admits exactly ``s`` entries from ``pool``."""
        return 32.0 * s + log2_binomial(pool, s) + 1e-6
