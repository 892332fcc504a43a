"""Importance-weighted dropout: calibration, masking, and unbiased scaling."""

import numpy as np
import pytest

from splitfc.core import make_rng
from splitfc.dropout import (
    DropoutMask,
    DropoutPlan,
    apply_dropout,
    backprop_scale,
    compute_probabilities,
    drop_gradients,
    keep_all_plan,
    sample_mask,
)


class TestComputeProbabilities:
    def test_proportional_branch_frozen_example(self):
        # Scores (.4,.4,.1,.1) targeting 2 of 4 survivors: keep weights are
        # score * target / score_sum = (.8,.8,.2,.2), so drop probabilities
        # are (.2,.2,.8,.8).
        plan = compute_probabilities(np.array([0.4, 0.4, 0.1, 0.1]), 2.0)
        np.testing.assert_allclose(plan.probs, [0.2, 0.2, 0.8, 0.8], atol=1e-15)
        assert plan.bias == 0.0

    def test_flattening_branch_frozen_example(self):
        # A dominant score (0.9 of 1.0 total) would get keep weight 1.8 > 1.
        # Flattening bias (0.9*2 - 1.0)/(4 - 2) = 0.4 pins that weight to
        # exactly 1 (drop probability 0) and keeps the survivor total at 2.
        plan = compute_probabilities(np.array([0.9, 0.05, 0.03, 0.02]), 2.0)
        assert plan.bias == pytest.approx(0.4, abs=1e-15)
        assert plan.probs[0] == pytest.approx(0.0, abs=1e-12)
        expected = 1.0 - (np.array([0.9, 0.05, 0.03, 0.02]) + 0.4) * 2.0 / 2.6
        np.testing.assert_allclose(plan.probs, expected, atol=1e-12)

    def test_override_raises_but_never_lowers_the_bias(self):
        stds = np.array([0.9, 0.05, 0.03, 0.02])
        raised = compute_probabilities(stds, 2.0, bias_override=1.0)
        assert raised.bias == 1.0
        lowered = compute_probabilities(stds, 2.0, bias_override=0.1)
        assert lowered.bias == pytest.approx(0.4, abs=1e-15)

    def test_zero_scores_fall_back_to_uniform(self):
        plan = compute_probabilities(np.zeros(8), 2.0)
        np.testing.assert_allclose(plan.probs, np.full(8, 0.75))

    def test_calibration_identity_over_random_scores(self):
        # sum(keep probability) must equal the target width on both branches.
        rng = make_rng(3)
        for _ in range(200):
            n = int(rng.integers(2, 40))
            stds = rng.uniform(0.0, 5.0, size=n)
            if rng.random() < 0.5:
                stds[int(rng.integers(n))] *= 50.0  # force the flattening branch
            target = float(rng.uniform(0.5, n - 0.5))
            plan = compute_probabilities(stds, target)
            assert abs(float(np.sum(plan.keep_probs)) - target) <= 1e-9
            # Exact bounds: the flattening branch clips its float overshoot.
            assert ((plan.probs >= 0.0) & (plan.probs <= 1.0)).all()

    def test_rejects_bad_targets_and_scores(self):
        with pytest.raises(ValueError):
            compute_probabilities(np.ones(4), 0.0)
        with pytest.raises(ValueError):
            compute_probabilities(np.ones(4), 4.0)
        with pytest.raises(ValueError):
            compute_probabilities(np.array([1.0, -0.5]), 1.0)

    def test_plan_guards_its_own_calibration(self):
        with pytest.raises(ValueError):
            DropoutPlan(
                stds=np.zeros(2),
                weights=np.ones(2),
                probs=np.array([0.5, 0.5]),
                bias=0.0,
                target_cols=2.0,  # actual survivor total is 1.0
                total_cols=2,
            )


class TestKeepAllPlan:
    def test_everything_survives(self):
        plan = keep_all_plan(6)
        np.testing.assert_array_equal(plan.probs, np.zeros(6))
        mask = sample_mask(plan, make_rng(0))
        assert mask.num_kept == 6


class TestSampleMask:
    def test_mask_matches_bits(self):
        plan = compute_probabilities(np.array([3.0, 2.0, 1.0, 1.0]), 2.0)
        mask = sample_mask(plan, make_rng(7))
        np.testing.assert_array_equal(np.flatnonzero(mask.bits), mask.kept)

    def test_empirical_rate_tracks_keep_probs(self):
        plan = compute_probabilities(np.array([4.0, 2.0, 1.0, 1.0]), 2.0)
        rng = make_rng(11)
        trials = 20000
        hits = np.zeros(4)
        for _ in range(trials):
            hits += sample_mask(plan, rng).bits
        rate = hits / trials
        se = np.sqrt(plan.keep_probs * plan.probs / trials)
        assert (np.abs(rate - plan.keep_probs) <= 4.0 * se + 1e-12).all()


class TestApplyDropout:
    def test_survivor_scaling_frozen_example(self):
        # Column values (1, 2) surviving at keep probability 0.5 are shipped
        # as (2, 4).
        plan = DropoutPlan(
            stds=np.array([1.0]),
            weights=np.array([0.5]),
            probs=np.array([0.5]),
            bias=0.0,
            target_cols=0.5,
            total_cols=1,
        )
        mask = DropoutMask(bits=np.array([1], dtype=np.uint8), kept=np.array([0]))
        out = apply_dropout(np.array([[1.0], [2.0]]), mask, plan)
        np.testing.assert_allclose(out.data, [[2.0], [4.0]])

    def test_reconstruction_is_unbiased(self):
        # Zero-filled reconstruction averaged over masks converges on the
        # original matrix, column by column.
        rng = make_rng(5)
        m = rng.normal(size=(4, 6))
        plan = compute_probabilities(rng.uniform(0.5, 2.0, size=6), 3.0)
        total = np.zeros_like(m)
        trials = 4000
        for _ in range(trials):
            mask = sample_mask(plan, rng)
            rebuilt = np.zeros_like(m)
            rebuilt[:, mask.kept] = apply_dropout(m, mask, plan).data
            total += rebuilt
        mean = total / trials
        # Per-cell deviation of the estimator: |x| * sqrt(p/(1-p) / trials).
        se = np.abs(m) * np.sqrt(plan.probs / plan.keep_probs / trials)
        assert (np.abs(mean - m) <= 4.0 * se + 1e-9).all()


class TestGradientPath:
    def test_drop_gradients_keeps_columns_unscaled(self):
        g = np.arange(8.0).reshape(2, 4)
        mask = DropoutMask(bits=np.array([1, 0, 1, 0], dtype=np.uint8), kept=np.array([0, 2]))
        out = drop_gradients(g, mask)
        np.testing.assert_array_equal(out.data, g[:, [0, 2]])

    def test_backprop_scale_frozen_example(self):
        # Received gradient 1 on a column kept with probability 0.25 → 4.
        plan = DropoutPlan(
            stds=np.array([1.0]),
            weights=np.array([0.25]),
            probs=np.array([0.75]),
            bias=0.0,
            target_cols=0.25,
            total_cols=1,
        )
        mask = DropoutMask(bits=np.array([1], dtype=np.uint8), kept=np.array([0]))
        out = backprop_scale(np.array([[1.0]]), mask, plan)
        np.testing.assert_allclose(out, [[4.0]])

    def test_round_trip_scales_match_forward(self):
        # forward scaling then backprop scaling applies 1/(1-p) twice, which
        # is exactly the chain rule through the forward multiplier.
        rng = make_rng(9)
        plan = compute_probabilities(rng.uniform(0.5, 2.0, size=5), 2.5)
        mask = sample_mask(plan, rng)
        g = rng.normal(size=(3, mask.num_kept))
        out = backprop_scale(g, mask, plan)
        assert out.shape == (3, 5)
        np.testing.assert_allclose(
            out[:, mask.kept], g / plan.keep_probs[mask.kept]
        )
        dropped = np.setdiff1d(np.arange(5), mask.kept)
        np.testing.assert_array_equal(out[:, dropped], 0.0)
