"""Reward math: closed-form examples frozen by hand, plus shape properties."""

import json
import math

import numpy as np
import pytest

from prunerl.rewards import (
    RewardConfig,
    RewardRecord,
    acc_term,
    eff_term,
    epochs_from_action,
    normalize_rewards,
    prune_reward,
    retrain_reward,
)


class TestAccTerm:
    def test_no_drop_is_one(self):
        assert acc_term(2.0, 92.0, 92.5) == pytest.approx(1.0, abs=1e-9)

    def test_half_bound_drop(self):
        assert acc_term(2.0, 92.0, 91.0) == pytest.approx(0.5, abs=1e-9)

    def test_drop_beyond_bound_is_negative(self):
        assert acc_term(2.0, 92.0, 89.0) == pytest.approx(-0.5, abs=1e-9)

    def test_affine_below_constant_above(self):
        # constant at 1.0 for any accuracy gain
        for gain in (0.0, 0.3, 5.0):
            assert acc_term(2.0, 92.0, 92.0 + gain) == pytest.approx(1.0, abs=1e-12)
        # affine in acc_pruned below the base: equal increments, equal steps
        values = [acc_term(2.0, 92.0, 92.0 - d) for d in (0.5, 1.0, 1.5, 2.0, 2.5)]
        diffs = np.diff(values)
        assert np.allclose(diffs, diffs[0], atol=1e-12)

    def test_sign_flips_exactly_at_bound(self):
        assert acc_term(2.0, 92.0, 90.0) == pytest.approx(0.0, abs=1e-12)
        assert acc_term(2.0, 92.0, 90.0 - 1e-9) < 0.0
        assert acc_term(2.0, 92.0, 90.0 + 1e-9) > 0.0

    def test_rejects_bad_bound(self):
        with pytest.raises(ValueError):
            acc_term(0.0, 92.0, 91.0)


class TestEffTerm:
    def test_nothing_pruned_is_zero(self):
        assert eff_term(16, 0) == pytest.approx(0.0, abs=1e-9)

    def test_three_quarters_pruned(self):
        assert eff_term(16, 12) == pytest.approx(math.log(4.0), abs=1e-4)

    def test_all_pruned_is_minus_one(self):
        assert eff_term(16, 16) == -1.0

    def test_strictly_increasing_then_jump(self):
        for n in range(0, 14):
            assert eff_term(16, n) < eff_term(16, n + 1)
        assert eff_term(16, 15) > 0 > eff_term(16, 16)

    def test_base_two_option(self):
        assert eff_term(16, 12, log_base=2.0) == pytest.approx(2.0, abs=1e-9)

    def test_rejects_overshoot(self):
        with pytest.raises(ValueError):
            eff_term(4, 5)


class TestPruneReward:
    def test_nothing_pruned_yields_zero(self):
        assert prune_reward(1.0, 0.0) == 0.0

    def test_product_examples(self):
        assert prune_reward(0.5, math.log(4.0)) == pytest.approx(0.6931, abs=1e-4)
        assert prune_reward(-0.5, math.log(4.0)) == pytest.approx(-0.6931, abs=1e-4)


class TestRetrainReward:
    def test_no_accuracy_loss_is_zero(self):
        assert retrain_reward(0.5, 92.0, 92.0) == 0.0

    def test_scaled_drop(self):
        assert retrain_reward(0.5, 92.0, 90.0) == pytest.approx(-1.0, abs=1e-9)

    def test_negative_action_uses_magnitude(self):
        assert retrain_reward(-0.3, 92.0, 91.0) == pytest.approx(-0.3, abs=1e-9)

    def test_depends_on_action_only_through_magnitude(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = float(rng.normal())
            drop = float(rng.uniform(-3, 3))
            assert retrain_reward(a, 92.0, 92.0 - drop) == pytest.approx(
                retrain_reward(-a, 92.0, 92.0 - drop), abs=1e-12
            )


class TestEpochsFromAction:
    def test_interior(self):
        assert epochs_from_action(0.5, 8.0) == pytest.approx(4.0, abs=1e-9)

    def test_upper_clamp(self):
        assert epochs_from_action(1.7, 8.0) == 8.0

    def test_lower_clamp(self):
        assert epochs_from_action(-0.2, 8.0) == 0.0

    def test_clamp_is_idempotent(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = float(rng.normal(0.5, 1.5))
            once = epochs_from_action(a, 8.0)
            assert epochs_from_action(once / 8.0, 8.0) == pytest.approx(once, abs=1e-12)


class TestNormalizeRewards:
    @staticmethod
    def records(prune_values, retrain_values=None):
        retrain_values = retrain_values or [0.0] * len(prune_values)
        return [
            RewardRecord(sample_index=i, r_prune_raw=p, r_retrain_raw=r, acc_pruned=90.0)
            for i, (p, r) in enumerate(zip(prune_values, retrain_values))
        ]

    def test_population_zscore_example(self):
        out = normalize_rewards(self.records([1.0, 2.0, 3.0]))
        assert out[0].r_prune_norm == pytest.approx(-1.2247, abs=1e-4)
        assert out[1].r_prune_norm == pytest.approx(0.0, abs=1e-4)
        assert out[2].r_prune_norm == pytest.approx(1.2247, abs=1e-4)

    def test_zero_variance_guard(self):
        out = normalize_rewards(self.records([2.5, 2.5, 2.5]))
        assert all(r.r_prune_norm == 0.0 for r in out)

    def test_single_sample_guard(self):
        out = normalize_rewards(self.records([17.0]))
        assert out[0].r_prune_norm == 0.0
        assert out[0].r_retrain_norm == 0.0

    def test_streams_normalized_independently(self):
        rng = np.random.default_rng(11)
        prune = list(rng.normal(5.0, 2.0, size=8))
        retrain = list(rng.normal(-1.0, 0.3, size=8))
        out = normalize_rewards(self.records(prune, retrain))
        for values in ([r.r_prune_norm for r in out], [r.r_retrain_norm for r in out]):
            arr = np.asarray(values)
            assert abs(arr.mean()) < 1e-9
            assert abs(arr.std() - 1.0) < 1e-6

    def test_raw_fields_kept_and_flag(self):
        raw = self.records([1.0, 4.0])
        assert not raw[0].normalized
        out = normalize_rewards(raw)
        assert out[0].normalized
        assert out[0].r_prune_raw == 1.0

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            normalize_rewards([])


class TestRewardConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            RewardConfig(bound=0.0, beta=8.0)
        with pytest.raises(ValueError):
            RewardConfig(bound=2.0, beta=0.0)
        with pytest.raises(ValueError):
            RewardConfig(bound=2.0, beta=8.0, log_base=1.0)


def test_record_serializes_to_json_line():
    rec = RewardRecord(0, 0.5, -0.2, 91.0, r_prune_norm=1.0, r_retrain_norm=-1.0)
    payload = json.loads(rec.to_json())
    assert payload["sample"] == 0
    assert payload["r_prune_raw"] == 0.5
    assert payload["r_retrain_norm"] == -1.0
