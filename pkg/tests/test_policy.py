"""Agent network: forward contracts, manual backprop, sampling, sigma schedule."""

import numpy as np
import pytest

from prunerl.core import WeightTensor
from prunerl.oracle import random_policy_params
from prunerl.policy import (
    PROB_EPS,
    PolicyParams,
    SigmaSchedule,
    load_checkpoint,
    policy_backward,
    policy_forward,
    sample_actions,
    save_checkpoint,
    update_sigma,
)


def random_state(rng, n, length):
    return WeightTensor(rng.normal(size=(n, length, 1, 1)))


def fd_gradient(params, states, layer_indices, g, h, step=1e-5, coords=None):
    theta = params.to_vector()
    coords = range(len(theta)) if coords is None else coords

    def objective(vec):
        out = policy_forward(PolicyParams.from_vector(vec), states, layer_indices)
        return float(np.dot(g, out.keep_probs) + h * out.epoch_mu)

    grad = np.zeros(len(theta))
    for i in coords:
        delta = np.zeros(len(theta))
        delta[i] = step
        grad[i] = (objective(theta + delta) - objective(theta - delta)) / (2 * step)
    return grad


def max_relative_error(grad, fd, coords=None):
    """Coordinate-wise |grad-fd| relative to the gradient's own scale.

    The floor keeps finite-difference round-off (~1e-10 at step 1e-5) from
    dominating coordinates whose true gradient is essentially zero.
    """
    if coords is not None:
        grad = grad[coords]
        fd = fd[coords]
    scale_floor = 1e-4 * max(float(np.abs(fd).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), scale_floor)
    return float((np.abs(grad - fd) / denom).max())


class TestForward:
    def test_zero_initialized_heads_give_half(self):
        rng = np.random.default_rng(0)
        params = PolicyParams.initialize(3)
        out = policy_forward(params, random_state(rng, 5, 18))
        assert np.allclose(out.keep_probs, 0.5)
        assert out.epoch_mu == 0.5

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(1)
        params = random_policy_params(rng)
        wt = random_state(rng, 6, 27)
        a = policy_forward(params, wt)
        b = policy_forward(params, wt)
        assert np.array_equal(a.keep_probs, b.keep_probs)
        assert a.epoch_mu == b.epoch_mu

    @pytest.mark.parametrize("n", [1, 16, 64])
    def test_output_length_tracks_filter_count(self, n):
        rng = np.random.default_rng(2)
        params = random_policy_params(rng)
        out = policy_forward(params, random_state(rng, n, 9))
        assert out.keep_probs.shape == (n,)

    def test_handles_minimal_filter_length(self):
        rng = np.random.default_rng(3)
        params = random_policy_params(rng)
        out = policy_forward(params, WeightTensor(rng.normal(size=(3, 1, 1, 1))))
        assert out.keep_probs.shape == (3,)

    def test_probability_clamp_under_extreme_params(self):
        rng = np.random.default_rng(4)
        vec = PolicyParams.initialize(rng).to_vector() + rng.normal(0, 30.0, 6194)
        params = PolicyParams.from_vector(vec)
        for seed in range(5):
            state_rng = np.random.default_rng(seed)
            out = policy_forward(params, random_state(state_rng, 12, 36))
            assert out.keep_probs.min() >= PROB_EPS
            assert out.keep_probs.max() <= 1.0 - PROB_EPS
            assert 0.0 < out.epoch_mu < 1.0

    def test_permuting_filters_permutes_probs_and_keeps_mu(self):
        rng = np.random.default_rng(5)
        params = random_policy_params(rng)
        values = rng.normal(size=(8, 4, 3, 3))
        perm = rng.permutation(8)
        out = policy_forward(params, WeightTensor(values))
        out_perm = policy_forward(params, WeightTensor(values[perm]))
        assert np.allclose(out_perm.keep_probs, out.keep_probs[perm], atol=1e-12)
        assert out_perm.epoch_mu == pytest.approx(out.epoch_mu, abs=1e-12)

    def test_block_input_concatenates_probs(self):
        rng = np.random.default_rng(6)
        params = random_policy_params(rng)
        w1 = random_state(rng, 4, 9)
        w2 = random_state(rng, 6, 18)
        out = policy_forward(params, [w1, w2], layer_indices=(3, 4))
        assert out.keep_probs.shape == (10,)
        assert out.filter_counts == (4, 6)
        assert out.layer_indices == (3, 4)
        assert out.probs_for_layer(1).shape == (6,)

    def test_rejects_non_finite_state(self):
        with pytest.raises(ValueError):
            WeightTensor(np.full((2, 2, 1, 1), np.inf))


class TestBackward:
    def test_zero_coefficients_zero_gradient(self):
        rng = np.random.default_rng(7)
        params = random_policy_params(rng)
        out = policy_forward(params, random_state(rng, 4, 9))
        grad = policy_backward(params, out, np.zeros(4), 0.0)
        assert np.all(grad == 0.0)

    def test_linear_in_coefficients(self):
        rng = np.random.default_rng(8)
        params = random_policy_params(rng)
        out = policy_forward(params, random_state(rng, 4, 9))
        g = rng.normal(size=4)
        h = float(rng.normal())
        once = policy_backward(params, out, g, h)
        twice = policy_backward(params, out, 2 * g, 2 * h)
        assert np.allclose(twice, 2 * once, atol=1e-12)

    @pytest.mark.parametrize("n,length", [(4, 9), (1, 9)])
    def test_matches_finite_differences_fully(self, n, length):
        rng = np.random.default_rng(n * 100 + length)
        params = random_policy_params(rng)
        wt = random_state(rng, n, length)
        out = policy_forward(params, wt, layer_indices=(0,))
        g = rng.normal(size=n)
        h = float(rng.normal())
        grad = policy_backward(params, out, g, h)
        fd = fd_gradient(params, wt, (0,), g, h)
        assert max_relative_error(grad, fd) < 1e-4

    def test_matches_finite_differences_for_block_input(self):
        rng = np.random.default_rng(10)
        params = random_policy_params(rng)
        states = [random_state(rng, 3, 9), random_state(rng, 2, 16)]
        out = policy_forward(params, states, layer_indices=(0, 1))
        g = rng.normal(size=5)
        h = float(rng.normal())
        grad = policy_backward(params, out, g, h)
        fd = fd_gradient(params, states, (0, 1), g, h)
        assert max_relative_error(grad, fd) < 1e-4

    def test_stale_cache_rejected(self):
        rng = np.random.default_rng(11)
        params = random_policy_params(rng)
        other = random_policy_params(rng)
        out = policy_forward(params, random_state(rng, 4, 9))
        with pytest.raises(ValueError, match="stale"):
            policy_backward(other, out, np.zeros(4), 0.0)

    def test_rejects_wrong_coefficient_count(self):
        rng = np.random.default_rng(12)
        params = random_policy_params(rng)
        out = policy_forward(params, random_state(rng, 4, 9))
        with pytest.raises(ValueError):
            policy_backward(params, out, np.zeros(3), 0.0)


class TestSampling:
    @staticmethod
    def probs_pinned_high():
        """Params whose prune head saturates: every keep prob sits at the clamp."""
        params = PolicyParams.initialize(0)
        vec = params.to_vector()
        # flat layout: conv stages, prune_w1, prune_b1, prune_w2, then prune_b2
        prune_b2_offset = sum(
            int(np.prod(s))
            for s in [(8, 1, 3), (8,), (16, 8, 3), (16,), (32, 16, 3), (32,),
                      (32, 32, 3), (32,), (16, 32), (16,), (1, 16)]
        )
        vec[prune_b2_offset] = 50.0
        return PolicyParams.from_vector(vec)

    def test_saturated_probs_sample_all_keep(self):
        params = self.probs_pinned_high()
        rng = np.random.default_rng(13)
        out = policy_forward(params, random_state(rng, 16, 9))
        assert np.all(out.keep_probs == 1.0 - PROB_EPS)
        actions = sample_actions(out, 0.1, 10_000, rng=99)
        all_keep = sum(1 for a in actions if a.masks[0].pruned_count == 0)
        # each draw keeps all 16 with prob (1 - 1e-4)^16 ~ 0.9984
        assert all_keep / 10_000 >= 0.99

    def test_epoch_action_mean_matches_mu(self):
        params = PolicyParams.initialize(1)
        rng = np.random.default_rng(14)
        out = policy_forward(params, random_state(rng, 4, 9))  # mu = 0.5 exactly
        sigma = 0.05
        actions = sample_actions(out, sigma, 10_000, rng=7)
        mean = np.mean([a.epoch_action_raw for a in actions])
        assert abs(mean - 0.5) < 3 * sigma / 100.0

    def test_reproducible_given_seed(self):
        rng = np.random.default_rng(15)
        params = random_policy_params(rng)
        out = policy_forward(params, random_state(rng, 8, 9), layer_indices=(2,))
        a = sample_actions(out, 0.3, 5, rng=1234)
        b = sample_actions(out, 0.3, 5, rng=1234)
        assert a == b
        assert all(x.masks[0].layer_index == 2 for x in a)

    def test_block_sampling_splits_masks(self):
        rng = np.random.default_rng(16)
        params = random_policy_params(rng)
        out = policy_forward(
            params, [random_state(rng, 4, 9), random_state(rng, 6, 9)], layer_indices=(5, 6)
        )
        actions = sample_actions(out, 0.3, 3, rng=0)
        for a in actions:
            assert [m.layer_index for m in a.masks] == [5, 6]
            assert [m.num_filters for m in a.masks] == [4, 6]


class TestSigmaSchedule:
    def test_decays_to_floor_on_zero_rewards(self):
        sched = SigmaSchedule(sigma=0.3)
        for _ in range(200):
            sched = update_sigma(sched, [0.0, 0.0])
        assert sched.sigma == sched.sigma_min

    def test_converges_to_coefficient_times_reward(self):
        sched = SigmaSchedule(sigma=0.3, coefficient=0.5)
        for _ in range(500):
            sched = update_sigma(sched, [1.0, -1.0, 1.0])
        assert sched.sigma == pytest.approx(0.5, abs=1e-6)

    def test_never_below_floor(self):
        sched = SigmaSchedule(sigma=0.3, sigma_min=0.05)
        rng = np.random.default_rng(17)
        for _ in range(300):
            sched = update_sigma(sched, list(rng.normal(0, 0.01, size=3)))
            assert sched.sigma >= 0.05
            assert sched.sigma == max(sched.sigma_min, sched.coefficient * sched.ema)

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError):
            update_sigma(SigmaSchedule(), [])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(18)
        params = random_policy_params(rng)
        path = tmp_path / "policy.json"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.to_vector(), params.to_vector())

    def test_rejects_wrong_version(self, tmp_path):
        import json

        params = PolicyParams.initialize(0)
        path = tmp_path / "policy.json"
        save_checkpoint(params, path)
        payload = json.loads(path.read_text())
        payload["format_version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_rejects_wrong_architecture(self, tmp_path):
        import json

        params = PolicyParams.initialize(0)
        path = tmp_path / "policy.json"
        save_checkpoint(params, path)
        payload = json.loads(path.read_text())
        payload["architecture"]["embed_dim"] = 64
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError):
            load_checkpoint(path)


def test_parameter_count_is_architecture_constant():
    # independent of filter count and filter length by construction
    assert PolicyParams.parameter_count() == 6194
