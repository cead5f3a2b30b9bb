"""Brute-force verification of the score-function gradient estimator.

The check freezes a small random policy on a synthetic layer and compares two
routes to the same quantity:

* estimator route: the empirical mean of many single-sample score-function
  estimates, fed with raw (un-normalized) rewards so its expectation is the
  exact update direction the estimator aims at;
* expectation route: the estimator's expectation written in closed form.  The
  prune reward's expectation is enumerated over all 2^N prune outcomes with
  the Normal epoch action integrated by 20-node Gauss-Hermite quadrature and
  differentiated analytically in the keep probabilities; the retrain reward's
  expectation is differentiated in the epoch mean by central differences of
  the quadrature.  Both are chained through the network with Jacobians
  obtained by central finite differences over the forward pass only.

The update direction being estimated drives the prune reward through the keep
probabilities and the retrain reward through the epoch mean; cross-couplings
(the prune reward also varies with the epoch action, and vice versa) are
deliberately not part of it, so the oracle target excludes them as well.

The scenario keeps the epoch-action kinks (clamping at 0 and 1) several sigma
away from the mean and below the recovery saturation, so the quadrature error
is far below the Monte-Carlo standard error being tested against.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .core import ActionSet, PruneMask
from .environment import SyntheticEnvConfig, SyntheticEnvironment
from .policy import PolicyParams, policy_forward
from .reinforce import EpisodeBatch, estimate_gradient
from .rewards import (
    RewardRecord,
    acc_term,
    eff_term,
    epochs_from_action,
    prune_reward,
    retrain_reward,
)

__all__ = ["GradientCheckResult", "random_policy_params", "run_gradient_check"]

_GH_NODES = 20
_IMPORTANCES = (0.0, 1.6, 0.8, 2.4)
_ACC_BASE = 92.0
_BOUND = 2.0
_BETA = 4.0
_E_SAT = 8.0  # above beta: recovery never saturates inside [0, 1]
_DAMAGE = 0.5
_FD_STEP = 1e-5
_MU_FD_STEP = 1e-6


@dataclass(frozen=True)
class GradientCheckResult:
    num_filters: int
    num_samples: int
    num_params: int
    max_abs_z: float
    worst_param: int
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_abs_z <= self.threshold


def random_policy_params(rng: np.random.Generator, scale: float = 0.15) -> PolicyParams:
    """Fan-in initialized parameters with noise added everywhere.

    ``PolicyParams.initialize`` zeroes both head output layers, which blocks
    gradient flow into the trunk; verification wants every path live.
    """
    base = PolicyParams.initialize(rng).to_vector()
    return PolicyParams.from_vector(base + rng.normal(0.0, scale, size=base.shape))


def _scenario(num_filters: int, seed: int):
    if num_filters < 1 or num_filters > 8:
        raise ValueError("gradient check supports 1..8 filters")
    cfg = SyntheticEnvConfig(
        layers=((num_filters, 9, 1),),
        importance=(tuple(_IMPORTANCES[i % len(_IMPORTANCES)] for i in range(num_filters)),),
        acc_base=_ACC_BASE,
        damage_scale=_DAMAGE,
        recovery_saturation=_E_SAT,
        seed=seed,
    )
    env = SyntheticEnvironment(cfg)
    params = random_policy_params(np.random.default_rng(seed + 1))
    state = env.state_of(0)
    return env, params, state


def _episode_rewards(
    env: SyntheticEnvironment, bits: tuple[int, ...], a_raw: float
) -> tuple[float, float, float]:
    mask = PruneMask(0, bits)
    epochs = epochs_from_action(a_raw, _BETA)
    acc = env.evaluate([mask], epochs)
    at = acc_term(_BOUND, _ACC_BASE, acc)
    et = eff_term(len(bits), mask.pruned_count)
    return prune_reward(at, et), retrain_reward(a_raw, _ACC_BASE, acc), acc


def _mask_reward_means(
    env: SyntheticEnvironment, num_filters: int, sigma: float
) -> tuple[np.ndarray, Callable[[float], np.ndarray], Callable[[float], np.ndarray]]:
    """Per-mask quadrature means of both rewards as functions of the epoch mean.

    Returns the (2^N, N) mask bit table plus two callables mapping mu to the
    (2^N,) vectors E_a[R_prune | mask] and E_a[R_retrain | mask].
    """
    bits_arr = np.array(list(itertools.product((0, 1), repeat=num_filters)), dtype=float)
    importance = np.asarray(env.config.importance[0])
    pruned_importance = (1.0 - bits_arr) @ importance
    eff = np.array([eff_term(num_filters, int(n)) for n in (1 - bits_arr).sum(axis=1)])
    nodes, weights = hermgauss(_GH_NODES)
    alpha = env.config.damage_scale
    alpha_res = env.config.effective_residual_scale

    def accuracy(mu: float) -> tuple[np.ndarray, np.ndarray]:
        a = mu + np.sqrt(2.0) * sigma * nodes
        epochs = np.clip(a, 0.0, 1.0) * _BETA
        deficit = np.maximum(0.0, 1.0 - epochs / _E_SAT)
        drop = pruned_importance[:, None] * (alpha * deficit[None, :] + alpha_res)
        return a, _ACC_BASE - drop  # (Q,), (2^N, Q)

    def prune_mean(mu: float) -> np.ndarray:
        _, acc = accuracy(mu)
        at = (_BOUND - np.maximum(0.0, _ACC_BASE - acc)) / _BOUND
        return ((at * eff[:, None]) * weights[None, :]).sum(axis=1) / np.sqrt(np.pi)

    def retrain_mean(mu: float) -> np.ndarray:
        a, acc = accuracy(mu)
        r = np.abs(a)[None, :] * (acc - _ACC_BASE)
        return (r * weights[None, :]).sum(axis=1) / np.sqrt(np.pi)

    return bits_arr, prune_mean, retrain_mean


def run_gradient_check(
    num_filters: int,
    num_samples: int,
    seed: int = 0,
    sigma: float = 0.12,
    threshold: float = 3.0,
) -> GradientCheckResult:
    """Compare the estimator's empirical mean against the brute-force gradient.

    Returns the largest per-parameter deviation in units of the Monte-Carlo
    standard error of that parameter's estimate.
    """
    if num_samples < 100:
        raise ValueError("need at least 100 samples for a meaningful check")
    env, params, state = _scenario(num_filters, seed)
    output = policy_forward(params, state, layer_indices=(0,))
    rng = np.random.default_rng(seed + 2)

    n_params = PolicyParams.parameter_count()
    total = np.zeros(n_params)
    total_sq = np.zeros(n_params)
    p0 = output.keep_probs.copy()
    mu0 = output.epoch_mu
    for _ in range(num_samples):
        bits = tuple((rng.random(num_filters) < p0).astype(int))
        a_raw = float(rng.normal(mu0, sigma))
        r_prune, r_retrain, acc = _episode_rewards(env, bits, a_raw)
        action = ActionSet(masks=(PruneMask(0, bits),), epoch_action_raw=a_raw, sample_index=0)
        record = RewardRecord(
            sample_index=0,
            r_prune_raw=r_prune,
            r_retrain_raw=r_retrain,
            acc_pruned=acc,
            r_prune_norm=r_prune,
            r_retrain_norm=r_retrain,
        )
        batch = EpisodeBatch(
            policy_output=output, sigma=sigma, actions=(action,), rewards=(record,)
        )
        grad = estimate_gradient(batch, params)
        total += grad
        total_sq += grad * grad

    mean = total / num_samples
    var = np.maximum(total_sq / num_samples - mean * mean, 0.0)
    std_err = np.sqrt(var / num_samples)

    # Closed-form partials in (p, mu) space.
    bits_arr, prune_mean, retrain_mean = _mask_reward_means(env, num_filters, sigma)
    log_prob = bits_arr @ np.log(p0) + (1.0 - bits_arr) @ np.log(1.0 - p0)
    mask_prob = np.exp(log_prob)
    score = (bits_arr - p0[None, :]) / (p0 * (1.0 - p0))[None, :]
    d_eprune_dp = score.T @ (mask_prob * prune_mean(mu0))
    d_eretrain_dmu = float(
        mask_prob @ (retrain_mean(mu0 + _MU_FD_STEP) - retrain_mean(mu0 - _MU_FD_STEP))
    ) / (2.0 * _MU_FD_STEP)

    # Network Jacobians by central differences over the forward pass only.
    theta = params.to_vector()
    jac_p = np.zeros((num_filters, n_params))
    jac_mu = np.zeros(n_params)
    for i in range(n_params):
        step = np.zeros(n_params)
        step[i] = _FD_STEP
        out_plus = policy_forward(PolicyParams.from_vector(theta + step), state)
        out_minus = policy_forward(PolicyParams.from_vector(theta - step), state)
        jac_p[:, i] = (out_plus.keep_probs - out_minus.keep_probs) / (2.0 * _FD_STEP)
        jac_mu[i] = (out_plus.epoch_mu - out_minus.epoch_mu) / (2.0 * _FD_STEP)
    target = d_eprune_dp @ jac_p + d_eretrain_dmu * jac_mu

    # Parameters on dead paths have zero-variance estimates; their finite
    # difference carries ~1e-10 numerical noise, so floor the denominator.
    floor = 1e-8 * (1.0 + float(np.abs(target).max()))
    z = np.abs(mean - target) / np.maximum(std_err, floor)
    worst = int(np.argmax(z))
    return GradientCheckResult(
        num_filters=num_filters,
        num_samples=num_samples,
        num_params=n_params,
        max_abs_z=float(z[worst]),
        worst_param=worst,
        threshold=threshold,
    )
