"""Score-function gradient estimation and gradient-ascent updates.

The estimator sums, over the M Monte-Carlo samples of an episode, the
normalized prune reward weighted by each Bernoulli unit's score and the
normalized retrain reward weighted by the Normal mean's score.  Scores always
consume the raw (untruncated) epoch action.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import ActionSet
from .policy import PROB_EPS, PolicyOutput, PolicyParams, policy_backward
from .rewards import RewardRecord

__all__ = [
    "EpisodeBatch",
    "OptimizerState",
    "bernoulli_score",
    "normal_score",
    "estimate_gradient",
    "apply_update",
]


def bernoulli_score(action_bit: int, keep_prob: float) -> float:
    """d/dp of log Bernoulli(a; p): (a - p) / (p (1 - p)).

    ``keep_prob`` must already be clamped to [1e-4, 1 - 1e-4]; the clamp keeps
    the divisor away from zero.
    """
    if not PROB_EPS <= keep_prob <= 1.0 - PROB_EPS:
        raise ValueError(f"keep probability {keep_prob} outside the clamp range")
    return (action_bit - keep_prob) / (keep_prob * (1.0 - keep_prob))


def normal_score(action_raw: float, mu: float, sigma: float) -> float:
    """d/dmu of log Normal(a; mu, sigma^2): (a - mu) / sigma^2, with the raw action."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return (action_raw - mu) / (sigma * sigma)


@dataclass(frozen=True)
class EpisodeBatch:
    """One episode's policy output, sampled actions, and normalized rewards."""

    policy_output: PolicyOutput
    sigma: float
    actions: tuple[ActionSet, ...]
    rewards: tuple[RewardRecord, ...]

    def __post_init__(self) -> None:
        actions = tuple(self.actions)
        rewards = tuple(self.rewards)
        if not actions:
            raise ValueError("episode batch needs at least one sample")
        if len(actions) != len(rewards):
            raise ValueError("actions and rewards are misaligned")
        n_total = self.policy_output.keep_probs.shape[0]
        for action, record in zip(actions, rewards):
            if action.sample_index != record.sample_index:
                raise ValueError("actions and rewards are misaligned")
            if len(action.concatenated_bits()) != n_total:
                raise ValueError("action mask length does not match the policy output")
            if not record.normalized:
                raise ValueError("rewards must be normalized before gradient estimation")
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)


def estimate_gradient(batch: EpisodeBatch, params: PolicyParams) -> np.ndarray:
    """Monte-Carlo score-function gradient of the episode objective.

    For each sample j the prune coefficients are
    ``R_prune_norm_j * (a_ij - p_i) / (p_i (1 - p_i))`` and the epoch
    coefficient is ``R_retrain_norm_j * (a_j - mu) / sigma^2`` with the raw
    epoch action; one backward pass per sample, summed in sample order.
    """
    out = batch.policy_output
    p = out.keep_probs
    total = np.zeros(PolicyParams.parameter_count())
    for action, record in zip(batch.actions, batch.rewards):
        bits = np.asarray(action.concatenated_bits(), dtype=np.float64)
        scores = (bits - p) / (p * (1.0 - p))
        g = record.r_prune_norm * scores
        h = record.r_retrain_norm * normal_score(
            action.epoch_action_raw, out.epoch_mu, batch.sigma
        )
        total += policy_backward(params, out, g, h)
    return total


@dataclass(frozen=True)
class OptimizerState:
    """Momentum SGD state for gradient ascent on the agent parameters."""

    learning_rate: float = 0.005
    momentum: float = 0.9
    velocity: np.ndarray | None = None
    clip_norm: float | None = 10.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.velocity is None:
            object.__setattr__(self, "velocity", np.zeros(PolicyParams.parameter_count()))


def apply_update(
    params: PolicyParams, grad: np.ndarray, opt: OptimizerState
) -> tuple[PolicyParams, OptimizerState]:
    """One ascent step: fold the gradient into the velocity, move the parameters up it."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != opt.velocity.shape:
        raise ValueError(f"gradient shape {grad.shape} != velocity shape {opt.velocity.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient entries; update rejected")
    if opt.clip_norm is not None:
        norm = float(np.linalg.norm(grad))
        if norm > opt.clip_norm:
            grad = grad * (opt.clip_norm / norm)
    velocity = opt.momentum * opt.velocity + grad
    new_params = PolicyParams.from_vector(params.to_vector() + opt.learning_rate * velocity)
    return new_params, replace(opt, velocity=velocity)
