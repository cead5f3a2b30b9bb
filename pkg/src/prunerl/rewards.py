"""Reward terms, epoch clamping, and per-episode reward normalization.

Accuracies are percentage points (92.0 means 92%), so a bound of 2.0 tolerates
a two-point drop.  Mixing fractions and points would silently rescale every
reward by 100x; keep everything in points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

__all__ = [
    "RewardConfig",
    "RewardRecord",
    "acc_term",
    "eff_term",
    "prune_reward",
    "retrain_reward",
    "epochs_from_action",
    "normalize_rewards",
]

_STD_FLOOR = 1e-12


@dataclass(frozen=True)
class RewardConfig:
    """Hyper-parameters of the reward: accuracy bound and epoch ceiling.

    ``bound`` is the tolerated accuracy drop in percentage points; ``beta`` is
    the largest number of fine-tuning epochs one evaluation may spend.
    ``log_base`` switches the sparsity term between natural log (default) and
    base 2.
    """

    bound: float
    beta: float
    log_base: float = math.e

    def __post_init__(self) -> None:
        if self.bound <= 0:
            raise ValueError(f"bound must be > 0, got {self.bound}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.log_base <= 1:
            raise ValueError(f"log_base must be > 1, got {self.log_base}")


@dataclass(frozen=True)
class RewardRecord:
    """Raw and normalized rewards of one Monte-Carlo sample."""

    sample_index: int
    r_prune_raw: float
    r_retrain_raw: float
    acc_pruned: float
    r_prune_norm: float | None = None
    r_retrain_norm: float | None = None

    @property
    def normalized(self) -> bool:
        return self.r_prune_norm is not None and self.r_retrain_norm is not None

    def to_json(self) -> str:
        return json.dumps(
            {
                "sample": self.sample_index,
                "r_prune_raw": self.r_prune_raw,
                "r_retrain_raw": self.r_retrain_raw,
                "acc_pruned": self.acc_pruned,
                "r_prune_norm": self.r_prune_norm,
                "r_retrain_norm": self.r_retrain_norm,
            }
        )


def acc_term(bound: float, acc_base: float, acc_pruned: float) -> float:
    """Accuracy component: 1.0 with no drop, negative once the drop exceeds the bound."""
    if bound <= 0:
        raise ValueError(f"bound must be > 0, got {bound}")
    drop = max(0.0, acc_base - acc_pruned)
    return (bound - drop) / bound


def eff_term(num_filters: int, pruned: int, log_base: float = math.e) -> float:
    """Sparsity component: 0 when nothing is pruned, growing with the pruned count.

    Removing every filter would change the model depth, so that case is
    penalized with a flat -1 instead of the (divergent) log.
    """
    if num_filters < 1:
        raise ValueError(f"num_filters must be >= 1, got {num_filters}")
    if pruned < 0 or pruned > num_filters:
        raise ValueError(f"pruned count {pruned} outside [0, {num_filters}]")
    remaining = num_filters - pruned
    if remaining == 0:
        return -1.0
    return math.log(num_filters / remaining) / math.log(log_base)


def prune_reward(acc_term_value: float, eff_term_value: float) -> float:
    """Pruning reward: product of the accuracy and sparsity components."""
    return acc_term_value * eff_term_value


def retrain_reward(a_retrain_raw: float, acc_base: float, acc_pruned: float) -> float:
    """Epoch reward: |raw action| times the (signed) accuracy change.

    Zero when the evaluation lost no accuracy; otherwise negative, scaled by
    how far the raw action strayed from zero.  Uses the untruncated action.
    """
    return abs(a_retrain_raw) * (acc_pruned - acc_base)


def epochs_from_action(a_retrain_raw: float, beta: float) -> float:
    """Map a raw epoch action to actual fine-tuning epochs: clamp to [0,1], scale by beta.

    This is the only place the action is truncated; stored actions and
    gradient computations always use the raw value.
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    return min(max(0.0, a_retrain_raw), 1.0) * beta


def _standardize(values: Sequence[float]) -> list[float]:
    m = len(values)
    mean = sum(values) / m
    var = sum((v - mean) ** 2 for v in values) / m
    std = math.sqrt(var)
    if std < _STD_FLOOR:
        return [0.0] * m
    return [(v - mean) / std for v in values]


def normalize_rewards(records: Sequence[RewardRecord]) -> list[RewardRecord]:
    """Standardize each reward stream to zero mean and unit variance across the batch.

    Population statistics over the M samples, each stream independently.  A
    batch with (near-)zero variance normalizes to all zeros: identical rewards
    rank nothing and should move nothing.
    """
    if not records:
        raise ValueError("need at least one reward record")
    prune_norm = _standardize([r.r_prune_raw for r in records])
    retrain_norm = _standardize([r.r_retrain_raw for r in records])
    return [
        replace(rec, r_prune_norm=pn, r_retrain_norm=rn)
        for rec, pn, rn in zip(records, prune_norm, retrain_norm)
    ]
