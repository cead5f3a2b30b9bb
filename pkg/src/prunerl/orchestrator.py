"""Drives the full pruning loop: per-unit agent training, commits, accounting.

A *unit* is one prunable layer (layer-wise) or the two prunable convolutions
of a residual block (block-wise).  Each unit gets a freshly initialized agent,
``episodes_per_layer`` training episodes, and ends with the best sampled mask
being committed and the model fine-tuned before the next unit starts.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import ActionSet, ModelTopology, PruneMask, layer_cr, model_cr
from .environment import EnvError, Environment
from .policy import (
    PolicyOutput,
    PolicyParams,
    SigmaSchedule,
    policy_forward,
    sample_actions,
    update_sigma,
)
from .reinforce import EpisodeBatch, OptimizerState, apply_update, estimate_gradient
from .rewards import (
    RewardRecord,
    acc_term,
    eff_term,
    epochs_from_action,
    normalize_rewards,
    prune_reward,
    retrain_reward,
)

__all__ = [
    "ScheduleConfig",
    "SampleLog",
    "PruneSession",
    "AgentState",
    "RunReport",
    "UnitAborted",
    "plan_units",
    "run_unit",
    "select_best_mask",
    "run_schedule",
]

_LOG_BASES = {"e": math.e, "2": 2.0}


class UnitAborted(EnvError):
    """An environment failure cut a session short; the partial session is attached."""

    def __init__(self, message: str, session: "PruneSession") -> None:
        super().__init__(message)
        self.session = session


@dataclass(frozen=True)
class ScheduleConfig:
    """Everything that shapes a pruning run, with the defaults used in anger."""

    order: str = "backwards"  # "forwards" | "backwards"
    granularity: str = "layer_wise"  # "layer_wise" | "block_wise"
    episodes_per_layer: int = 200
    monte_carlo_samples: int = 5
    bound: float = 2.0
    beta: float = 8.0
    epoch_learning: bool = True
    fixed_epochs: float = 8.0
    final_finetune_epochs: float = 150.0
    seed: int = 0
    early_stop_patience: int | None = 50
    max_units: int | None = None
    acc_base_mode: str = "remeasure"  # "remeasure" | "frozen"
    learning_rate: float = 0.005
    momentum: float = 0.9
    grad_clip_norm: float | None = 10.0
    sigma_initial: float = 0.3
    sigma_min: float = 0.05
    sigma_coefficient: float = 0.5
    sigma_ema_decay: float = 0.9
    log_base: str = "e"  # "e" | "2"
    parallel_eval: int = 1

    def __post_init__(self) -> None:
        if self.order not in ("forwards", "backwards"):
            raise ValueError(f"order must be forwards or backwards, got {self.order!r}")
        if self.granularity not in ("layer_wise", "block_wise"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.acc_base_mode not in ("remeasure", "frozen"):
            raise ValueError(f"unknown acc_base_mode {self.acc_base_mode!r}")
        if self.episodes_per_layer < 1:
            raise ValueError("episodes_per_layer must be >= 1")
        if self.monte_carlo_samples < 1:
            raise ValueError("monte_carlo_samples must be >= 1")
        if self.log_base not in _LOG_BASES:
            raise ValueError(f"log_base must be one of {sorted(_LOG_BASES)}")
        if self.parallel_eval < 1:
            raise ValueError("parallel_eval must be >= 1")

    @property
    def log_base_value(self) -> float:
        return _LOG_BASES[self.log_base]

    def to_dict(self) -> dict[str, Any]:
        return {
            "order": self.order,
            "granularity": self.granularity,
            "episodes_per_layer": self.episodes_per_layer,
            "monte_carlo_samples": self.monte_carlo_samples,
            "bound": self.bound,
            "beta": self.beta,
            "epoch_learning": self.epoch_learning,
            "fixed_epochs": self.fixed_epochs,
            "final_finetune_epochs": self.final_finetune_epochs,
            "seed": self.seed,
            "early_stop_patience": self.early_stop_patience,
            "max_units": self.max_units,
            "acc_base_mode": self.acc_base_mode,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "grad_clip_norm": self.grad_clip_norm,
            "sigma_initial": self.sigma_initial,
            "sigma_min": self.sigma_min,
            "sigma_coefficient": self.sigma_coefficient,
            "sigma_ema_decay": self.sigma_ema_decay,
            "log_base": self.log_base,
            "parallel_eval": self.parallel_eval,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScheduleConfig":
        unknown = set(data) - set(cls().to_dict())
        if unknown:
            raise ValueError(f"unknown schedule fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class AgentState:
    """Mutable bundle the trainer owns for one unit: parameters, optimizer, sigma, RNG."""

    params: PolicyParams
    optimizer: OptimizerState
    sigma: SigmaSchedule
    rng: np.random.Generator

    @classmethod
    def fresh(cls, cfg: ScheduleConfig, unit_position: int) -> "AgentState":
        init_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, unit_position))
        )
        sample_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2, unit_position))
        )
        return cls(
            params=PolicyParams.initialize(init_rng),
            optimizer=OptimizerState(
                learning_rate=cfg.learning_rate,
                momentum=cfg.momentum,
                clip_norm=cfg.grad_clip_norm,
            ),
            sigma=SigmaSchedule(
                sigma=cfg.sigma_initial,
                sigma_min=cfg.sigma_min,
                coefficient=cfg.sigma_coefficient,
                ema_decay=cfg.sigma_ema_decay,
            ),
            rng=sample_rng,
        )


@dataclass(frozen=True)
class SampleLog:
    """One Monte-Carlo sample as logged: action, epochs actually spent, rewards."""

    episode: int
    action: ActionSet
    e_retrain: float
    acc_base: float
    record: RewardRecord

    def to_json_dict(self, unit: Sequence[int]) -> dict[str, Any]:
        return {
            "unit": list(unit),
            "episode": self.episode,
            "sample": self.action.sample_index,
            "masks": [m.to_text() for m in self.action.masks],
            "action_raw": self.action.epoch_action_raw,
            "e_retrain": self.e_retrain,
            "acc_base": self.acc_base,
            "acc_pruned": self.record.acc_pruned,
            "r_prune_raw": self.record.r_prune_raw,
            "r_retrain_raw": self.record.r_retrain_raw,
            "r_prune_norm": self.record.r_prune_norm,
            "r_retrain_norm": self.record.r_retrain_norm,
        }


@dataclass
class PruneSession:
    """Everything produced while learning to prune one unit."""

    unit: tuple[int, ...]
    unit_layer_sizes: tuple[int, ...]
    acc_base_current: float
    samples: list[SampleLog] = field(default_factory=list)
    episodes_run: int = 0
    total_eval_epochs_spent: float = 0.0
    final_keep_probs: tuple[tuple[float, ...], ...] = ()
    best_masks: tuple[PruneMask, ...] | None = None
    committed: bool = False
    acc_after_commit: float | None = None
    aborted_error: str | None = None


def _unit_eff_term(action: ActionSet, log_base: float) -> float:
    """Sparsity term across all masks of the action.

    Per-layer log terms add up; emptying any layer collapses the whole term to
    the -1 penalty because the model would lose a layer.
    """
    if any(m.pruned_count == m.num_filters for m in action.masks):
        return -1.0
    return sum(eff_term(m.num_filters, m.pruned_count, log_base) for m in action.masks)


def _admissible(action: ActionSet) -> bool:
    return all(m.pruned_count < m.num_filters for m in action.masks)


def _better_candidate(cand: SampleLog, best: SampleLog | None) -> bool:
    if best is None:
        return True
    cr, br = cand.record.r_prune_raw, best.record.r_prune_raw
    if cr != br:
        return cr > br
    cn, bn = cand.action.total_pruned(), best.action.total_pruned()
    if cn != bn:
        return cn > bn
    cand_bits = "".join(str(b) for b in cand.action.concatenated_bits())
    best_bits = "".join(str(b) for b in best.action.concatenated_bits())
    return cand_bits < best_bits


def run_unit(
    env: Environment,
    agent: AgentState,
    cfg: ScheduleConfig,
    unit: Sequence[int],
    acc_base: float | None = None,
) -> PruneSession:
    """Train the agent on one unit for up to ``episodes_per_layer`` episodes.

    Each episode: one forward pass on the unit's weights, M sampled actions,
    M environment evaluations, reward normalization, one gradient-ascent step,
    and a sigma update.  Early-stops when the best raw prune reward has not
    improved for ``early_stop_patience`` episodes.
    """
    unit = tuple(int(i) for i in unit)
    topo = env.topology()
    for idx in unit:
        if idx < 0 or idx >= topo.num_layers or not topo.layers[idx].prunable:
            raise ValueError(f"unit layer {idx} is not prunable")
    if acc_base is None:
        acc_base = env.base_accuracy()
    states = [env.state_of(idx) for idx in unit]
    session = PruneSession(
        unit=unit,
        unit_layer_sizes=tuple(s.num_filters for s in states),
        acc_base_current=acc_base,
    )

    pool = ThreadPoolExecutor(max_workers=cfg.parallel_eval) if (
        cfg.parallel_eval > 1 and env.supports_parallel_eval
    ) else None
    try:
        _train_unit(env, agent, cfg, unit, acc_base, states, session, pool)
    except EnvError as exc:
        session.aborted_error = str(exc)
        if session.samples:
            session.best_masks = select_best_mask(session)
        raise UnitAborted(str(exc), session) from exc
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    final_output = policy_forward(agent.params, states, layer_indices=unit)
    session.final_keep_probs = tuple(
        tuple(float(p) for p in final_output.probs_for_layer(i)) for i in range(len(unit))
    )
    session.best_masks = select_best_mask(session)
    return session


def _train_unit(
    env: Environment,
    agent: AgentState,
    cfg: ScheduleConfig,
    unit: tuple[int, ...],
    acc_base: float,
    states: list,
    session: PruneSession,
    pool: ThreadPoolExecutor | None,
) -> None:
    best: SampleLog | None = None
    stale_episodes = 0
    for episode in range(cfg.episodes_per_layer):
        output = policy_forward(agent.params, states, layer_indices=unit)
        actions = sample_actions(output, agent.sigma, cfg.monte_carlo_samples, agent.rng)
        epochs = [
            epochs_from_action(a.epoch_action_raw, cfg.beta)
            if cfg.epoch_learning
            else cfg.fixed_epochs
            for a in actions
        ]
        if pool is not None:
            accs = list(
                pool.map(
                    lambda pair: env.evaluate(
                        pair[0].masks, pair[1], sample_index=pair[0].sample_index
                    ),
                    zip(actions, epochs),
                )
            )
        else:
            accs = [
                env.evaluate(a.masks, e, sample_index=a.sample_index)
                for a, e in zip(actions, epochs)
            ]

        raw_records = []
        for action, acc in zip(actions, accs):
            at = acc_term(cfg.bound, acc_base, acc)
            et = _unit_eff_term(action, cfg.log_base_value)
            raw_records.append(
                RewardRecord(
                    sample_index=action.sample_index,
                    r_prune_raw=prune_reward(at, et),
                    r_retrain_raw=retrain_reward(action.epoch_action_raw, acc_base, acc),
                    acc_pruned=acc,
                )
            )
        records = normalize_rewards(raw_records)

        batch = EpisodeBatch(
            policy_output=output,
            sigma=agent.sigma.sigma,
            actions=tuple(actions),
            rewards=tuple(records),
        )
        grad = estimate_gradient(batch, agent.params)
        agent.params, agent.optimizer = apply_update(agent.params, grad, agent.optimizer)
        agent.sigma = update_sigma(agent.sigma, [r.r_retrain_raw for r in records])

        improved = False
        for action, e_used, record in zip(actions, epochs, records):
            entry = SampleLog(
                episode=episode,
                action=action,
                e_retrain=e_used,
                acc_base=acc_base,
                record=record,
            )
            session.samples.append(entry)
            session.total_eval_epochs_spent += e_used
            if _admissible(action) and _better_candidate(entry, best):
                best = entry
                improved = True
        session.episodes_run = episode + 1
        stale_episodes = 0 if improved else stale_episodes + 1
        if (
            cfg.early_stop_patience is not None
            and stale_episodes >= cfg.early_stop_patience
        ):
            break


def select_best_mask(session: PruneSession) -> tuple[PruneMask, ...]:
    """Pick the committed masks: the logged sample with the highest raw prune reward.

    Ties go to the sample pruning more filters, then to the lexicographically
    smallest bitstring.  Samples that would empty a layer are never eligible;
    if nothing eligible was ever sampled, the unit keeps all its filters.
    """
    if not session.samples:
        raise ValueError("session has no logged samples")
    best: SampleLog | None = None
    for entry in session.samples:
        if _admissible(entry.action) and _better_candidate(entry, best):
            best = entry
    if best is None:
        return tuple(
            PruneMask.all_keep(idx, n)
            for idx, n in zip(session.unit, session.unit_layer_sizes)
        )
    return best.action.masks


def plan_units(topology: ModelTopology, cfg: ScheduleConfig) -> list[tuple[int, ...]]:
    """Units to visit, in order.  Non-prunable layers (e.g. the first conv) never appear."""
    prunable = [spec for spec in topology.layers if spec.prunable]
    if not prunable:
        raise ValueError("topology has no prunable layers")
    units: list[tuple[int, ...]]
    if cfg.granularity == "layer_wise":
        units = [(spec.layer_index,) for spec in prunable]
    else:
        by_block: dict[int, list[int]] = {}
        units = []
        for spec in prunable:
            if spec.block_id is None:
                units.append((spec.layer_index,))
            elif spec.block_id not in by_block:
                by_block[spec.block_id] = [spec.layer_index]
                units.append((spec.layer_index,))  # placeholder, patched below
            else:
                by_block[spec.block_id].append(spec.layer_index)
        patched: list[tuple[int, ...]] = []
        for unit in units:
            idx = unit[0]
            spec = topology.layers[idx]
            if spec.block_id is not None:
                patched.append(tuple(sorted(by_block[spec.block_id])))
            else:
                patched.append(unit)
        units = patched
    units.sort(key=lambda u: u[0])
    if cfg.order == "backwards":
        units.reverse()
    if cfg.max_units is not None:
        units = units[: cfg.max_units]
    return units


@dataclass
class RunReport:
    """Run outcome: accuracies, compression, per-layer table, and the episode log."""

    schedule: dict[str, Any]
    visit_order: list[list[int]]
    acc_initial: float
    acc_final: float
    model_compression: float
    total_eval_epochs: float
    layer_rows: list[dict[str, Any]]
    unit_summaries: list[dict[str, Any]]
    episode_entries: list[dict[str, Any]]
    completed: bool = True
    error: str | None = None

    def summary_dict(self) -> dict[str, Any]:
        return {
            "completed": self.completed,
            "error": self.error,
            "schedule": self.schedule,
            "visit_order": self.visit_order,
            "acc_initial": self.acc_initial,
            "acc_final": self.acc_final,
            "model_compression": self.model_compression,
            "total_eval_epochs": self.total_eval_epochs,
            "units": self.unit_summaries,
            "layers": self.layer_rows,
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(self.summary_dict(), indent=2) + "\n")
        with (out / "episodes.jsonl").open("w") as fh:
            for entry in self.episode_entries:
                fh.write(json.dumps(entry) + "\n")
        with (out / "layers.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=[
                    "layer",
                    "num_filters",
                    "in_channels",
                    "kernel",
                    "kept",
                    "pruned",
                    "layer_cr",
                    "unit",
                    "eval_epochs",
                ],
            )
            writer.writeheader()
            for row in self.layer_rows:
                writer.writerow(row)


def _layer_rows(
    topology: ModelTopology, sessions: list[PruneSession]
) -> list[dict[str, Any]]:
    epochs_by_layer: dict[int, float] = {}
    unit_by_layer: dict[int, str] = {}
    for session in sessions:
        label = "+".join(str(i) for i in session.unit)
        for idx in session.unit:
            epochs_by_layer[idx] = session.total_eval_epochs_spent
            unit_by_layer[idx] = label
    rows = []
    for spec in topology.layers:
        mask = topology.committed_masks.get(spec.layer_index)
        pruned = 0 if mask is None else mask.pruned_count
        rows.append(
            {
                "layer": spec.layer_index,
                "num_filters": spec.num_filters,
                "in_channels": spec.in_channels,
                "kernel": spec.kernel_size,
                "kept": spec.num_filters - pruned,
                "pruned": pruned,
                "layer_cr": layer_cr(topology, spec.layer_index),
                "unit": unit_by_layer.get(spec.layer_index, ""),
                "eval_epochs": epochs_by_layer.get(spec.layer_index, 0.0),
            }
        )
    return rows


def _unit_summary(session: PruneSession) -> dict[str, Any]:
    best = None
    if session.best_masks is not None and session.samples:
        eligible = [s for s in session.samples if s.action.masks == session.best_masks]
        if eligible:
            best = max(e.record.r_prune_raw for e in eligible)
    return {
        "unit": list(session.unit),
        "episodes_run": session.episodes_run,
        "acc_base_used": session.acc_base_current,
        "eval_epochs_spent": session.total_eval_epochs_spent,
        "best_r_prune": best,
        "committed_masks": [m.to_text() for m in session.best_masks or ()],
        "acc_after_commit": session.acc_after_commit,
        "final_keep_probs": [list(p) for p in session.final_keep_probs],
    }


def run_schedule(
    env: Environment, cfg: ScheduleConfig, out_dir: str | Path | None = None
) -> RunReport:
    """Visit every unit in the configured order: train, select, commit, fine-tune.

    A fresh agent is trained per unit.  The accuracy baseline for each unit is
    re-measured after the previous commit (or frozen at the initial accuracy
    when ``acc_base_mode`` is "frozen").  On environment failure the partial
    report is still written to ``out_dir`` before the error propagates.
    """
    topo = env.topology()
    units = plan_units(topo, cfg)
    acc_initial = env.base_accuracy()
    frozen_base = acc_initial
    sessions: list[PruneSession] = []
    error: str | None = None

    try:
        for position, unit in enumerate(units):
            agent = AgentState.fresh(cfg, position)
            acc_base = frozen_base if cfg.acc_base_mode == "frozen" else env.base_accuracy()
            session = run_unit(env, agent, cfg, unit, acc_base=acc_base)
            sessions.append(session)
            masks = session.best_masks
            assert masks is not None
            env.commit(masks)
            session.acc_after_commit = env.final_finetune(cfg.final_finetune_epochs)
            session.committed = True
    except UnitAborted as exc:
        sessions.append(exc.session)
        error = str(exc)
    except EnvError as exc:
        error = str(exc)

    final_topo = env.topology()
    report = RunReport(
        schedule=cfg.to_dict(),
        visit_order=[list(u) for u in units],
        acc_initial=acc_initial,
        acc_final=env.base_accuracy(),
        model_compression=model_cr(final_topo),
        total_eval_epochs=sum(s.total_eval_epochs_spent for s in sessions),
        layer_rows=_layer_rows(final_topo, sessions),
        unit_summaries=[_unit_summary(s) for s in sessions],
        episode_entries=[
            entry.to_json_dict(session.unit)
            for session in sessions
            for entry in session.samples
        ],
        completed=error is None,
        error=error,
    )
    if out_dir is not None:
        report.write(out_dir)
    if error is not None:
        raise EnvError(f"schedule aborted: {error}")
    return report
