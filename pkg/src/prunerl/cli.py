"""Command-line front end: run schedules, audit logs, verify gradients, serve a stub.

Exit codes: 0 success, 2 bad configuration, 3 environment failure, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from .environment import EnvError, Environment, SyntheticEnvConfig, SyntheticEnvironment
from .oracle import run_gradient_check
from .orchestrator import ScheduleConfig, run_schedule
from .protocol import ExternalEnvironment, serve
from .rewards import (
    acc_term,
    eff_term,
    epochs_from_action,
    normalize_rewards,
    prune_reward,
    retrain_reward,
    RewardRecord,
)
from .core import PruneMask

logger = logging.getLogger("prunerl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENVIRONMENT = 3
EXIT_INVARIANT = 4


class ConfigError(ValueError):
    pass


# Built-in topology for the protocol stub: a non-prunable stem followed by two
# two-layer blocks, importances fixed so replies are fully deterministic.
_STUB_CONFIG = {
    "layers": [[8, 3, 3], [8, 8, 3], [8, 8, 3], [8, 8, 3], [8, 8, 3]],
    "importance": [
        [1.0] * 8,
        [0.0, 0.5, 0.0, 2.0, 0.0, 1.0, 3.0, 0.0],
        [0.0, 0.0, 1.5, 0.5, 2.5, 0.0, 0.0, 1.0],
        [2.0, 0.0, 0.0, 1.0, 0.0, 0.5, 1.5, 0.0],
        [0.0, 1.0, 0.5, 0.0, 2.0, 0.0, 0.0, 1.5],
    ],
    "acc_base": 92.0,
    "damage_scale": 1.0,
    "recovery_saturation": 4.0,
    "seed": 0,
    "prunable": [False, True, True, True, True],
    "block_ids": [None, 0, 0, 1, 1],
}


def _load_json(path: str) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _build_schedule(data: dict[str, Any], args: argparse.Namespace) -> ScheduleConfig:
    schedule_dict = dict(data.get("schedule", {}))
    if "seed" in schedule_dict:
        raise ConfigError("set the seed at the top level, not inside schedule")
    schedule_dict["seed"] = int(data.get("seed", 0))
    try:
        cfg = ScheduleConfig.from_dict(schedule_dict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad schedule config: {exc}") from exc

    overrides: dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "order", None) is not None:
        overrides["order"] = args.order
    if getattr(args, "granularity", None) is not None:
        overrides["granularity"] = {"layer": "layer_wise", "block": "block_wise"}[
            args.granularity
        ]
    if getattr(args, "bound", None) is not None:
        overrides["bound"] = args.bound
    if getattr(args, "epoch_learning", None) is not None:
        overrides["epoch_learning"] = args.epoch_learning == "on"
    if getattr(args, "parallel_eval", None) is not None:
        overrides["parallel_eval"] = args.parallel_eval
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def _build_environment(
    data: dict[str, Any], seed: int
) -> tuple[Environment, dict[str, Any]]:
    env_spec = data.get("environment")
    if not isinstance(env_spec, dict) or len(env_spec.keys() - {"timeout"}) != 1:
        raise ConfigError(
            'config must select exactly one environment: {"synthetic": ...} or {"external": ...}'
        )
    if "synthetic" in env_spec:
        syn = dict(env_spec["synthetic"])
        syn.setdefault("seed", seed)
        try:
            cfg = SyntheticEnvConfig.from_dict(syn)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad synthetic environment config: {exc}") from exc
        return SyntheticEnvironment(cfg), {"synthetic": cfg.to_dict()}
    if "external" in env_spec:
        ext = env_spec["external"]
        timeout = float(env_spec.get("timeout", 3600.0))
        echo = {"external": ext, "timeout": timeout}
        if isinstance(ext, dict) and "command" in ext:
            return ExternalEnvironment.from_command(ext["command"], timeout=timeout), echo
        if isinstance(ext, dict) and "host" in ext and "port" in ext:
            return (
                ExternalEnvironment.from_tcp(ext["host"], int(ext["port"]), timeout=timeout),
                echo,
            )
        raise ConfigError(
            'external environment needs {"command": [...]} or {"host": ..., "port": ...}'
        )
    raise ConfigError(f"unknown environment selection: {sorted(env_spec)}")


def _cmd_run(args: argparse.Namespace) -> int:
    data = _load_json(args.config)
    cfg = _build_schedule(data, args)
    out_dir = args.out or data.get("out")
    if not out_dir:
        raise ConfigError("no output directory: pass --out or set \"out\" in the config")
    env, env_echo = _build_environment(data, cfg.seed)
    try:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        echo = {
            "seed": cfg.seed,
            "schedule": {k: v for k, v in cfg.to_dict().items() if k != "seed"},
            "environment": env_echo,
            "log_level": data.get("log_level", "info"),
        }
        (out / "config.json").write_text(json.dumps(echo, indent=2) + "\n")
        report = run_schedule(env, cfg, out_dir=out)
    finally:
        env.close()
    print(
        f"run complete: accuracy {report.acc_initial:.3f} -> {report.acc_final:.3f}, "
        f"compression {report.model_compression:.3f}x, "
        f"{report.total_eval_epochs:.1f} evaluation epochs, outputs in {out_dir}"
    )
    return EXIT_OK


def _recompute_entry(entry: dict[str, Any], cfg: ScheduleConfig) -> dict[str, float]:
    masks = [PruneMask.from_text(t) for t in entry["masks"]]
    if any(m.pruned_count == m.num_filters for m in masks):
        et = -1.0
    else:
        et = sum(eff_term(m.num_filters, m.pruned_count, cfg.log_base_value) for m in masks)
    at = acc_term(cfg.bound, entry["acc_base"], entry["acc_pruned"])
    expected_epochs = (
        epochs_from_action(entry["action_raw"], cfg.beta)
        if cfg.epoch_learning
        else cfg.fixed_epochs
    )
    return {
        "r_prune_raw": prune_reward(at, et),
        "r_retrain_raw": retrain_reward(
            entry["action_raw"], entry["acc_base"], entry["acc_pruned"]
        ),
        "e_retrain": expected_epochs,
    }


def _cmd_episode_dump(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    config = _load_json(str(run_dir / "config.json"))
    episodes_path = run_dir / "episodes.jsonl"
    if not episodes_path.exists():
        raise ConfigError(f"episode log not found: {episodes_path}")
    schedule_dict = dict(config.get("schedule", {}))
    schedule_dict["seed"] = int(config.get("seed", 0))
    cfg = ScheduleConfig.from_dict(schedule_dict)

    entries = [json.loads(line) for line in episodes_path.read_text().splitlines() if line]
    if args.episode is not None:
        entries = [e for e in entries if e["episode"] == args.episode]
    if not entries:
        raise ConfigError("no matching episode entries")

    mismatches = 0
    groups: dict[tuple[Any, ...], list[dict[str, Any]]] = {}
    for entry in entries:
        groups.setdefault((tuple(entry["unit"]), entry["episode"]), []).append(entry)
    for (unit, episode), group in groups.items():
        group.sort(key=lambda e: e["sample"])
        raw = [
            RewardRecord(
                sample_index=e["sample"],
                r_prune_raw=e["r_prune_raw"],
                r_retrain_raw=e["r_retrain_raw"],
                acc_pruned=e["acc_pruned"],
            )
            for e in group
        ]
        renormed = normalize_rewards(raw)
        for entry, renorm in zip(group, renormed):
            recomputed = _recompute_entry(entry, cfg)
            checks = {
                "r_prune_raw": (entry["r_prune_raw"], recomputed["r_prune_raw"]),
                "r_retrain_raw": (entry["r_retrain_raw"], recomputed["r_retrain_raw"]),
                "e_retrain": (entry["e_retrain"], recomputed["e_retrain"]),
                "r_prune_norm": (entry["r_prune_norm"], renorm.r_prune_norm),
                "r_retrain_norm": (entry["r_retrain_norm"], renorm.r_retrain_norm),
            }
            bad = {
                name: pair
                for name, pair in checks.items()
                if not math.isclose(pair[0], pair[1], rel_tol=1e-9, abs_tol=1e-9)
            }
            status = "ok" if not bad else "MISMATCH " + ", ".join(
                f"{k}: logged={v[0]!r} recomputed={v[1]!r}" for k, v in bad.items()
            )
            mismatches += bool(bad)
            print(
                f"unit={list(unit)} episode={episode} sample={entry['sample']} "
                f"masks={entry['masks']} a_raw={entry['action_raw']:+.4f} "
                f"e={entry['e_retrain']:.3f} acc={entry['acc_pruned']:.4f} "
                f"Rp={entry['r_prune_raw']:+.5f} Rr={entry['r_retrain_raw']:+.5f} [{status}]"
            )
    if mismatches:
        print(f"{mismatches} entries disagree with the recomputed reward math")
        return EXIT_INVARIANT
    print(f"all {len(entries)} entries match the recomputed reward math")
    return EXIT_OK


def _cmd_check_gradient(args: argparse.Namespace) -> int:
    result = run_gradient_check(
        num_filters=args.filters,
        num_samples=args.samples,
        seed=args.seed if args.seed is not None else 0,
        threshold=args.threshold,
    )
    print(
        f"filters={result.num_filters} samples={result.num_samples} "
        f"params={result.num_params} max|z|={result.max_abs_z:.3f} "
        f"(worst param {result.worst_param}, threshold {result.threshold})"
    )
    if not result.passed:
        print("estimator mean deviates from the brute-force gradient")
        return EXIT_INVARIANT
    print("estimator mean matches the brute-force gradient")
    return EXIT_OK


def _cmd_protocol_stub(args: argparse.Namespace) -> int:
    if args.config:
        data = _load_json(args.config)
        syn = data.get("environment", {}).get("synthetic", data.get("synthetic", data))
        try:
            cfg = SyntheticEnvConfig.from_dict(syn)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad stub config: {exc}") from exc
    else:
        stub = dict(_STUB_CONFIG)
        if args.seed is not None:
            stub["seed"] = args.seed
        cfg = SyntheticEnvConfig.from_dict(stub)
    serve(SyntheticEnvironment(cfg))
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunerl",
        description="Reinforcement-learning filter pruning with learned fine-tuning budgets",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a full pruning schedule")
    run.add_argument("--config", required=True, help="JSON run configuration")
    run.add_argument("--out", help="output directory (overrides config)")
    run.add_argument("--seed", type=int, help="master random seed (overrides config)")
    run.add_argument("--parallel-eval", type=int, dest="parallel_eval")
    run.add_argument("--order", choices=["forwards", "backwards"])
    run.add_argument("--granularity", choices=["layer", "block"])
    run.add_argument("--bound", type=float, help="tolerated accuracy drop, points")
    run.add_argument("--epoch-learning", choices=["on", "off"], dest="epoch_learning")
    run.set_defaults(func=_cmd_run)

    dump = sub.add_parser("episode-dump", help="replay logged reward math for audit")
    dump.add_argument("--run", required=True, help="run output directory")
    dump.add_argument("--episode", type=int, help="restrict to one episode index")
    dump.set_defaults(func=_cmd_episode_dump)

    check = sub.add_parser("check-gradient", help="brute-force estimator verification")
    check.add_argument("--filters", type=int, default=2)
    check.add_argument("--samples", type=int, default=100_000)
    check.add_argument("--seed", type=int, default=None)
    check.add_argument("--threshold", type=float, default=3.0)
    check.set_defaults(func=_cmd_check_gradient)

    stub = sub.add_parser("protocol-stub", help="serve a deterministic fake backend on stdio")
    stub.add_argument("--config", help="synthetic environment JSON (optional)")
    stub.add_argument("--seed", type=int, default=None)
    stub.set_defaults(func=_cmd_protocol_stub)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EnvError as exc:
        print(f"environment failure: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except (AssertionError, ValueError, RuntimeError) as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
