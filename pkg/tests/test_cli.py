"""Command-line behavior: exit codes, overrides, reproducibility, audit."""

import json
import subprocess
import sys

import pytest

from prunerl.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, main


def synthetic_run_config(seed=5, episodes=4):
    return {
        "seed": seed,
        "schedule": {
            "order": "backwards",
            "episodes_per_layer": episodes,
            "monte_carlo_samples": 3,
            "bound": 2.0,
            "beta": 8.0,
            "final_finetune_epochs": 10.0,
            "early_stop_patience": None,
        },
        "environment": {
            "synthetic": {
                "layers": [[4, 3, 1], [4, 4, 1], [4, 4, 1]],
                "importance": [[0.0, 1.0, 0.0, 1.0]] * 3,
                "acc_base": 92.0,
                "damage_scale": 0.5,
                "recovery_saturation": 4.0,
                "prunable": [False, True, True],
            }
        },
    }


def write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return path


def read_outputs(out_dir):
    return {
        name: (out_dir / name).read_bytes()
        for name in ("summary.json", "episodes.jsonl", "layers.csv")
    }


class TestRun:
    def test_happy_path_writes_report(self, tmp_path, capsys):
        cfg = write_config(tmp_path, synthetic_run_config())
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["completed"] is True
        assert summary["visit_order"] == [[2], [1]]
        assert (out / "config.json").exists()
        assert "run complete" in capsys.readouterr().out

    def test_missing_config_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert main(["run", "--config", str(missing)]) == EXIT_CONFIG
        assert str(missing) in capsys.readouterr().err

    def test_invalid_json_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_must_select_exactly_one_environment(self, tmp_path):
        data = synthetic_run_config()
        data["environment"]["external"] = {"command": ["true"]}
        cfg = write_config(tmp_path, data)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_seed_inside_schedule_rejected(self, tmp_path):
        data = synthetic_run_config()
        data["schedule"]["seed"] = 3
        cfg = write_config(tmp_path, data)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_flag_overrides_order_and_bound(self, tmp_path):
        cfg = write_config(tmp_path, synthetic_run_config())
        out = tmp_path / "out"
        code = main(
            ["run", "--config", str(cfg), "--out", str(out), "--order", "forwards",
             "--bound", "3.5", "--epoch-learning", "off"]
        )
        assert code == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["visit_order"] == [[1], [2]]
        assert summary["schedule"]["bound"] == 3.5
        assert summary["schedule"]["epoch_learning"] is False

    def test_rerun_from_echoed_config_is_bit_identical(self, tmp_path):
        cfg = write_config(tmp_path, synthetic_run_config(seed=11, episodes=5))
        out_a = tmp_path / "a"
        assert main(["run", "--config", str(cfg), "--out", str(out_a)]) == EXIT_OK
        echoed = out_a / "config.json"
        out_b = tmp_path / "b"
        assert main(["run", "--config", str(echoed), "--out", str(out_b)]) == EXIT_OK
        assert read_outputs(out_a) == read_outputs(out_b)
        # and the echo of the echo is itself stable
        assert (out_a / "config.json").read_bytes() == (out_b / "config.json").read_bytes()


class TestEpisodeDump:
    def test_audit_passes_on_real_run(self, tmp_path, capsys):
        cfg = write_config(tmp_path, synthetic_run_config())
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        capsys.readouterr()
        assert main(["episode-dump", "--run", str(out)]) == EXIT_OK
        printed = capsys.readouterr().out
        assert "match the recomputed reward math" in printed

    def test_audit_detects_tampering(self, tmp_path, capsys):
        cfg = write_config(tmp_path, synthetic_run_config())
        out = tmp_path / "out"
        main(["run", "--config", str(cfg), "--out", str(out)])
        log = out / "episodes.jsonl"
        lines = log.read_text().splitlines()
        entry = json.loads(lines[0])
        entry["r_prune_raw"] += 0.25
        lines[0] = json.dumps(entry)
        log.write_text("\n".join(lines) + "\n")
        assert main(["episode-dump", "--run", str(out)]) == EXIT_INVARIANT
        assert "MISMATCH" in capsys.readouterr().out

    def test_single_episode_filter(self, tmp_path, capsys):
        cfg = write_config(tmp_path, synthetic_run_config())
        out = tmp_path / "out"
        main(["run", "--config", str(cfg), "--out", str(out)])
        capsys.readouterr()
        assert main(["episode-dump", "--run", str(out), "--episode", "0"]) == EXIT_OK
        printed = capsys.readouterr().out
        assert "episode=0" in printed
        assert "episode=1" not in printed


class TestCheckGradient:
    def test_small_check_passes(self, capsys):
        assert main(["check-gradient", "--filters", "1", "--samples", "4000",
                     "--seed", "0"]) == EXIT_OK
        assert "matches the brute-force gradient" in capsys.readouterr().out


class TestProtocolStub:
    def test_stub_serves_hello_over_stdio(self):
        proc = subprocess.run(
            [sys.executable, "-m", "prunerl.cli", "protocol-stub"],
            input='{"op": "hello", "version": 1}\n{"op": "shutdown"}\n',
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert proc.returncode == 0
        replies = [json.loads(line) for line in proc.stdout.splitlines()]
        assert replies[0]["ok"] is True
        assert replies[0]["layers"][0]["prunable"] is False  # stem conv excluded
        assert replies[1]["ok"] is True
