"""Protocol conformance: the adapter must pass the orchestrator's own checker."""

import json
import subprocess
import sys

from prunerl.protocol import check_backend


def adapter_command(*extra):
    return [
        sys.executable, "-m", "prunerl_adapter.cli",
        "--model", "resnet8",
        "--data", "synthetic:480",
        "--image-size", "16",
        "--seed", "0",
        "--pretrain-epochs", "5",
        *extra,
    ]


def test_conformance_transcript():
    passed = check_backend(adapter_command(), timeout=300.0)
    assert "evaluate-noop-is-base" in passed
    assert "evaluate-isolated" in passed
    assert "commit-zeroes-filter" in passed
    assert "commit-propagates-kernels" in passed
    assert "garbage-gets-error-reply" in passed
    assert "shutdown-clean" in passed


def test_hello_marks_stem_non_prunable():
    proc = subprocess.run(
        adapter_command(),
        input='{"op": "hello", "version": 1}\n{"op": "shutdown"}\n',
        capture_output=True,
        text=True,
        timeout=300,
    )
    assert proc.returncode == 0
    hello = json.loads(proc.stdout.splitlines()[0])
    assert hello["ok"] is True
    layers = hello["layers"]
    assert layers[0]["prunable"] is False
    assert all(entry["prunable"] for entry in layers[1:])
    assert [entry["block"] for entry in layers] == [None, 0, 0, 1, 1, 2, 2]
    assert 0.0 <= hello["acc_base"] <= 100.0
