"""Protocol loop: line-delimited JSON requests on stdin, replies on stdout.

Mirrors the pruning orchestrator's wire format (see the prunerl README):
hello / state / evaluate / commit / shutdown, one JSON object per line,
accuracies in percentage points, mask bit 1 = keep.  Every failure becomes an
{"ok": false, "error": ...} reply; the loop never dies on a bad request.
"""

from __future__ import annotations

import json
import sys
from typing import IO

from .backend import ModelBackend

PROTOCOL_VERSION = 1


def serve(backend: ModelBackend, reader: IO[str] | None = None, writer: IO[str] | None = None) -> None:
    reader = sys.stdin if reader is None else reader
    writer = sys.stdout if writer is None else writer

    def reply(payload: dict) -> None:
        writer.write(json.dumps(payload) + "\n")
        writer.flush()

    for line in reader:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
            if not isinstance(msg, dict):
                raise ValueError("request must be a JSON object")
            op = msg.get("op")
            if op == "hello":
                if msg.get("version") != PROTOCOL_VERSION:
                    raise ValueError(f"unsupported protocol version {msg.get('version')!r}")
                reply(
                    {
                        "ok": True,
                        "layers": [
                            {
                                "index": info.index,
                                "N": info.num_filters,
                                "c": info.in_channels,
                                "k": info.kernel_size,
                                "block": info.block_id,
                                "prunable": info.prunable,
                            }
                            for info in backend.layer_table()
                        ],
                        "acc_base": backend.base_accuracy(),
                    }
                )
            elif op == "state":
                weight = backend.state_of(int(msg["layer"]))
                reply(
                    {
                        "ok": True,
                        "dims": list(weight.shape),
                        "values": weight.reshape(-1).tolist(),
                    }
                )
            elif op == "evaluate":
                acc = backend.evaluate(msg["masks"], float(msg["epochs"]))
                reply({"ok": True, "acc": acc})
            elif op == "commit":
                acc = backend.commit(msg["masks"], float(msg["final_epochs"]))
                reply({"ok": True, "acc": acc})
            elif op == "shutdown":
                reply({"ok": True})
                return
            else:
                raise ValueError(f"unknown op {op!r}")
        except Exception as exc:  # noqa: BLE001 - everything becomes an error reply
            reply({"ok": False, "error": f"{type(exc).__name__}: {exc}"})
