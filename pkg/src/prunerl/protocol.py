"""Line-delimited JSON protocol between the orchestrator and a model backend.

One JSON object per line, strict request-reply, no interleaving.  Requests:

    {"op": "hello", "version": 1}
    {"op": "state", "layer": <int>}
    {"op": "evaluate", "masks": [{"layer": <int>, "bits": "0/1 string"}],
     "epochs": <float>, "sample": <int>}
    {"op": "commit", "masks": [...], "final_epochs": <float>}
    {"op": "shutdown"}

Successful replies carry {"ok": true, ...}; failures {"ok": false,
"error": "message"}.  ``hello`` returns the layer table
([{"index", "N", "c", "k", "block", "prunable"}]) and ``acc_base``; ``state``
returns {"dims": [N, c, k, k], "values": [...]} row-major; ``evaluate`` and
``commit`` return {"acc": <float>}.  Accuracies are percentage points.  A
mask bit of "1" keeps the filter.

The same protocol runs over a child process's stdin/stdout or a TCP socket.
"""

from __future__ import annotations

import json
import os
import select
import socket
import subprocess
import sys
from typing import Any, IO, Sequence

import numpy as np

from .core import LayerSpec, ModelTopology, PruneMask, WeightTensor
from .environment import EnvError, Environment

__all__ = [
    "PROTOCOL_VERSION",
    "ProtocolError",
    "BackendError",
    "TransportError",
    "serve",
    "ExternalEnvironment",
    "check_backend",
]

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 3600.0


class ProtocolError(EnvError):
    """The peer spoke, but not the protocol (bad JSON, missing fields)."""


class BackendError(EnvError):
    """The backend replied with {"ok": false, ...}."""


class TransportError(EnvError):
    """The connection failed: EOF, timeout, or a dead process."""


def masks_to_wire(masks: Sequence[PruneMask]) -> list[dict[str, Any]]:
    return [
        {"layer": m.layer_index, "bits": "".join(str(b) for b in m.bits)} for m in masks
    ]


def masks_from_wire(items: Any) -> list[PruneMask]:
    if not isinstance(items, list):
        raise ProtocolError("masks must be a list")
    masks = []
    for item in items:
        try:
            masks.append(PruneMask(int(item["layer"]), tuple(int(ch) for ch in item["bits"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed mask entry {item!r}") from exc
    return masks


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------


def _layer_table(topology: ModelTopology) -> list[dict[str, Any]]:
    return [
        {
            "index": spec.layer_index,
            "N": spec.num_filters,
            "c": spec.in_channels,
            "k": spec.kernel_size,
            "block": spec.block_id,
            "prunable": spec.prunable,
        }
        for spec in topology.layers
    ]


def serve(env: Environment, reader: IO[str] | None = None, writer: IO[str] | None = None) -> None:
    """Answer protocol requests on the given streams until shutdown or EOF.

    Every failure is reported as an {"ok": false} reply; the loop never dies
    on a bad request.
    """
    reader = sys.stdin if reader is None else reader
    writer = sys.stdout if writer is None else writer

    def reply(payload: dict[str, Any]) -> None:
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
                        "layers": _layer_table(env.topology()),
                        "acc_base": env.base_accuracy(),
                    }
                )
            elif op == "state":
                tensor = env.state_of(int(msg["layer"]))
                reply(
                    {
                        "ok": True,
                        "dims": list(tensor.dims),
                        "values": tensor.flat().tolist(),
                    }
                )
            elif op == "evaluate":
                acc = env.evaluate(
                    masks_from_wire(msg["masks"]),
                    float(msg["epochs"]),
                    sample_index=int(msg.get("sample", 0)),
                )
                reply({"ok": True, "acc": acc})
            elif op == "commit":
                env.commit(masks_from_wire(msg["masks"]))
                acc = env.final_finetune(float(msg["final_epochs"]))
                reply({"ok": True, "acc": acc})
            elif op == "shutdown":
                reply({"ok": True})
                return
            else:
                raise ValueError(f"unknown op {op!r}")
        except Exception as exc:  # noqa: BLE001 - everything becomes an error reply
            reply({"ok": False, "error": f"{type(exc).__name__}: {exc}"})


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------


class _LineChannel:
    """Blocking line reader/writer with a timeout over a pipe pair or socket."""

    def __init__(
        self,
        read_fd: int,
        write: "Any",
        sock: socket.socket | None = None,
        proc: subprocess.Popen | None = None,
    ) -> None:
        self._read_fd = read_fd
        self._write = write
        self._sock = sock
        self._proc = proc
        self._buffer = b""

    @classmethod
    def from_command(cls, cmd: Sequence[str]) -> "_LineChannel":
        try:
            proc = subprocess.Popen(
                list(cmd),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,
            )
        except OSError as exc:
            raise TransportError(f"cannot launch backend {cmd!r}: {exc}") from exc
        assert proc.stdin is not None and proc.stdout is not None
        return cls(proc.stdout.fileno(), proc.stdin, proc=proc)

    @classmethod
    def from_tcp(cls, host: str, port: int, timeout: float) -> "_LineChannel":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        return cls(sock.fileno(), sock, sock=sock)

    def send_line(self, line: str) -> None:
        data = line.encode("utf-8") + b"\n"
        try:
            if self._sock is not None:
                self._sock.sendall(data)
            else:
                self._write.write(data)
                self._write.flush()
        except (OSError, ValueError, BrokenPipeError) as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def recv_line(self, timeout: float) -> str:
        while b"\n" not in self._buffer:
            ready, _, _ = select.select([self._read_fd], [], [], timeout)
            if not ready:
                raise TransportError(f"no reply within {timeout} seconds")
            try:
                chunk = os.read(self._read_fd, 65536)
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed by peer")
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        return line.decode("utf-8")

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        if self._proc is not None:
            try:
                self._proc.stdin.close()  # type: ignore[union-attr]
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._proc.terminate()
                try:
                    self._proc.wait(timeout=5.0)
                except subprocess.TimeoutExpired:
                    self._proc.kill()
                    self._proc.wait()


class ExternalEnvironment(Environment):
    """Protocol client: a pruning environment served by another process.

    One strictly request-reply session; not safe for concurrent use.  Commit
    and final fine-tune travel as a single wire request, so ``commit`` buffers
    its masks until ``final_finetune`` is called.
    """

    def __init__(self, channel: _LineChannel, timeout: float = DEFAULT_TIMEOUT) -> None:
        self._channel = channel
        self._timeout = timeout
        self._pending_commit: list[PruneMask] | None = None
        self._committed: dict[int, PruneMask] = {}
        try:
            reply = self._request({"op": "hello", "version": PROTOCOL_VERSION})
            try:
                self._specs = tuple(
                    LayerSpec(
                        layer_index=int(entry["index"]),
                        num_filters=int(entry["N"]),
                        in_channels=int(entry["c"]),
                        kernel_size=int(entry["k"]),
                        block_id=None if entry.get("block") is None else int(entry["block"]),
                        prunable=bool(entry["prunable"]),
                    )
                    for entry in reply["layers"]
                )
                self._acc = float(reply["acc_base"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"malformed hello reply: {reply!r}") from exc
        except EnvError:
            self._channel.close()
            raise

    @classmethod
    def from_command(cls, cmd: Sequence[str], timeout: float = DEFAULT_TIMEOUT) -> "ExternalEnvironment":
        return cls(_LineChannel.from_command(cmd), timeout=timeout)

    @classmethod
    def from_tcp(cls, host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> "ExternalEnvironment":
        return cls(_LineChannel.from_tcp(host, port, timeout), timeout=timeout)

    def _request(self, payload: dict[str, Any]) -> dict[str, Any]:
        self._channel.send_line(json.dumps(payload))
        line = self._channel.recv_line(self._timeout)
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"reply is not valid JSON: {line!r}") from exc
        if not isinstance(reply, dict) or "ok" not in reply:
            raise ProtocolError(f"reply is missing the ok field: {line!r}")
        if not reply["ok"]:
            raise BackendError(str(reply.get("error", "backend error")))
        return reply

    def topology(self) -> ModelTopology:
        return ModelTopology(self._specs, dict(self._committed))

    def state_of(self, layer_index: int) -> WeightTensor:
        reply = self._request({"op": "state", "layer": int(layer_index)})
        try:
            dims = [int(d) for d in reply["dims"]]
            values = np.asarray(reply["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed state reply: {reply!r}") from exc
        return WeightTensor.from_flat(dims, values)

    def evaluate(
        self, masks: Sequence[PruneMask], epochs: float, sample_index: int = 0
    ) -> float:
        reply = self._request(
            {
                "op": "evaluate",
                "masks": masks_to_wire(masks),
                "epochs": float(epochs),
                "sample": int(sample_index),
            }
        )
        return self._acc_field(reply)

    def commit(self, masks: Sequence[PruneMask]) -> None:
        if self._pending_commit is not None:
            raise ProtocolError("previous commit was not finalized with final_finetune")
        self._pending_commit = list(masks)

    def final_finetune(self, epochs: float) -> float:
        if self._pending_commit is None:
            raise ProtocolError("final_finetune requires a preceding commit")
        reply = self._request(
            {
                "op": "commit",
                "masks": masks_to_wire(self._pending_commit),
                "final_epochs": float(epochs),
            }
        )
        acc = self._acc_field(reply)
        for mask in self._pending_commit:
            existing = self._committed.get(mask.layer_index)
            self._committed[mask.layer_index] = (
                mask if existing is None else existing.intersect(mask)
            )
        self._pending_commit = None
        self._acc = acc
        return acc

    def base_accuracy(self) -> float:
        return self._acc

    @staticmethod
    def _acc_field(reply: dict[str, Any]) -> float:
        try:
            acc = float(reply["acc"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"reply is missing a numeric acc field: {reply!r}") from exc
        if not np.isfinite(acc):
            raise ProtocolError(f"non-finite accuracy in reply: {reply!r}")
        return acc

    def close(self) -> None:
        try:
            self._channel.send_line(json.dumps({"op": "shutdown"}))
            self._channel.recv_line(min(self._timeout, 10.0))
        except EnvError:
            pass
        self._channel.close()


# ---------------------------------------------------------------------------
# Backend conformance
# ---------------------------------------------------------------------------


def check_backend(cmd: Sequence[str], timeout: float = DEFAULT_TIMEOUT) -> list[str]:
    """Run the canonical conformance transcript against a backend command.

    Covers the full request vocabulary, checkpoint isolation of ``evaluate``,
    commit mask semantics (filter zeroing plus next-layer kernel zeroing), and
    error replies for garbage input.  Returns the list of passed check names;
    raises ``EnvError`` or ``AssertionError`` on the first violation.
    """
    passed: list[str] = []

    def ok(name: str, condition: bool, detail: str = "") -> None:
        if not condition:
            raise AssertionError(f"conformance check failed: {name} {detail}".strip())
        passed.append(name)

    env = ExternalEnvironment.from_command(cmd, timeout=timeout)
    try:
        topo = env.topology()
        ok("hello-layers", topo.num_layers >= 1)
        prunable = topo.prunable_indices()
        ok("hello-has-prunable", len(prunable) >= 1)
        acc_base = env.base_accuracy()
        ok("hello-acc-base", 0.0 <= acc_base <= 100.0, f"acc_base={acc_base}")

        target = topo.layers[prunable[0]]
        ok("target-wide-enough", target.num_filters >= 2)
        for idx in prunable:
            spec = topo.layers[idx]
            tensor = env.state_of(idx)
            ok(
                f"state-dims-{idx}",
                tensor.dims
                == (spec.num_filters, spec.in_channels, spec.kernel_size, spec.kernel_size),
                f"dims={tensor.dims}",
            )

        keep_all = PruneMask.all_keep(target.layer_index, target.num_filters)
        acc0 = env.evaluate([keep_all], 0.0, sample_index=0)
        ok("evaluate-noop-is-base", abs(acc0 - acc_base) < 1e-6, f"{acc0} vs {acc_base}")

        one_pruned = PruneMask(
            target.layer_index, (0,) + (1,) * (target.num_filters - 1)
        )
        acc_a = env.evaluate([one_pruned], 1.0, sample_index=0)
        acc_b = env.evaluate([one_pruned], 1.0, sample_index=1)
        ok("evaluate-isolated", acc_a == acc_b, f"{acc_a} vs {acc_b}")

        env.commit([one_pruned])
        env.final_finetune(1.0)
        tensor = env.state_of(target.layer_index)
        ok("commit-zeroes-filter", bool(np.all(tensor.values[0] == 0.0)))
        nxt = topo.next_prunable(target.layer_index)
        if nxt is not None:
            nxt_tensor = env.state_of(nxt.layer_index)
            ok("commit-propagates-kernels", bool(np.all(nxt_tensor.values[:, 0] == 0.0)))

        env._channel.send_line("this is not json")
        raw = env._channel.recv_line(timeout)
        reply = json.loads(raw)
        ok("garbage-gets-error-reply", reply.get("ok") is False and "error" in reply, raw)

        env._channel.send_line(json.dumps({"op": "no-such-op"}))
        raw = env._channel.recv_line(timeout)
        reply = json.loads(raw)
        ok("unknown-op-gets-error-reply", reply.get("ok") is False, raw)
    finally:
        env.close()
    passed.append("shutdown-clean")
    return passed
