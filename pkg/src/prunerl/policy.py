"""The stochastic pruning agent: network, sampling, and manual backprop.

The agent maps a layer's weight tensor to a keep probability per filter and a
single epoch mean.  Every filter is encoded by the same small 1-D conv stack
(channels 1->8->16->32->32, kernel 3, stride 2) followed by global average
pooling, which makes the parameter count independent of both the filter count
N and the per-filter length c*k*k.  Two heads sit on top:

* prune head, applied per filter embedding -> sigmoid -> keep probability;
* epoch head, applied to the mean of all filter embeddings -> sigmoid -> mu.

Gradients are computed analytically (no autograd); ``policy_backward`` returns
the gradient of ``sum_i g_i * p_i + h * mu`` with caller-chosen coefficients,
which is exactly the contraction the score-function estimator needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ActionSet, PruneMask, WeightTensor

__all__ = [
    "PolicyParams",
    "PolicyOutput",
    "SigmaSchedule",
    "policy_forward",
    "policy_backward",
    "sample_actions",
    "update_sigma",
    "save_checkpoint",
    "load_checkpoint",
    "PROB_EPS",
]

PROB_EPS = 1e-4

CONV_CHANNELS = (1, 8, 16, 32, 32)
CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_PAD = 1
EMBED_DIM = 32
HEAD_HIDDEN = 16

_ARCHITECTURE = {
    "conv_channels": list(CONV_CHANNELS),
    "conv_kernel": CONV_KERNEL,
    "conv_stride": CONV_STRIDE,
    "conv_pad": CONV_PAD,
    "embed_dim": EMBED_DIM,
    "head_hidden": HEAD_HIDDEN,
}


def _build_shapes() -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = []
    for cin, cout in zip(CONV_CHANNELS[:-1], CONV_CHANNELS[1:]):
        shapes.append((cout, cin, CONV_KERNEL))
        shapes.append((cout,))
    for _ in range(2):  # prune head then epoch head
        shapes.append((HEAD_HIDDEN, EMBED_DIM))
        shapes.append((HEAD_HIDDEN,))
        shapes.append((1, HEAD_HIDDEN))
        shapes.append((1,))
    return shapes


_PARAM_SHAPES = _build_shapes()
_PARAM_SIZES = [int(np.prod(s)) for s in _PARAM_SHAPES]
_PARAM_COUNT = sum(_PARAM_SIZES)
_PARAM_OFFSETS = np.concatenate([[0], np.cumsum(_PARAM_SIZES)])

CHECKPOINT_FORMAT_VERSION = 1


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class PolicyParams:
    """All agent parameters: 4 conv stages and two 2-layer heads.

    Treated as immutable; optimizer steps build a new instance via
    ``from_vector``, which is also where finiteness is enforced.  ``to_vector``
    defines the canonical flat layout used by gradients, optimizer state, and
    checkpoints.
    """

    conv_w: tuple[np.ndarray, ...]
    conv_b: tuple[np.ndarray, ...]
    prune_w: tuple[np.ndarray, np.ndarray]
    prune_b: tuple[np.ndarray, np.ndarray]
    epoch_w: tuple[np.ndarray, np.ndarray]
    epoch_b: tuple[np.ndarray, np.ndarray]

    def _arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend([w, b])
        for w, b in zip(self.prune_w, self.prune_b):
            out.extend([w, b])
        for w, b in zip(self.epoch_w, self.epoch_b):
            out.extend([w, b])
        return out

    @classmethod
    def parameter_count(cls) -> int:
        return _PARAM_COUNT

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self._arrays()])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "PolicyParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (_PARAM_COUNT,):
            raise ValueError(
                f"expected vector of length {_PARAM_COUNT}, got shape {vec.shape}"
            )
        if not np.all(np.isfinite(vec)):
            raise ValueError("policy parameters must be finite")
        arrays = [
            vec[_PARAM_OFFSETS[i] : _PARAM_OFFSETS[i + 1]].reshape(shape).copy()
            for i, shape in enumerate(_PARAM_SHAPES)
        ]
        n_conv = len(CONV_CHANNELS) - 1
        conv = arrays[: 2 * n_conv]
        prune = arrays[2 * n_conv : 2 * n_conv + 4]
        epoch = arrays[2 * n_conv + 4 :]
        return cls(
            conv_w=tuple(conv[0::2]),
            conv_b=tuple(conv[1::2]),
            prune_w=(prune[0], prune[2]),
            prune_b=(prune[1], prune[3]),
            epoch_w=(epoch[0], epoch[2]),
            epoch_b=(epoch[1], epoch[3]),
        )

    @classmethod
    def initialize(cls, rng: np.random.Generator | int) -> "PolicyParams":
        """Fan-in scaled uniform init; both head output layers start at zero.

        The zero-initialized heads put every keep probability and the epoch
        mean at sigmoid(0) = 0.5, a maximum-entropy starting point.
        """
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)

        def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
            a = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-a, a, size=shape)

        conv_w, conv_b = [], []
        for cin, cout in zip(CONV_CHANNELS[:-1], CONV_CHANNELS[1:]):
            fan = cin * CONV_KERNEL
            conv_w.append(uniform((cout, cin, CONV_KERNEL), fan))
            conv_b.append(uniform((cout,), fan))
        prune_w = (uniform((HEAD_HIDDEN, EMBED_DIM), EMBED_DIM), np.zeros((1, HEAD_HIDDEN)))
        prune_b = (uniform((HEAD_HIDDEN,), EMBED_DIM), np.zeros(1))
        epoch_w = (uniform((HEAD_HIDDEN, EMBED_DIM), EMBED_DIM), np.zeros((1, HEAD_HIDDEN)))
        epoch_b = (uniform((HEAD_HIDDEN,), EMBED_DIM), np.zeros(1))
        return cls(
            conv_w=tuple(conv_w),
            conv_b=tuple(conv_b),
            prune_w=prune_w,
            prune_b=prune_b,
            epoch_w=epoch_w,
            epoch_b=epoch_b,
        )


@dataclass(frozen=True)
class SigmaSchedule:
    """Non-learnable spread of the epoch action's Normal distribution.

    Tracks an exponential moving average of |retrain reward| and keeps
    ``sigma = max(sigma_min, coefficient * ema)`` after every update, so bad
    epoch choices widen exploration and quiet ones shrink it to the floor.
    """

    sigma: float = 0.3
    sigma_min: float = 0.05
    coefficient: float = 0.5
    ema: float = 0.0
    ema_decay: float = 0.9

    def __post_init__(self) -> None:
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.sigma < self.sigma_min:
            raise ValueError("sigma below sigma_min")


def update_sigma(schedule: SigmaSchedule, retrain_rewards: Sequence[float]) -> SigmaSchedule:
    """Fold the batch-mean |retrain reward| into the EMA and recompute sigma."""
    if not retrain_rewards:
        raise ValueError("need at least one retrain reward")
    batch_mean = float(np.mean(np.abs(np.asarray(retrain_rewards, dtype=np.float64))))
    ema = schedule.ema_decay * schedule.ema + (1.0 - schedule.ema_decay) * batch_mean
    sigma = max(schedule.sigma_min, schedule.coefficient * ema)
    return replace(schedule, sigma=sigma, ema=ema)


@dataclass
class _StateCache:
    """Per-input-tensor intermediates kept for the backward pass."""

    padded: list[np.ndarray]  # padded inputs of each conv stage
    windows: list[np.ndarray]  # window matrices (N, out_len, c_in*kernel) per stage
    pre_act: list[np.ndarray]  # conv pre-activations z of each stage
    final_len: int  # length pooled away by the GAP


@dataclass
class _ForwardCache:
    params: PolicyParams
    states: list[_StateCache]
    embeddings: np.ndarray  # (N_total, EMBED_DIM)
    prune_hidden: np.ndarray  # (N_total, HEAD_HIDDEN), post-ReLU
    prune_sigmoid: np.ndarray  # (N_total,), before clamping
    clamp_active: np.ndarray  # (N_total,) bool, True where the clamp bit
    pooled: np.ndarray  # (EMBED_DIM,)
    epoch_hidden: np.ndarray  # (HEAD_HIDDEN,), post-ReLU
    mu: float


@dataclass(frozen=True)
class PolicyOutput:
    """Keep probabilities, epoch mean, and the cached forward pass."""

    keep_probs: np.ndarray
    epoch_mu: float
    filter_counts: tuple[int, ...]
    layer_indices: tuple[int, ...]
    cache: _ForwardCache

    def probs_for_layer(self, position: int) -> np.ndarray:
        start = sum(self.filter_counts[:position])
        return self.keep_probs[start : start + self.filter_counts[position]]


def _conv_stage(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, cin, length = x.shape
    padded = np.zeros((n, cin, length + 2 * CONV_PAD))
    padded[:, :, CONV_PAD : CONV_PAD + length] = x
    out_len = (length + 2 * CONV_PAD - CONV_KERNEL) // CONV_STRIDE + 1
    windows = np.empty((n, out_len, cin, CONV_KERNEL))
    for t in range(CONV_KERNEL):
        windows[:, :, :, t] = padded[
            :, :, t : t + CONV_STRIDE * out_len : CONV_STRIDE
        ].transpose(0, 2, 1)
    flat = windows.reshape(n, out_len, cin * CONV_KERNEL)
    z = (flat @ w.reshape(w.shape[0], -1).T).transpose(0, 2, 1) + b[None, :, None]
    return padded, flat, z


def policy_forward(
    params: PolicyParams,
    state: WeightTensor | Sequence[WeightTensor],
    layer_indices: Sequence[int] | None = None,
) -> PolicyOutput:
    """Run the agent on one layer's weights (or a block's two weight tensors).

    Each tensor is standardized to zero mean and unit variance over all of its
    entries before encoding, so relative filter magnitudes stay visible.
    Deterministic: same params and state give a bitwise-identical output.
    """
    states = [state] if isinstance(state, WeightTensor) else list(state)
    if not states:
        raise ValueError("need at least one state tensor")
    if layer_indices is None:
        layer_indices = tuple(range(len(states)))
    else:
        layer_indices = tuple(int(i) for i in layer_indices)
    if len(layer_indices) != len(states):
        raise ValueError("layer_indices must match the number of state tensors")

    state_caches: list[_StateCache] = []
    embeddings: list[np.ndarray] = []
    for wt in states:
        x = wt.filter_vectors()
        mean = x.mean()
        std = x.std()
        xn = (x - mean) / (std + 1e-8)
        h = xn[:, None, :]
        padded_list, window_list, pre_act_list = [], [], []
        for w, b in zip(params.conv_w, params.conv_b):
            padded, windows, z = _conv_stage(h, w, b)
            padded_list.append(padded)
            window_list.append(windows)
            pre_act_list.append(z)
            h = _relu(z)
        emb = h.mean(axis=2)
        state_caches.append(
            _StateCache(
                padded=padded_list,
                windows=window_list,
                pre_act=pre_act_list,
                final_len=h.shape[2],
            )
        )
        embeddings.append(emb)

    emb_all = np.concatenate(embeddings, axis=0)

    prune_hidden = _relu(emb_all @ params.prune_w[0].T + params.prune_b[0])
    prune_logit = (prune_hidden @ params.prune_w[1].T + params.prune_b[1]).reshape(-1)
    # logits are clipped before the sigmoid: beyond +-36 float64 rounds the
    # sigmoid to exactly 0 or 1, and the slope out there is ~1e-16 anyway
    prune_sigmoid = _sigmoid(np.clip(prune_logit, -36.0, 36.0))
    keep_probs = np.clip(prune_sigmoid, PROB_EPS, 1.0 - PROB_EPS)
    clamp_active = (prune_sigmoid < PROB_EPS) | (prune_sigmoid > 1.0 - PROB_EPS)

    pooled = emb_all.mean(axis=0)
    epoch_hidden = _relu(params.epoch_w[0] @ pooled + params.epoch_b[0])
    epoch_logit = float((params.epoch_w[1] @ epoch_hidden + params.epoch_b[1])[0])
    mu = float(_sigmoid(np.clip(epoch_logit, -36.0, 36.0)))

    keep_probs = keep_probs.copy()
    keep_probs.setflags(write=False)
    cache = _ForwardCache(
        params=params,
        states=state_caches,
        embeddings=emb_all,
        prune_hidden=prune_hidden,
        prune_sigmoid=prune_sigmoid,
        clamp_active=clamp_active,
        pooled=pooled,
        epoch_hidden=epoch_hidden,
        mu=mu,
    )
    return PolicyOutput(
        keep_probs=keep_probs,
        epoch_mu=mu,
        filter_counts=tuple(wt.num_filters for wt in states),
        layer_indices=layer_indices,
        cache=cache,
    )


def policy_backward(
    params: PolicyParams,
    output: PolicyOutput,
    prune_coeffs: np.ndarray,
    epoch_coeff: float,
) -> np.ndarray:
    """Gradient of ``sum_i g_i * p_i + h * mu`` w.r.t. all parameters.

    ``prune_coeffs`` (g) has one entry per filter across all state tensors of
    the forward pass; ``epoch_coeff`` (h) weights the epoch mean.  Linear in
    the coefficients.  Returns the flat gradient vector in ``to_vector``
    layout.  Raises if ``output`` was produced by different params.
    """
    cache = output.cache
    if cache.params is not params:
        raise ValueError("stale cache: output was computed with different parameters")
    g = np.asarray(prune_coeffs, dtype=np.float64).reshape(-1)
    n_total = cache.embeddings.shape[0]
    if g.shape != (n_total,):
        raise ValueError(f"expected {n_total} prune coefficients, got shape {g.shape}")

    grad_conv_w = [np.zeros_like(w) for w in params.conv_w]
    grad_conv_b = [np.zeros_like(b) for b in params.conv_b]

    # Prune head: p = clip(sigmoid(z)); the clamp has zero slope where active.
    sig = cache.prune_sigmoid
    dlogit = g * sig * (1.0 - sig)
    dlogit[cache.clamp_active] = 0.0
    grad_pw2 = (dlogit[None, :] @ cache.prune_hidden).reshape(1, HEAD_HIDDEN)
    grad_pb2 = np.array([dlogit.sum()])
    dhidden = np.outer(dlogit, params.prune_w[1].reshape(-1))
    dhidden *= cache.prune_hidden > 0
    grad_pw1 = dhidden.T @ cache.embeddings
    grad_pb1 = dhidden.sum(axis=0)
    demb = dhidden @ params.prune_w[0]

    # Epoch head: mu = sigmoid(w2 @ relu(w1 @ pooled + b1) + b2).
    mu = cache.mu
    dez = epoch_coeff * mu * (1.0 - mu)
    grad_ew2 = (dez * cache.epoch_hidden).reshape(1, HEAD_HIDDEN)
    grad_eb2 = np.array([dez])
    deh = dez * params.epoch_w[1].reshape(-1)
    deh *= cache.epoch_hidden > 0
    grad_ew1 = np.outer(deh, cache.pooled)
    grad_eb1 = deh.copy()
    dpooled = params.epoch_w[0].T @ deh
    demb = demb + dpooled[None, :] / n_total

    # Conv stack, one state tensor at a time (their lengths differ).
    offset = 0
    for sc, count in zip(cache.states, output.filter_counts):
        demb_s = demb[offset : offset + count]
        offset += count
        dh = np.repeat(demb_s[:, :, None], sc.final_len, axis=2) / sc.final_len
        for stage in reversed(range(len(params.conv_w))):
            z = sc.pre_act[stage]
            dz = dh * (z > 0)
            n, c_out, out_len = dz.shape
            flat = sc.windows[stage]
            dz_flat = dz.transpose(0, 2, 1).reshape(n * out_len, c_out)
            dw = dz_flat.T @ flat.reshape(n * out_len, -1)
            grad_conv_w[stage] += dw.reshape(grad_conv_w[stage].shape)
            grad_conv_b[stage] += dz.sum(axis=(0, 2))
            if stage == 0:
                break  # input is data, not parameters
            w = params.conv_w[stage]
            dpadded = np.zeros_like(sc.padded[stage])
            for t in range(CONV_KERNEL):
                contrib = (dz.transpose(0, 2, 1) @ w[:, :, t]).transpose(0, 2, 1)
                dpadded[:, :, t : t + CONV_STRIDE * out_len : CONV_STRIDE] += contrib
            dh = dpadded[:, :, CONV_PAD:-CONV_PAD]

    pieces: list[np.ndarray] = []
    for gw, gb in zip(grad_conv_w, grad_conv_b):
        pieces.extend([gw.reshape(-1), gb.reshape(-1)])
    pieces.extend(
        [
            grad_pw1.reshape(-1),
            grad_pb1.reshape(-1),
            grad_pw2.reshape(-1),
            grad_pb2.reshape(-1),
            grad_ew1.reshape(-1),
            grad_eb1.reshape(-1),
            grad_ew2.reshape(-1),
            grad_eb2.reshape(-1),
        ]
    )
    return np.concatenate(pieces)


def sample_actions(
    output: PolicyOutput,
    sigma: SigmaSchedule | float,
    num_samples: int,
    rng: np.random.Generator | int,
) -> list[ActionSet]:
    """Draw M independent joint actions from the policy output.

    Each filter's keep bit comes from its own Bernoulli unit; the epoch action
    is Normal(mu, sigma^2) and is stored raw, without truncation.
    Reproducible given the same seed.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    sigma_value = sigma.sigma if isinstance(sigma, SigmaSchedule) else float(sigma)
    if sigma_value <= 0:
        raise ValueError("sigma must be > 0")

    actions: list[ActionSet] = []
    for j in range(num_samples):
        bits_all = (rng.random(output.keep_probs.shape[0]) < output.keep_probs).astype(int)
        masks = []
        start = 0
        for layer_index, count in zip(output.layer_indices, output.filter_counts):
            masks.append(PruneMask(layer_index, tuple(bits_all[start : start + count])))
            start += count
        a_raw = float(rng.normal(output.epoch_mu, sigma_value))
        actions.append(ActionSet(masks=tuple(masks), epoch_action_raw=a_raw, sample_index=j))
    return actions


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    """Write a checkpoint: JSON with an architecture header and the flat parameter list."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": _ARCHITECTURE,
        "parameters": params.to_vector().tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> PolicyParams:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    if payload.get("architecture") != _ARCHITECTURE:
        raise ValueError("checkpoint architecture does not match this build")
    return PolicyParams.from_vector(np.asarray(payload["parameters"], dtype=np.float64))
