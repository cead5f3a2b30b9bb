"""Environment abstraction and the analytic synthetic environment.

The environment owns the model being pruned.  ``evaluate`` answers "what
accuracy would this mask reach after this much fine-tuning" without touching
committed state, so the M Monte-Carlo evaluations of an episode all start from
the same checkpoint.  ``commit`` applies masks permanently, including zeroing
the matching input kernels of the next prunable layer.

The synthetic environment is a closed-form stand-in used for verification:
every filter carries a known importance, pruning it costs accuracy, and
fine-tuning linearly recovers part of that cost up to a saturation point.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .core import LayerSpec, ModelTopology, PruneMask, TopologyError, WeightTensor

__all__ = [
    "EnvError",
    "Environment",
    "SyntheticEnvConfig",
    "SyntheticEnvironment",
]


class EnvError(RuntimeError):
    """Base class for environment failures (transport, backend, protocol)."""


class Environment(ABC):
    """What the orchestrator needs from the model being pruned."""

    @abstractmethod
    def topology(self) -> ModelTopology:
        """Layer table plus the masks committed so far."""

    @abstractmethod
    def state_of(self, layer_index: int) -> WeightTensor:
        """Current weight tensor of one layer (zeroed entries included)."""

    @abstractmethod
    def evaluate(
        self, masks: Sequence[PruneMask], epochs: float, sample_index: int = 0
    ) -> float:
        """Accuracy after tentatively applying ``masks`` and fine-tuning ``epochs``.

        Must not mutate committed state: repeated calls with identical
        arguments return identical accuracies.
        """

    @abstractmethod
    def commit(self, masks: Sequence[PruneMask]) -> None:
        """Permanently apply masks (filter zeroing plus next-layer kernel zeroing)."""

    @abstractmethod
    def final_finetune(self, epochs: float) -> float:
        """Fine-tune the committed model and return its accuracy."""

    @abstractmethod
    def base_accuracy(self) -> float:
        """Accuracy of the committed model, percentage points."""

    @property
    def supports_parallel_eval(self) -> bool:
        return False

    def close(self) -> None:  # pragma: no cover - trivial default
        pass


@dataclass(frozen=True)
class SyntheticEnvConfig:
    """Closed-form environment: per-filter importances drive accuracy damage.

    Pruning filter i of a layer costs ``damage_scale * s_i`` accuracy points,
    of which the fraction recoverable by fine-tuning shrinks linearly until
    ``recovery_saturation`` epochs, plus a permanent ``residual_scale * s_i``.
    ``residual_scale`` defaults to a tenth of ``damage_scale``.
    """

    layers: tuple[tuple[int, int, int], ...]
    importance: tuple[tuple[float, ...], ...]
    acc_base: float = 92.0
    damage_scale: float = 1.0
    residual_scale: float | None = None
    recovery_saturation: float = 4.0
    seed: int = 0
    prunable: tuple[bool, ...] | None = None
    block_ids: tuple[int | None, ...] | None = None

    def __post_init__(self) -> None:
        layers = tuple(tuple(int(v) for v in layer) for layer in self.layers)
        importance = tuple(tuple(float(s) for s in row) for row in self.importance)
        if not layers:
            raise ValueError("synthetic environment needs at least one layer")
        if len(importance) != len(layers):
            raise ValueError("importance rows must match the layer count")
        for (n, c, k), row in zip(layers, importance):
            if n < 1 or c < 1 or k < 1:
                raise ValueError("layer dims must be >= 1")
            if len(row) != n:
                raise ValueError(f"importance row length {len(row)} != N={n}")
            if any(s < 0 for s in row):
                raise ValueError("importances must be >= 0")
        if self.damage_scale < 0:
            raise ValueError("damage_scale must be >= 0")
        if self.residual_scale is not None and self.residual_scale < 0:
            raise ValueError("residual_scale must be >= 0")
        if self.recovery_saturation <= 0:
            raise ValueError("recovery_saturation must be > 0")
        prunable = self.prunable
        if prunable is not None:
            prunable = tuple(bool(p) for p in prunable)
            if len(prunable) != len(layers):
                raise ValueError("prunable flags must match the layer count")
        block_ids = self.block_ids
        if block_ids is not None:
            block_ids = tuple(None if b is None else int(b) for b in block_ids)
            if len(block_ids) != len(layers):
                raise ValueError("block ids must match the layer count")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "importance", importance)
        object.__setattr__(self, "prunable", prunable)
        object.__setattr__(self, "block_ids", block_ids)

    @property
    def effective_residual_scale(self) -> float:
        if self.residual_scale is not None:
            return self.residual_scale
        return 0.1 * self.damage_scale

    def to_dict(self) -> dict[str, Any]:
        return {
            "layers": [list(layer) for layer in self.layers],
            "importance": [list(row) for row in self.importance],
            "acc_base": self.acc_base,
            "damage_scale": self.damage_scale,
            "residual_scale": self.residual_scale,
            "recovery_saturation": self.recovery_saturation,
            "seed": self.seed,
            "prunable": None if self.prunable is None else list(self.prunable),
            "block_ids": None if self.block_ids is None else list(self.block_ids),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SyntheticEnvConfig":
        known = {
            "layers",
            "importance",
            "acc_base",
            "damage_scale",
            "residual_scale",
            "recovery_saturation",
            "seed",
            "prunable",
            "block_ids",
        }
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synthetic environment fields: {sorted(unknown)}")
        kwargs = dict(data)
        kwargs["layers"] = tuple(tuple(layer) for layer in kwargs["layers"])
        kwargs["importance"] = tuple(tuple(row) for row in kwargs["importance"])
        if kwargs.get("prunable") is not None:
            kwargs["prunable"] = tuple(kwargs["prunable"])
        if kwargs.get("block_ids") is not None:
            kwargs["block_ids"] = tuple(kwargs["block_ids"])
        return cls(**kwargs)


class SyntheticEnvironment(Environment):
    """Deterministic environment with analytically known optima.

    Weight tensors are generated once (seeded) with per-filter norms equal to
    the filter's importance, so the observable state correlates with what is
    safe to prune.  Evaluation is pure; commits mutate the stored weights and
    the committed accuracy.
    """

    def __init__(self, config: SyntheticEnvConfig) -> None:
        self._cfg = config
        self._specs: list[LayerSpec] = []
        for idx, (n, c, k) in enumerate(config.layers):
            self._specs.append(
                LayerSpec(
                    layer_index=idx,
                    num_filters=n,
                    in_channels=c,
                    kernel_size=k,
                    block_id=None if config.block_ids is None else config.block_ids[idx],
                    prunable=True if config.prunable is None else config.prunable[idx],
                )
            )
        self._weights: list[np.ndarray] = []
        for idx, ((n, c, k), row) in enumerate(zip(config.layers, config.importance)):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=config.seed, spawn_key=(idx,))
            )
            w = rng.normal(size=(n, c, k, k))
            for i, s in enumerate(row):
                norm = np.linalg.norm(w[i])
                w[i] = np.zeros((c, k, k)) if s == 0.0 or norm == 0.0 else w[i] * (s / norm)
            self._weights.append(w)
        self._committed: dict[int, PruneMask] = {}
        self._acc = float(config.acc_base)
        self._pending_recoverable = 0.0

    # -- helpers -------------------------------------------------------

    def _check_masks(self, masks: Sequence[PruneMask]) -> None:
        seen = set()
        for mask in masks:
            if mask.layer_index in seen:
                raise TopologyError(f"duplicate mask for layer {mask.layer_index}")
            seen.add(mask.layer_index)
            if mask.layer_index < 0 or mask.layer_index >= len(self._specs):
                raise TopologyError(f"unknown layer {mask.layer_index}")
            spec = self._specs[mask.layer_index]
            if not spec.prunable:
                raise TopologyError(f"layer {mask.layer_index} is not prunable")
            if mask.num_filters != spec.num_filters:
                raise TopologyError(
                    f"mask length {mask.num_filters} != N={spec.num_filters} "
                    f"of layer {mask.layer_index}"
                )

    def _newly_pruned(self, mask: PruneMask) -> list[int]:
        committed = self._committed.get(mask.layer_index)
        already = set() if committed is None else set(committed.pruned_indices())
        return [i for i in mask.pruned_indices() if i not in already]

    def _recovery_deficit(self, epochs: float) -> float:
        return max(0.0, 1.0 - epochs / self._cfg.recovery_saturation)

    # -- Environment interface -----------------------------------------

    @property
    def config(self) -> SyntheticEnvConfig:
        return self._cfg

    def topology(self) -> ModelTopology:
        return ModelTopology(tuple(self._specs), dict(self._committed))

    def state_of(self, layer_index: int) -> WeightTensor:
        if layer_index < 0 or layer_index >= len(self._specs):
            raise TopologyError(f"unknown layer {layer_index}")
        return WeightTensor(self._weights[layer_index].copy())

    def evaluate(
        self, masks: Sequence[PruneMask], epochs: float, sample_index: int = 0
    ) -> float:
        if epochs < 0:
            raise ValueError("epochs must be >= 0")
        self._check_masks(masks)
        alpha = self._cfg.damage_scale
        alpha_res = self._cfg.effective_residual_scale
        deficit = self._recovery_deficit(epochs)
        damage = 0.0
        for mask in masks:
            row = self._cfg.importance[mask.layer_index]
            for i in self._newly_pruned(mask):
                damage += alpha * row[i] * deficit + alpha_res * row[i]
        return self._acc - damage

    def commit(self, masks: Sequence[PruneMask]) -> None:
        self._check_masks(masks)
        alpha = self._cfg.damage_scale
        alpha_res = self._cfg.effective_residual_scale
        topo = self.topology()
        for mask in masks:
            new_idx = self._newly_pruned(mask)
            row = self._cfg.importance[mask.layer_index]
            for i in new_idx:
                self._acc -= alpha * row[i] + alpha_res * row[i]
                self._pending_recoverable += alpha * row[i]
                self._weights[mask.layer_index][i] = 0.0
            nxt = topo.next_prunable(mask.layer_index)
            if nxt is not None and new_idx:
                if max(new_idx) >= nxt.in_channels:
                    raise TopologyError(
                        f"cannot propagate filter {max(new_idx)} of layer "
                        f"{mask.layer_index} into layer {nxt.layer_index} "
                        f"with {nxt.in_channels} channels"
                    )
                self._weights[nxt.layer_index][:, new_idx] = 0.0
            existing = self._committed.get(mask.layer_index)
            self._committed[mask.layer_index] = (
                mask if existing is None else existing.intersect(mask)
            )

    def final_finetune(self, epochs: float) -> float:
        if epochs < 0:
            raise ValueError("epochs must be >= 0")
        fraction = min(1.0, epochs / self._cfg.recovery_saturation)
        recovered = self._pending_recoverable * fraction
        self._acc += recovered
        self._pending_recoverable -= recovered
        return self._acc

    def base_accuracy(self) -> float:
        return self._acc

    @property
    def supports_parallel_eval(self) -> bool:
        return True
