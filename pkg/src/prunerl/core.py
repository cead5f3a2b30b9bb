"""Shared domain types and compression-ratio accounting.

Conventions used throughout the package:

* A mask bit of 1 keeps a filter, 0 prunes it.
* Weight tensors are stored row-major, filter-first: shape (N, c, k, k).
* Accuracies are percentage points in [0, 100].

All types here are immutable value objects; they can be shared across
threads freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "LayerSpec",
    "WeightTensor",
    "PruneMask",
    "ActionSet",
    "ModelTopology",
    "TopologyError",
    "layer_cr",
    "model_cr",
]


class TopologyError(ValueError):
    """A layer reference or committed mask is inconsistent with the topology."""


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one convolutional layer.

    ``block_id`` groups the two prunable convolutions of a residual block;
    ``None`` means the layer does not belong to a block.
    """

    layer_index: int
    num_filters: int
    in_channels: int
    kernel_size: int
    block_id: int | None = None
    prunable: bool = True

    def __post_init__(self) -> None:
        if self.layer_index < 0:
            raise ValueError(f"layer_index must be >= 0, got {self.layer_index}")
        for name in ("num_filters", "in_channels", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def weight_count(self) -> int:
        return self.num_filters * self.in_channels * self.kernel_size**2


@dataclass(frozen=True)
class WeightTensor:
    """Immutable 4-D weight tensor of one layer, shape (N, c, k, k)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"expected 4-D weights (N, c, k, k), got shape {arr.shape}")
        if arr.shape[2] != arr.shape[3]:
            raise ValueError(f"kernel must be square, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("weight tensor contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_flat(cls, dims: Sequence[int], flat: Sequence[float]) -> "WeightTensor":
        n, c, k1, k2 = dims
        flat_arr = np.asarray(flat, dtype=np.float64)
        if flat_arr.size != n * c * k1 * k2:
            raise ValueError(
                f"flat length {flat_arr.size} does not match dims {tuple(dims)}"
            )
        return cls(flat_arr.reshape(n, c, k1, k2))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def num_filters(self) -> int:
        return self.values.shape[0]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def filter_vectors(self) -> np.ndarray:
        """Per-filter flattened view, shape (N, c*k*k)."""
        n = self.values.shape[0]
        return self.values.reshape(n, -1)


@dataclass(frozen=True)
class PruneMask:
    """Keep/prune decision for every filter of one layer (1=keep, 0=prune)."""

    layer_index: int
    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        bits = tuple(int(b) for b in self.bits)
        if len(bits) == 0:
            raise ValueError("mask must cover at least one filter")
        if any(b not in (0, 1) for b in bits):
            raise ValueError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @property
    def num_filters(self) -> int:
        return len(self.bits)

    @property
    def pruned_count(self) -> int:
        """n: how many filters this mask removes."""
        return self.bits.count(0)

    @property
    def kept_count(self) -> int:
        return self.bits.count(1)

    def pruned_indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b == 0)

    def intersect(self, other: "PruneMask") -> "PruneMask":
        """Combine two masks for the same layer; a filter survives only if kept by both."""
        if other.layer_index != self.layer_index or other.num_filters != self.num_filters:
            raise ValueError("masks are not comparable")
        return PruneMask(self.layer_index, tuple(a & b for a, b in zip(self.bits, other.bits)))

    def to_text(self) -> str:
        """Wire/log form: ``<layer>:<bitstring>``, e.g. ``7:110101``."""
        return f"{self.layer_index}:{''.join(str(b) for b in self.bits)}"

    @classmethod
    def from_text(cls, text: str) -> "PruneMask":
        try:
            idx_str, bit_str = text.split(":", 1)
            idx = int(idx_str)
        except ValueError as exc:
            raise ValueError(f"malformed mask text {text!r}") from exc
        if not bit_str or set(bit_str) - {"0", "1"}:
            raise ValueError(f"malformed mask bitstring in {text!r}")
        return cls(idx, tuple(int(ch) for ch in bit_str))

    @classmethod
    def all_keep(cls, layer_index: int, num_filters: int) -> "PruneMask":
        return cls(layer_index, (1,) * num_filters)


@dataclass(frozen=True)
class ActionSet:
    """One sampled joint action: per-layer masks plus the raw epoch action.

    ``epoch_action_raw`` is stored exactly as sampled; clamping to [0, 1]
    happens only when epochs are handed to the environment, never here.
    """

    masks: tuple[PruneMask, ...]
    epoch_action_raw: float
    sample_index: int

    def __post_init__(self) -> None:
        masks = tuple(self.masks)
        if not masks:
            raise ValueError("action must carry at least one mask")
        if not np.isfinite(self.epoch_action_raw):
            raise ValueError("epoch action must be finite")
        if self.sample_index < 0:
            raise ValueError("sample_index must be >= 0")
        object.__setattr__(self, "masks", masks)

    def concatenated_bits(self) -> tuple[int, ...]:
        out: list[int] = []
        for m in self.masks:
            out.extend(m.bits)
        return tuple(out)

    def total_pruned(self) -> int:
        return sum(m.pruned_count for m in self.masks)


@dataclass(frozen=True)
class ModelTopology:
    """Ordered layer list plus the masks committed so far."""

    layers: tuple[LayerSpec, ...]
    committed_masks: Mapping[int, PruneMask] = field(default_factory=dict)

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise TopologyError("topology needs at least one layer")
        for pos, spec in enumerate(layers):
            if spec.layer_index != pos:
                raise TopologyError(
                    f"layer at position {pos} carries index {spec.layer_index}"
                )
        blocks: dict[int, list[LayerSpec]] = {}
        for spec in layers:
            if spec.block_id is not None:
                blocks.setdefault(spec.block_id, []).append(spec)
        for block_id, members in blocks.items():
            prunable = [m for m in members if m.prunable]
            if len(members) != 2 or len(prunable) != 2:
                raise TopologyError(
                    f"block {block_id} must contain exactly two prunable layers"
                )
        masks = dict(self.committed_masks)
        for idx, mask in masks.items():
            if idx < 0 or idx >= len(layers):
                raise TopologyError(f"committed mask for unknown layer {idx}")
            spec = layers[idx]
            if not spec.prunable:
                raise TopologyError(f"committed mask on non-prunable layer {idx}")
            if mask.layer_index != idx:
                raise TopologyError(f"mask layer index {mask.layer_index} filed under {idx}")
            if mask.num_filters != spec.num_filters:
                raise TopologyError(
                    f"mask length {mask.num_filters} != N={spec.num_filters} of layer {idx}"
                )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "committed_masks", MappingProxyType(masks))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def prunable_indices(self) -> tuple[int, ...]:
        return tuple(spec.layer_index for spec in self.layers if spec.prunable)

    def preceding_prunable(self, layer_index: int) -> LayerSpec | None:
        for spec in reversed(self.layers[:layer_index]):
            if spec.prunable:
                return spec
        return None

    def next_prunable(self, layer_index: int) -> LayerSpec | None:
        for spec in self.layers[layer_index + 1 :]:
            if spec.prunable:
                return spec
        return None

    def with_masks(self, masks: Iterable[PruneMask]) -> "ModelTopology":
        """New topology with extra committed masks (intersected with existing)."""
        merged = dict(self.committed_masks)
        for mask in masks:
            existing = merged.get(mask.layer_index)
            merged[mask.layer_index] = mask if existing is None else existing.intersect(mask)
        return ModelTopology(self.layers, merged)


def _upstream_pruned(topology: ModelTopology, layer_index: int) -> int:
    prev = topology.preceding_prunable(layer_index)
    if prev is None:
        return 0
    mask = topology.committed_masks.get(prev.layer_index)
    return 0 if mask is None else mask.pruned_count


def layer_cr(topology: ModelTopology, layer_index: int) -> float:
    """Layer compression ratio: fraction of this layer's input channels that survive.

    Computed as (c - n_prev) / c where n_prev is the number of filters pruned
    from the nearest preceding prunable layer (0 when nothing upstream is
    committed).  1.0 means the layer is untouched from upstream.
    """
    if layer_index < 0 or layer_index >= topology.num_layers:
        raise TopologyError(f"unknown layer index {layer_index}")
    spec = topology.layers[layer_index]
    n_prev = _upstream_pruned(topology, layer_index)
    if n_prev > spec.in_channels:
        raise TopologyError(
            f"upstream prunes {n_prev} filters but layer {layer_index} has only "
            f"{spec.in_channels} input channels"
        )
    return (spec.in_channels - n_prev) / spec.in_channels


def model_cr(topology: ModelTopology) -> float:
    """Model compression ratio: original weight count over surviving non-zero weights.

    A committed mask zeroes the pruned filters of its own layer and the
    matching input kernels of the next prunable layer, so a kept filter
    downstream of pruning also loses weights.  Only convolutional weights are
    counted (no biases, no normalization parameters).
    """
    total = 0
    surviving = 0
    for spec in topology.layers:
        total += spec.weight_count
        mask = topology.committed_masks.get(spec.layer_index)
        kept = spec.num_filters if mask is None else mask.kept_count
        prev = topology.preceding_prunable(spec.layer_index)
        channels = spec.in_channels
        if spec.prunable and prev is not None:
            prev_mask = topology.committed_masks.get(prev.layer_index)
            if prev_mask is not None:
                pruned_idx = prev_mask.pruned_indices()
                if pruned_idx and max(pruned_idx) >= spec.in_channels:
                    raise TopologyError(
                        f"layer {prev.layer_index} prunes filter {max(pruned_idx)} but "
                        f"layer {spec.layer_index} has only {spec.in_channels} channels"
                    )
                channels -= len(pruned_idx)
        surviving += kept * channels * spec.kernel_size**2
    if surviving == 0:
        raise TopologyError("no weights survive the committed masks (degenerate model)")
    return total / surviving
