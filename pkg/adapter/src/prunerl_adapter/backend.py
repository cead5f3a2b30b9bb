"""Model backend: mask semantics, fine-tuning, and checkpoint isolation.

Pruning filter i of convolution L zeroes that filter's weights and the
batch-norm scale/shift of channel i (so the channel's output is exactly zero,
residual shortcuts keep flowing), and zeroes kernel i of every filter in the
next convolution.  Masks are re-applied after every optimizer step so
fine-tuning can never resurrect a pruned channel.

``evaluate`` deep-copies the committed weights, applies the candidate masks,
fine-tunes, measures eval-split accuracy, and restores the copy; repeated
calls with the same masks and epochs are bit-identical because each call uses
a fresh optimizer and the same seeded batch order.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch

from .data import DataSplits, make_splits
from .model import ConvEntry, build_model, conv_table

BATCH_SIZE = 128
FINETUNE_LR = 0.001
FINETUNE_MOMENTUM = 0.9
LR_GAMMA = 0.5
LR_STEP_SIZE = 1900  # optimizer steps
WEIGHT_DECAY = 1e-4


class BackendFault(RuntimeError):
    """Raised for requests the backend cannot serve; reported over the wire."""


@dataclass(frozen=True)
class LayerInfo:
    index: int
    num_filters: int
    in_channels: int
    kernel_size: int
    block_id: int | None
    prunable: bool


class ModelBackend:
    def __init__(self, model_name: str, data_spec: str, image_size: int, seed: int,
                 device: str = "cpu", pretrain_epochs: float = 0.0) -> None:
        torch.manual_seed(seed)
        self.device = torch.device(device)
        self.model = build_model(model_name).to(self.device)
        self.entries: list[ConvEntry] = conv_table(self.model)
        self.splits: DataSplits = make_splits(data_spec, image_size, seed)
        for name in ("train_x", "train_y", "eval_x", "eval_y", "test_x", "test_y"):
            setattr(self.splits, name, getattr(self.splits, name).to(self.device))
        self.seed = seed
        # committed mask per layer: float tensor of N entries, 1 = keep
        self.masks: dict[int, torch.Tensor] = {}
        if pretrain_epochs > 0:
            self._finetune(pretrain_epochs, {})
        self._acc_base = self.eval_accuracy()

    # -- topology -------------------------------------------------------

    def layer_table(self) -> list[LayerInfo]:
        out = []
        for e in self.entries:
            w = e.conv.weight
            out.append(
                LayerInfo(
                    index=e.index,
                    num_filters=w.shape[0],
                    in_channels=w.shape[1],
                    kernel_size=w.shape[2],
                    block_id=e.block_id,
                    prunable=e.prunable,
                )
            )
        return out

    def state_of(self, layer: int) -> torch.Tensor:
        return self._entry(layer).conv.weight.detach().cpu().clone()

    def base_accuracy(self) -> float:
        return self._acc_base

    def _entry(self, layer: int) -> ConvEntry:
        if layer < 0 or layer >= len(self.entries):
            raise BackendFault(f"unknown layer {layer}")
        return self.entries[layer]

    # -- masking --------------------------------------------------------

    def _validated(self, wire_masks: list[dict]) -> dict[int, torch.Tensor]:
        seen: dict[int, torch.Tensor] = {}
        for item in wire_masks:
            layer = int(item["layer"])
            bits_str = str(item["bits"])
            entry = self._entry(layer)
            if not entry.prunable:
                raise BackendFault(f"layer {layer} is not prunable")
            n = entry.conv.weight.shape[0]
            if len(bits_str) != n or set(bits_str) - {"0", "1"}:
                raise BackendFault(f"mask for layer {layer} must be {n} bits of 0/1")
            if layer in seen:
                raise BackendFault(f"duplicate mask for layer {layer}")
            seen[layer] = torch.tensor(
                [float(ch) for ch in bits_str], device=self.device
            )
        return seen

    def _merged_with_committed(self, new: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        merged = {k: v.clone() for k, v in self.masks.items()}
        for layer, bits in new.items():
            merged[layer] = bits if layer not in merged else merged[layer] * bits
        return merged

    def _apply_masks(self, masks: dict[int, torch.Tensor]) -> None:
        with torch.no_grad():
            for layer, bits in masks.items():
                entry = self.entries[layer]
                keep = bits.view(-1, 1, 1, 1)
                entry.conv.weight.mul_(keep)
                entry.bn.weight.mul_(bits)
                entry.bn.bias.mul_(bits)
                nxt = self._next_prunable(layer)
                if nxt is not None:
                    pruned = (bits == 0).nonzero(as_tuple=True)[0]
                    if len(pruned) > 0:
                        nxt.conv.weight[:, pruned] = 0.0

    def _next_prunable(self, layer: int) -> ConvEntry | None:
        for entry in self.entries[layer + 1 :]:
            if entry.prunable:
                return entry
        return None

    # -- training and measurement ---------------------------------------

    def eval_accuracy(self) -> float:
        self.model.eval()
        correct = 0
        with torch.no_grad():
            x, y = self.splits.eval_x, self.splits.eval_y
            for start in range(0, len(y), BATCH_SIZE):
                logits = self.model(x[start : start + BATCH_SIZE])
                correct += int((logits.argmax(dim=1) == y[start : start + BATCH_SIZE]).sum())
        return 100.0 * correct / len(y)

    def _finetune(self, epochs: float, masks: dict[int, torch.Tensor]) -> None:
        """Mask-preserving fine-tuning: whole epochs plus a fractional prefix.

        A fresh optimizer and a fixed-seed batch order per call keep repeated
        evaluations identical.
        """
        if epochs <= 0:
            return
        x, y = self.splits.train_x, self.splits.train_y
        batches_per_epoch = math.ceil(len(y) / BATCH_SIZE)
        whole = int(epochs)
        fraction = epochs - whole
        total_batches = whole * batches_per_epoch + round(fraction * batches_per_epoch)
        if total_batches == 0:
            return

        optimizer = torch.optim.SGD(
            self.model.parameters(),
            lr=FINETUNE_LR,
            momentum=FINETUNE_MOMENTUM,
            weight_decay=WEIGHT_DECAY,
        )
        scheduler = torch.optim.lr_scheduler.StepLR(
            optimizer, step_size=LR_STEP_SIZE, gamma=LR_GAMMA
        )
        loss_fn = torch.nn.CrossEntropyLoss()
        gen = torch.Generator().manual_seed(self.seed)
        self.model.train()
        done = 0
        while done < total_batches:
            order = torch.randperm(len(y), generator=gen).to(self.device)
            for start in range(0, len(y), BATCH_SIZE):
                if done >= total_batches:
                    break
                idx = order[start : start + BATCH_SIZE]
                optimizer.zero_grad()
                loss = loss_fn(self.model(x[idx]), y[idx])
                loss.backward()
                optimizer.step()
                scheduler.step()
                self._apply_masks(masks)
                done += 1
        self.model.eval()

    # -- protocol-level operations ---------------------------------------

    def evaluate(self, wire_masks: list[dict], epochs: float) -> float:
        if epochs < 0:
            raise BackendFault("epochs must be >= 0")
        masks = self._merged_with_committed(self._validated(wire_masks))
        snapshot = copy.deepcopy(self.model.state_dict())
        try:
            self._apply_masks(masks)
            self._finetune(epochs, masks)
            return self.eval_accuracy()
        finally:
            self.model.load_state_dict(snapshot)

    def commit(self, wire_masks: list[dict], final_epochs: float) -> float:
        if final_epochs < 0:
            raise BackendFault("final_epochs must be >= 0")
        self.masks = self._merged_with_committed(self._validated(wire_masks))
        self._apply_masks(self.masks)
        self._finetune(final_epochs, self.masks)
        self._acc_base = self.eval_accuracy()
        return self._acc_base
