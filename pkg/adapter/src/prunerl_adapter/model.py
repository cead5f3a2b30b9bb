"""Small CIFAR-style residual networks with identity (zero-pad) shortcuts.

No shortcut convolutions: downsampling blocks subsample the identity and pad
the missing channels with zeros, so the network's convolutions form a plain
chain for masking purposes.  ``conv_table`` enumerates them in forward order;
the stem convolution is reported as non-prunable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.stride = stride
        self.pad_channels = out_channels - in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x
        if self.stride != 1:
            shortcut = shortcut[:, :, :: self.stride, :: self.stride]
        if self.pad_channels > 0:
            shortcut = F.pad(shortcut, (0, 0, 0, 0, 0, self.pad_channels))
        return F.relu(out + shortcut)


class ResidualNet(nn.Module):
    """Stem conv + 3 stages of blocks + global average pooling + classifier."""

    def __init__(self, blocks_per_stage: int, base_width: int, num_classes: int = 10) -> None:
        super().__init__()
        self.stem = nn.Conv2d(3, base_width, 3, 1, 1, bias=False)
        self.stem_bn = nn.BatchNorm2d(base_width)
        stages = []
        in_ch = base_width
        for stage_idx, width in enumerate((base_width, 2 * base_width, 4 * base_width)):
            for block_idx in range(blocks_per_stage):
                stride = 2 if stage_idx > 0 and block_idx == 0 else 1
                stages.append(BasicBlock(in_ch, width, stride))
                in_ch = width
        self.blocks = nn.ModuleList(stages)
        self.classifier = nn.Linear(in_ch, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            out = block(out)
        out = out.mean(dim=(2, 3))
        return self.classifier(out)


@dataclass(frozen=True)
class ConvEntry:
    """One convolution in forward order, with its batch norm and block tag."""

    index: int
    conv: nn.Conv2d
    bn: nn.BatchNorm2d
    block_id: int | None
    prunable: bool


def conv_table(model: ResidualNet) -> list[ConvEntry]:
    entries = [ConvEntry(0, model.stem, model.stem_bn, None, False)]
    index = 1
    for block_id, block in enumerate(model.blocks):
        entries.append(ConvEntry(index, block.conv1, block.bn1, block_id, True))
        entries.append(ConvEntry(index + 1, block.conv2, block.bn2, block_id, True))
        index += 2
    return entries


_VARIANTS = {
    # name: (blocks per stage, base width)
    "resnet20": (3, 16),
    "resnet14": (2, 16),
    "resnet8": (1, 8),
}


def build_model(name: str) -> ResidualNet:
    if name not in _VARIANTS:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(_VARIANTS)}")
    blocks, width = _VARIANTS[name]
    return ResidualNet(blocks, width)
