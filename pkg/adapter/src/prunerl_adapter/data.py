"""Datasets and the train / eval / test split.

Two sources:

* ``synthetic:<n>`` - n seeded Gaussian class-blob images, no files needed;
  this is the reduced dataset used by the integration tests.
* ``cifar10:<dir>`` - CIFAR-10 from an existing torchvision data directory
  (no download attempted here).

The split follows the 45k/5k/10k proportions: the test fifth is held out, the
rest splits 90/10 into train and eval with a one-time seeded shuffle.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

NUM_CLASSES = 10


@dataclass
class DataSplits:
    train_x: torch.Tensor
    train_y: torch.Tensor
    eval_x: torch.Tensor
    eval_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor


def synthetic_dataset(total: int, image_size: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Class-conditional Gaussian blobs: learnable but not trivial."""
    gen = torch.Generator().manual_seed(seed)
    means = torch.randn(NUM_CLASSES, 3, image_size, image_size, generator=gen)
    labels = torch.randint(0, NUM_CLASSES, (total,), generator=gen)
    noise = torch.randn(total, 3, image_size, image_size, generator=gen)
    images = means[labels] + 0.8 * noise
    return images, labels


def load_cifar10(root: str) -> tuple[torch.Tensor, torch.Tensor]:
    import numpy as np
    from torchvision.datasets import CIFAR10

    train = CIFAR10(root, train=True, download=False)
    test = CIFAR10(root, train=False, download=False)
    images = np.concatenate([train.data, test.data]).astype("float32") / 255.0
    labels = list(train.targets) + list(test.targets)
    x = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    std = x.std(dim=(0, 2, 3), keepdim=True)
    return (x - mean) / std, torch.tensor(labels)


def make_splits(spec: str, image_size: int, seed: int) -> DataSplits:
    kind, _, arg = spec.partition(":")
    if kind == "synthetic":
        total = int(arg) if arg else 640
        x, y = synthetic_dataset(total, image_size, seed)
    elif kind == "cifar10":
        if not arg:
            raise ValueError("cifar10 needs a data directory: cifar10:<dir>")
        x, y = load_cifar10(arg)
    else:
        raise ValueError(f"unknown dataset spec {spec!r}")

    gen = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(y), generator=gen)
    x, y = x[order], y[order]
    n_test = max(1, len(y) // 5)
    n_rest = len(y) - n_test
    n_eval = max(1, n_rest // 10)
    n_train = n_rest - n_eval
    return DataSplits(
        train_x=x[:n_train],
        train_y=y[:n_train],
        eval_x=x[n_train : n_train + n_eval],
        eval_y=y[n_train : n_train + n_eval],
        test_x=x[n_rest:],
        test_y=y[n_rest:],
    )
