"""Launch the backend and serve the pruning protocol on stdio."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .backend import ModelBackend
from .server import serve


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="prunerl-adapter",
        description="Model backend for prunerl over line-delimited JSON on stdio",
    )
    parser.add_argument("--model", default="resnet20",
                        help="resnet20, resnet14, or resnet8")
    parser.add_argument("--data", default="synthetic:640",
                        help="synthetic:<total images> or cifar10:<data dir>")
    parser.add_argument("--image-size", type=int, default=32,
                        help="synthetic image side length")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--pretrain-epochs", type=float, default=0.0,
                        help="train from scratch for this many epochs before serving; "
                             "use it when no pre-trained checkpoint backs the dataset")
    args = parser.parse_args(argv)

    try:
        backend = ModelBackend(
            model_name=args.model,
            data_spec=args.data,
            image_size=args.image_size,
            seed=args.seed,
            device=args.device,
            pretrain_epochs=args.pretrain_epochs,
        )
    except Exception as exc:  # startup problems cannot be reported in-protocol
        print(f"adapter startup failed: {exc}", file=sys.stderr)
        return 1
    serve(backend)
    return 0


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
