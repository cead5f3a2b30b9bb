"""prunerl-adapter: a real-CNN backend for the prunerl wire protocol.

Wraps a small residual network (CIFAR-style, identity shortcuts) with actual
fine-tuning, checkpoint-isolated evaluation, and permanent mask commits, and
serves the line-delimited JSON pruning protocol on stdio.
"""

from .backend import BackendFault, ModelBackend
from .model import build_model, conv_table
from .server import serve

__version__ = "0.1.0"

__all__ = ["BackendFault", "ModelBackend", "build_model", "conv_table", "serve"]
