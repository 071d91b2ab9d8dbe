"""The MiniAlexNet model family, baseline training and checkpoints."""

from app.network.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.network.mini_alexnet import (
    END,
    LOGITS_KEY,
    build_mini_alexnet,
    build_network,
    forward_with_activations,
    logits,
    penultimate,
)
from app.network.params import ModelParams
from app.network.training import accuracy, per_class_accuracy, train_baseline, train_baseline_with_history

__all__ = [
    "END",
    "LOGITS_KEY",
    "Checkpoint",
    "ModelParams",
    "accuracy",
    "build_mini_alexnet",
    "build_network",
    "forward_with_activations",
    "load_checkpoint",
    "logits",
    "penultimate",
    "per_class_accuracy",
    "save_checkpoint",
    "train_baseline",
    "train_baseline_with_history",
]
