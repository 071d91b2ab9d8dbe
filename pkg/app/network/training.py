"""Baseline training and accuracy evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch

from app.autodiff import Tape, backward, one_hot, softmax_cross_entropy
from app.data.datasets import Dataset
from app.errors import EmptyDatasetError
from app.network.mini_alexnet import logits
from app.network.params import ModelParams

logger = logging.getLogger(__name__)

MOMENTUM = 0.9
EVAL_BATCH = 256


@dataclass
class TrainingRun:
    """Result of :func:`train_baseline_with_history`."""

    params: ModelParams
    holdout_accuracy: float
    epoch_losses: list[float] = field(default_factory=list)


def train_baseline_with_history(
    params: ModelParams,
    dataset: Dataset,
    epochs: int,
    lr: float,
    batch: int,
    seed: int,
) -> TrainingRun:
    """Momentum SGD on hard-label cross entropy over all but the held-out tail.

    Shuffling uses a generator seeded with ``seed`` only, so two calls with
    the same inputs produce bit-identical parameters.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if dataset.class_count < 2:
        raise EmptyDatasetError("training needs at least two classes")
    train, holdout = dataset.holdout_split()

    if epochs == 0:
        result = params.clone()
        return TrainingRun(result, accuracy(result, holdout))

    work = params.clone(requires_grad=True)
    optimizer = torch.optim.SGD(work.parameters(), lr=lr, momentum=MOMENTUM)
    generator = torch.Generator().manual_seed(seed)
    losses: list[float] = []

    for epoch in range(epochs):
        total = 0.0
        for x, y in train.batches(batch, generator):
            optimizer.zero_grad(set_to_none=True)
            with Tape() as tape:
                loss = softmax_cross_entropy(logits(work, x), one_hot(y, work.class_count))
            backward(loss, tape)
            optimizer.step()
            total += float(loss.detach()) * x.shape[0]
        losses.append(total / len(train))
        logger.info("epoch %d/%d  loss=%.4f", epoch + 1, epochs, losses[-1])

    result = work.clone()
    holdout_accuracy = accuracy(result, holdout)
    logger.info("Training finished: holdout accuracy %.3f", holdout_accuracy)
    return TrainingRun(result, holdout_accuracy, losses)


def train_baseline(
    params: ModelParams,
    dataset: Dataset,
    epochs: int,
    lr: float,
    batch: int,
    seed: int,
) -> tuple[ModelParams, float]:
    run = train_baseline_with_history(params, dataset, epochs, lr, batch, seed)
    return run.params, run.holdout_accuracy


# ── Evaluation ────────────────────────────────────────────────────────────────


@torch.no_grad()
def predict(params: ModelParams, images: torch.Tensor) -> torch.Tensor:
    """Top-1 class per image."""
    chunks = [logits(params, images[i : i + EVAL_BATCH]).argmax(dim=1) for i in range(0, images.shape[0], EVAL_BATCH)]
    return torch.cat(chunks) if chunks else torch.empty(0, dtype=torch.int64)


def accuracy(params: ModelParams, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise EmptyDatasetError("accuracy of an empty dataset is undefined")
    correct = predict(params, dataset.images) == dataset.labels
    return float(correct.to(torch.float64).mean())


def per_class_accuracy(params: ModelParams, dataset: Dataset) -> dict[int, float]:
    """Top-1 accuracy for every class that has at least one sample."""
    if len(dataset) == 0:
        raise EmptyDatasetError("accuracy of an empty dataset is undefined")
    correct = (predict(params, dataset.images) == dataset.labels).to(torch.float64)
    return {
        int(k): float(correct[dataset.labels == k].mean())
        for k in torch.unique(dataset.labels).tolist()
    }
