"""Rank correlations: Kendall tau-b and attribution-rank agreement between models."""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
from scipy.stats import kendalltau

from app.errors import (
    DegenerateRankingError,
    InsufficientSamplesError,
    KernelSetMismatchError,
    ShapeMismatchError,
)
from app.models.circuit_models import AttributionTable

logger = logging.getLogger(__name__)


def kendall_tau(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Tie-corrected Kendall tau-b in ``[-1, 1]``.

    Raises
    ------
    DegenerateRankingError  if either list is entirely tied
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError(f"score lists differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] < 2:
        raise InsufficientSamplesError("Kendall tau needs at least two items")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateRankingError("Kendall tau is undefined when every score is tied")
    if np.array_equal(a, b):
        return 1.0

    tau = kendalltau(a, b, variant="b").statistic
    if math.isnan(tau):
        raise DegenerateRankingError("Kendall tau denominator is zero")
    return float(min(1.0, max(-1.0, tau)))


def attribution_rank_correlation(
    table_initial: AttributionTable, table_final: AttributionTable, layer: str
) -> float:
    """Kendall tau of one layer's kernel scores, aligned by kernel id."""
    if table_initial.head != table_final.head:
        raise KernelSetMismatchError(f"heads differ: {table_initial.head} vs {table_final.head}")
    before = {e.channel: e.score for e in table_initial.layer_entries(layer)}
    after = {e.channel: e.score for e in table_final.layer_entries(layer)}
    if not before or set(before) != set(after):
        raise KernelSetMismatchError(f"tables cover different kernels in layer '{layer}'")
    channels = sorted(before)
    return kendall_tau([before[c] for c in channels], [after[c] for c in channels])
