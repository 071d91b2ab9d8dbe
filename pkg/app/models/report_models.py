"""Attack and evaluation reports.

Reports are deterministic given config and seed; the only run-dependent
values (timestamps, wall time) live in ``meta``.
"""

from __future__ import annotations

from datetime import datetime, timezone
from typing import Optional

from pydantic import BaseModel, Field

from app.models.config_models import AttackConfig


class ReportMeta(BaseModel):
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    wall_time_s: float = 0.0


class StepTrace(BaseModel):
    step: int
    epoch: int
    fool_loss: float
    maintain_loss: float
    total_loss: float


class AttackDiagnostics(BaseModel):
    """Counters of numerical guards that fired during an attack."""

    clamped_norms: int = Field(default=0, description="||f||^2 values raised to the 1e-12 floor")
    zero_gradient_epsilons: int = Field(default=0, description="Inner perturbations set to 0")


class AttackReport(BaseModel):
    kind: str
    target_layer: Optional[str] = None
    heads: list[str] = Field(default_factory=list)
    seed: int
    initial_accuracy: float
    final_accuracy: float
    per_class_initial: dict[int, float] = Field(default_factory=dict)
    per_class_final: dict[int, float] = Field(default_factory=dict)
    steps: list[StepTrace] = Field(default_factory=list, description="One entry per optimizer step")
    fool_sources: list[str] = Field(default_factory=list)
    diagnostics: AttackDiagnostics = Field(default_factory=AttackDiagnostics)
    config: AttackConfig
    meta: ReportMeta = Field(default_factory=ReportMeta)

    @property
    def fool_trace(self) -> list[float]:
        return [s.fool_loss for s in self.steps]

    @property
    def maintain_trace(self) -> list[float]:
        return [s.maintain_loss for s in self.steps]

    @property
    def accuracy_drop(self) -> float:
        return self.initial_accuracy - self.final_accuracy


# ── Evaluation ────────────────────────────────────────────────────────────────


class SimilaritySummary(BaseModel):
    """Pairwise cosine similarities: moments and a 20-bin histogram over [-1, 1]."""

    count: int
    mean: float
    std: float
    histogram: list[int]
    noisy_dropped: int = 0


class ChannelMetrics(BaseModel):
    channel: str
    kendall_tau: Optional[float] = Field(default=None, description="None when the channel is dead on either model")
    semantic_delta: Optional[float] = None


class LayerSimilarity(BaseModel):
    layer: str
    before: Optional[SimilaritySummary] = None
    after: Optional[SimilaritySummary] = None


class PearsonCurve(BaseModel):
    """Head Pearson correlation across sparsities (CT1)."""

    head: str
    sparsities: list[float]
    initial: list[Optional[float]]
    final: list[Optional[float]]


class RankCorrelation(BaseModel):
    """Attribution rank correlation of one layer between two models (CT3)."""

    head: str
    layer: str
    kendall_tau: Optional[float] = None


class SimilarityRatio(BaseModel):
    """Similarity ratio of one channel plus its raw components (CT4)."""

    channel: str
    ratio: float
    numerator: float
    denominator: float
    degenerate: bool = False
    argmax_channel: Optional[int] = None


class MetricReport(BaseModel):
    channels: list[ChannelMetrics]
    layers: list[LayerSimilarity] = Field(default_factory=list)
    head_pearson: list[PearsonCurve] = Field(default_factory=list)
    rank_correlation: list[RankCorrelation] = Field(default_factory=list)
    similarity_ratio: list[SimilarityRatio] = Field(default_factory=list)
    initial_accuracy: float
    final_accuracy: float
    per_class_delta: dict[int, float] = Field(default_factory=dict)
    config: dict = Field(default_factory=dict, description="Snapshot of the run configuration")
    meta: ReportMeta = Field(default_factory=ReportMeta)

    def channel(self, ref: str) -> ChannelMetrics:
        for record in self.channels:
            if record.channel == ref:
                return record
        raise KeyError(ref)
