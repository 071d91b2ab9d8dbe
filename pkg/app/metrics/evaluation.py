"""MetricReport assembly: compare an initial and a final model channel by channel."""

from __future__ import annotations

import logging
import time
from typing import Optional

import torch

from app.attacks.attack_loop import layer_synths
from app.circuits.attribution import snip_attribution
from app.circuits.extraction import extract_circuit, head_pearson
from app.config import RunConfig
from app.data.datasets import Dataset
from app.errors import (
    DegenerateEmbeddingError,
    DegenerateRankingError,
    InsufficientSamplesError,
    ZeroVarianceError,
)
from app.featvis.activation import dataset_energy
from app.featvis.natural import rank_by_activation
from app.metrics.embedding import ReferenceEmbedder, pairwise_similarity, semantic_delta, similarity_ratio
from app.metrics.rank import attribution_rank_correlation, kendall_tau
from app.models.circuit_models import AttributionTable
from app.models.network_models import ChannelRef
from app.models.report_models import (
    ChannelMetrics,
    LayerSimilarity,
    MetricReport,
    PearsonCurve,
    RankCorrelation,
    ReportMeta,
    SimilarityRatio,
)
from app.network.params import ModelParams
from app.network.training import accuracy, per_class_accuracy

logger = logging.getLogger(__name__)


class SynthCache:
    """Synthetic images per (model role, layer), computed on first use."""

    def __init__(self, models: dict[str, ModelParams], cfg: RunConfig) -> None:
        self._models = models
        self._cfg = cfg
        self._images: dict[tuple[str, str], torch.Tensor] = {}

    def layer(self, role: str, layer: str) -> torch.Tensor:
        key = (role, layer)
        if key not in self._images:
            self._images[key] = layer_synths(self._models[role], layer, self._cfg.featvis, self._cfg.seed)
            logger.info("Synthesised %d images for %s/%s", self._images[key].shape[0], role, layer)
        return self._images[key]

    def put(self, role: str, layer: str, images: torch.Tensor) -> None:
        self._images[(role, layer)] = images


def metric_channels(cfg: RunConfig, params: ModelParams) -> list[ChannelRef]:
    if cfg.evaluation.channels:
        return [params.validate_ref(ChannelRef.parse(c)) for c in cfg.evaluation.channels]
    layer = cfg.attack.target_layer
    return [ChannelRef(layer=layer, channel=c) for c in range(params.width(layer))]


def metric_heads(cfg: RunConfig) -> list[ChannelRef]:
    names = cfg.attack.heads or cfg.circuits.heads
    return [ChannelRef.parse(h) for h in names]


def _channel_metrics(
    initial: ModelParams,
    final: ModelParams,
    ref: ChannelRef,
    images: torch.Tensor,
    k: int,
    embedder: ReferenceEmbedder,
) -> ChannelMetrics:
    before = dataset_energy(initial, images, ref).to(torch.float64).numpy()
    after = dataset_energy(final, images, ref).to(torch.float64).numpy()
    record = ChannelMetrics(channel=str(ref))
    try:
        record.kendall_tau = kendall_tau(before, after)
    except DegenerateRankingError:
        logger.warning("Kendall tau skipped for dead channel %s", ref)
    top_before = images[rank_by_activation(before)[:k].tolist()]
    top_after = images[rank_by_activation(after)[:k].tolist()]
    try:
        record.semantic_delta = semantic_delta(top_before, top_after, embedder)
    except DegenerateEmbeddingError:
        logger.warning("semantic delta skipped for %s: degenerate embedding", ref)
    return record


def _layer_similarity(layer: str, synths: SynthCache, embedder: ReferenceEmbedder, threshold: float) -> LayerSimilarity:
    record = LayerSimilarity(layer=layer)
    for role, attr in (("initial", "before"), ("final", "after")):
        try:
            _, summary = pairwise_similarity(synths.layer(role, layer), embedder, threshold)
            setattr(record, attr, summary)
        except (InsufficientSamplesError, DegenerateEmbeddingError) as exc:
            logger.warning("pairwise similarity skipped for %s (%s): %s", layer, role, exc)
    return record


def _optional(fn, *args) -> Optional[float]:
    try:
        return fn(*args)
    except (ZeroVarianceError, DegenerateRankingError) as exc:
        logger.warning("%s undefined: %s", getattr(fn, "__name__", "metric"), exc)
        return None


def _circuit_metrics(
    initial: ModelParams,
    final: ModelParams,
    head: ChannelRef,
    images: torch.Tensor,
    cfg: RunConfig,
    synths: SynthCache,
    embedder: ReferenceEmbedder,
) -> tuple[PearsonCurve, list[RankCorrelation], list[SimilarityRatio]]:
    sample_count = min(cfg.circuits.sample_count, images.shape[0])
    table_a: AttributionTable = snip_attribution(initial, head, images, sample_count)
    table_b: AttributionTable = snip_attribution(final, head, images, sample_count)
    sparsities = list(cfg.circuits.sparsities)

    curve = PearsonCurve(
        head=str(head),
        sparsities=sparsities,
        initial=[_optional(head_pearson, initial, extract_circuit(table_a, s, cfg.circuits.scope), images) for s in sparsities],
        final=[_optional(head_pearson, final, extract_circuit(table_b, s, cfg.circuits.scope), images) for s in sparsities],
    )
    ranks = [
        RankCorrelation(head=str(head), layer=layer, kendall_tau=_optional(attribution_rank_correlation, table_a, table_b, layer))
        for layer in table_a.layers
        if layer != head.layer
    ]

    ratio_refs = [head]
    for layer in table_b.layers:
        if layer != head.layer:
            top = sorted(table_b.layer_entries(layer), key=lambda e: (-e.score, e.channel))[: cfg.circuits.top_n]
            ratio_refs.extend(ChannelRef(layer=layer, channel=e.channel) for e in top)
    ratios = []
    for ref in ratio_refs:
        try:
            parts = similarity_ratio(
                synths.layer("final", ref.layer)[ref.channel],
                synths.layer("initial", ref.layer),
                ref.channel,
                embedder,
            )
        except DegenerateEmbeddingError as exc:
            logger.warning("similarity ratio skipped for %s: %s", ref, exc)
            continue
        ratios.append(
            SimilarityRatio(
                channel=str(ref),
                ratio=parts.ratio,
                numerator=parts.numerator,
                denominator=parts.denominator,
                degenerate=parts.degenerate,
                argmax_channel=parts.argmax,
            )
        )
    return curve, ranks, ratios


def evaluate_models(
    initial: ModelParams,
    final: ModelParams,
    embedder: ReferenceEmbedder,
    dataset: Dataset,
    cfg: RunConfig,
    synths: SynthCache | None = None,
) -> MetricReport:
    """Every per-channel and per-circuit metric comparing ``initial`` with ``final``.

    Returns
    -------
    MetricReport with one record per requested channel
    """
    started = time.perf_counter()
    _, holdout = dataset.holdout_split()
    images = dataset.images[: cfg.evaluation.subset_size]
    synths = synths or SynthCache({"initial": initial, "final": final}, cfg)
    k = min(cfg.featvis.topk or 1, images.shape[0])

    refs = metric_channels(cfg, initial)
    channels = [_channel_metrics(initial, final, ref, images, k, embedder) for ref in refs]

    layers = []
    for layer in dict.fromkeys(ref.layer for ref in refs):
        layers.append(_layer_similarity(layer, synths, embedder, cfg.featvis.noise_threshold))

    curves, ranks, ratios = [], [], []
    for head in metric_heads(cfg):
        initial.validate_ref(head)
        curve, head_ranks, head_ratios = _circuit_metrics(initial, final, head, images, cfg, synths, embedder)
        curves.append(curve)
        ranks.extend(head_ranks)
        ratios.extend(head_ratios)

    per_class_before = per_class_accuracy(initial, holdout)
    per_class_after = per_class_accuracy(final, holdout)
    report = MetricReport(
        channels=channels,
        layers=layers,
        head_pearson=curves,
        rank_correlation=ranks,
        similarity_ratio=ratios,
        initial_accuracy=accuracy(initial, holdout),
        final_accuracy=accuracy(final, holdout),
        per_class_delta={c: per_class_after[c] - per_class_before[c] for c in per_class_before},
        config=cfg.snapshot(),
        meta=ReportMeta(wall_time_s=time.perf_counter() - started),
    )
    logger.info(
        "Evaluation finished: %d channels, %d heads, accuracy %.3f -> %.3f",
        len(channels), len(curves), report.initial_accuracy, report.final_accuracy,
    )
    return report
