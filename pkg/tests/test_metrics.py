"""Rank correlations, embedding statistics and the evaluation report."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
import torch

from app.errors import (
    ConfigError,
    DegenerateEmbeddingError,
    DegenerateRankingError,
    InsufficientSamplesError,
    KernelSetMismatchError,
    ShapeMismatchError,
)
from app.metrics.embedding import (
    ReferenceEmbedder,
    pairwise_similarity,
    pairwise_values,
    ratio_from_embeddings,
    semantic_delta_from_embeddings,
    summarize_similarities,
)
from app.metrics.evaluation import evaluate_models
from app.metrics.rank import attribution_rank_correlation, kendall_tau
from app.models.circuit_models import AttributionTable, KernelScore
from app.models.network_models import ChannelRef
from app.models.report_models import MetricReport
from tests.conftest import desk_metrics, toy_run_config


def brute_force_tau_b(a: list[float], b: list[float]) -> float:
    concordant = discordant = ties_a = ties_b = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        da, db = a[i] - a[j], b[i] - b[j]
        ties_a += da == 0
        ties_b += db == 0
        if da * db > 0:
            concordant += 1
        elif da * db < 0:
            discordant += 1
    pairs = len(a) * (len(a) - 1) // 2
    return (concordant - discordant) / math.sqrt((pairs - ties_a) * (pairs - ties_b))


def checkerboard(shape: tuple[int, int, int] = (3, 8, 8)) -> torch.Tensor:
    c, h, w = shape
    board = ((torch.arange(h).view(h, 1) + torch.arange(w).view(1, w)) % 2).float()
    return board.expand(c, h, w).contiguous()


def _table(head: str, scores: dict[int, float]) -> AttributionTable:
    ref = ChannelRef.parse(head)
    entries = [KernelScore(layer="c1", channel=c, score=s) for c, s in scores.items()]
    entries.append(KernelScore(layer=ref.layer, channel=ref.channel, score=1.0))
    return AttributionTable(head=ref, sample_count=1, entries=entries)


# ── Kendall tau ───────────────────────────────────────────────────────────────


def test_kendall_tau_single_swap():
    assert kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6)
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert kendall_tau([0.5, 0.25, 0.125], [0.5, 0.25, 0.125]) == 1.0


def test_kendall_tau_matches_brute_force_tau_b():
    rng = np.random.default_rng(0)
    checked = 0
    for trial in range(200):
        n = int(rng.integers(2, 13))
        if trial % 2:
            a, b = rng.integers(0, 4, n).tolist(), rng.integers(0, 4, n).tolist()
        else:
            a, b = rng.normal(size=n).tolist(), rng.normal(size=n).tolist()
        if len(set(a)) == 1 or len(set(b)) == 1:
            with pytest.raises(DegenerateRankingError):
                kendall_tau(a, b)
            continue
        assert kendall_tau(a, b) == pytest.approx(brute_force_tau_b(a, b), abs=1e-9)
        checked += 1
    assert checked > 150


def test_kendall_tau_errors():
    with pytest.raises(DegenerateRankingError):
        kendall_tau([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ShapeMismatchError):
        kendall_tau([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(InsufficientSamplesError):
        kendall_tau([1.0], [1.0])


def test_attribution_rank_correlation_aligns_by_kernel():
    before = _table("c2:0", {0: 1.0, 1: 2.0, 2: 3.0, 3: 4.0})
    after = _table("c2:0", {3: 4.0, 2: 2.0, 1: 3.0, 0: 1.0})
    assert attribution_rank_correlation(before, after, "c1") == pytest.approx(4 / 6)


def test_attribution_rank_correlation_mismatches():
    before = _table("c2:0", {0: 1.0, 1: 2.0})
    with pytest.raises(KernelSetMismatchError):
        attribution_rank_correlation(before, _table("c2:1", {0: 1.0, 1: 2.0}), "c1")
    with pytest.raises(KernelSetMismatchError):
        attribution_rank_correlation(before, _table("c2:0", {0: 1.0, 2: 2.0}), "c1")


# ── Embedding statistics ──────────────────────────────────────────────────────


def test_similarity_ratio_components():
    parts = ratio_from_embeddings(np.array([1.0, 0.0]), np.array([[0.5, 0.866], [0.9, 0.436]]), same_index=0)
    assert parts.ratio == pytest.approx(1.8)
    assert parts.numerator == pytest.approx(0.9)
    assert parts.denominator == pytest.approx(0.5)
    assert parts.argmax == 1
    assert not parts.degenerate


def test_similarity_ratio_floors_the_denominator():
    parts = ratio_from_embeddings(np.array([1.0, 0.0]), np.array([[0.0, 1.0], [1.0, 0.0]]), same_index=0)
    assert parts.degenerate
    assert parts.ratio == pytest.approx(1e6)
    with pytest.raises(InsufficientSamplesError):
        ratio_from_embeddings(np.array([1.0, 0.0]), np.array([[1.0, 0.0]]), same_index=3)


def test_pairwise_values_and_summary():
    vectors = np.eye(4)
    vectors[1] = [1.0, 0.0, 0.0, 0.0]
    values = pairwise_values(vectors)
    assert len(values) == 6
    assert values[0] == 1.0
    summary = summarize_similarities(values)
    assert summary.count == 6
    assert sum(summary.histogram) == 6
    assert len(summary.histogram) == 20
    assert summary.mean == pytest.approx(1 / 6)


def test_semantic_delta_range():
    a = np.array([[1.0, 0.0], [0.8, 0.6]])
    assert semantic_delta_from_embeddings(a, a.copy()) == 0.0
    assert semantic_delta_from_embeddings(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == pytest.approx(1.0)
    assert semantic_delta_from_embeddings(np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]])) == pytest.approx(2.0)
    with pytest.raises(DegenerateEmbeddingError):
        semantic_delta_from_embeddings(np.array([[1.0, 0.0], [-1.0, 0.0]]), a)


def test_embedder_needs_a_model():
    with pytest.raises(ConfigError):
        ReferenceEmbedder(None).embed_many(torch.rand(1, 3, 8, 8))


def test_embeddings_are_unit_rows(trained_toy, blobs):
    embedder = ReferenceEmbedder(trained_toy)
    vectors = embedder.embed_many(blobs.images[:3])
    assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0)
    with pytest.raises(ShapeMismatchError):
        embedder.embed_many(torch.rand(2, 3, 4, 4))


def test_pairwise_similarity_drops_noisy_images(trained_toy, blobs):
    images = torch.cat([blobs.images[:3], checkerboard().unsqueeze(0)])
    values, summary = pairwise_similarity(images, ReferenceEmbedder(trained_toy))
    assert len(values) == 3
    assert summary.noisy_dropped == 1


def test_pairwise_similarity_needs_two_clean_images(trained_toy, blobs):
    images = torch.stack([checkerboard(), checkerboard(), blobs.images[0]])
    with pytest.raises(InsufficientSamplesError):
        pairwise_similarity(images, ReferenceEmbedder(trained_toy))


# ── Evaluation report ─────────────────────────────────────────────────────────


def test_model_compared_with_itself(trained_toy, blobs, tmp_path):
    cfg = toy_run_config(tmp_path)
    report = evaluate_models(trained_toy, trained_toy.clone(), ReferenceEmbedder(trained_toy), blobs, cfg)

    assert [c.channel for c in report.channels] == ["c2:0", "c2:1", "c2:2", "c2:3"]
    taus = [c.kendall_tau for c in report.channels]
    assert all(t in (1.0, None) for t in taus)
    assert 1.0 in taus
    assert all(c.semantic_delta in (0.0, None) for c in report.channels)
    assert all(r.kendall_tau in (1.0, None) for r in report.rank_correlation)
    assert all(r.ratio == pytest.approx(1.0, abs=1e-9) for r in report.similarity_ratio)
    assert report.initial_accuracy == report.final_accuracy
    assert all(delta == 0.0 for delta in report.per_class_delta.values())
    assert [curve.head for curve in report.head_pearson] == ["c2:0"]


def test_report_restricted_to_configured_channels(trained_toy, blobs, tmp_path):
    cfg = toy_run_config(tmp_path, evaluation={"channels": ["c2:1"]}, circuits={"heads": ["c2:1"]})
    report = evaluate_models(trained_toy, trained_toy.clone(), ReferenceEmbedder(trained_toy), blobs, cfg)
    assert report.channel("c2:1").channel == "c2:1"
    with pytest.raises(KeyError):
        report.channel("c2:0")
    again = MetricReport.model_validate_json(report.model_dump_json())
    assert again.channels == report.channels
    assert again.per_class_delta == report.per_class_delta


# ── Desk-scale acceptance ─────────────────────────────────────────────────────


def _head_taus(report: MetricReport) -> dict[str, float]:
    """Mean attribution rank correlation over each head's pre-head layers."""
    taus: dict[str, list[float]] = {}
    for record in report.rank_correlation:
        if record.kendall_tau is not None:
            taus.setdefault(record.head, []).append(record.kendall_tau)
    return {head: float(np.mean(values)) for head, values in taus.items()}


@pytest.mark.slow
def test_proxpulse_shifts_synthetic_similarity(desk_proxpulse_metrics):
    (layer,) = desk_proxpulse_metrics.layers
    assert layer.layer == "conv4"
    assert layer.before is not None and layer.after is not None
    assert layer.after.mean - layer.before.mean >= 0.1


@pytest.mark.slow
def test_proxpulse_moves_natural_top_k_more_than_the_control(desk_proxpulse_metrics, desk_control_metrics):
    pairs = [
        (attacked.semantic_delta, desk_control_metrics.channel(attacked.channel).semantic_delta)
        for attacked in desk_proxpulse_metrics.channels
    ]
    pairs = [(a, c) for a, c in pairs if a is not None and c is not None]
    assert len(pairs) >= 0.7 * len(desk_proxpulse_metrics.channels)
    wins = sum(a > 2 * c for a, c in pairs)
    assert wins >= 0.7 * len(desk_proxpulse_metrics.channels)


@pytest.mark.slow
def test_proxpulse_leaves_circuit_attributions_ranked(desk_proxpulse_metrics, desk_heads):
    taus = _head_taus(desk_proxpulse_metrics)
    assert len(desk_heads) == 10
    assert sum(taus.get(str(h), -1.0) > 0.7 for h in desk_heads) >= 8


@pytest.mark.slow
def test_circuitbreaker_breaks_rankings_but_not_the_circuit(
    desk_run_config, desk_blobs, desk_models, desk_circuitbreaker, desk_proxpulse_metrics
):
    proxpulse_tau = float(np.mean(list(_head_taus(desk_proxpulse_metrics).values())))
    broken = []
    for head, attacked, attack_report in desk_circuitbreaker:
        # accuracy
        assert attack_report.accuracy_drop < 0.02, head

        report = desk_metrics(desk_run_config, desk_models, attacked, desk_blobs, [head])
        (curve,) = report.head_pearson
        # circuit function across sparsities
        for s, before, after in zip(curve.sparsities, curve.initial, curve.final):
            if s >= 0.5 and before is not None and after is not None:
                assert abs(after - before) <= 0.1, (head, s)
        # attribution ranking
        tau = _head_taus(report).get(str(head))
        assert tau is not None and tau < proxpulse_tau, head
        broken.append(tau < 0.5)
        # final synth most similar to its own initial synth
        (own,) = [r for r in report.similarity_ratio if r.channel == str(head)]
        assert own.numerator - own.denominator <= 0.05, head
    assert sum(broken) >= 4
