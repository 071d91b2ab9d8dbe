"""Attack loop: fine-tune a model so its visualizations lie while its outputs stay put.

Flow:
1. Freeze theta_initial and everything derived from it (fool targets, checked
   against the initial synthetic images, for ProxPulse; per-head synthetic
   image and topInit for CircuitBreaker)
2. Adam over maintain-subset batches on ``alpha * L_F + (1 - alpha) * L_M``
3. Abort if L_M exceeds the divergence guard
4. Report accuracies, per-step traces and guard counters
"""

from __future__ import annotations

import logging
import math
import time

import torch

from app.attacks.fool_set import FoolSet
from app.attacks.losses import (
    HeadTarget,
    maintain_loss,
    multi_head_loss,
    proxpulse_loss,
    top_init_from_table,
)
from app.circuits.attribution import snip_attribution
from app.data.datasets import Dataset
from app.errors import AttackDivergedError, ConfigError, FoolSetError
from app.events import log_event
from app.featvis.synthetic import synth_featvis
from app.models.config_models import AttackConfig, CircuitConfig, FeatvisConfig
from app.models.network_models import ChannelRef
from app.models.report_models import AttackDiagnostics, AttackReport, ReportMeta, StepTrace
from app.network.params import ModelParams
from app.network.training import accuracy, per_class_accuracy

logger = logging.getLogger(__name__)

LOG_EVERY = 10


def prepare_heads(
    params_initial: ModelParams,
    cfg: AttackConfig,
    dataset: Dataset,
    featvis: FeatvisConfig,
    circuits: CircuitConfig,
) -> list[HeadTarget]:
    """Initial synthetic image and topInit of every configured head, on theta_initial."""
    if not cfg.heads:
        raise ConfigError("circuitbreaker needs at least one head (attack.heads)")
    sample_count = min(circuits.sample_count, len(dataset))
    targets = []
    for head in cfg.head_refs:
        params_initial.validate_ref(head)
        synth = synth_featvis(params_initial, head, featvis.steps, featvis.lr, cfg.seed, jitter=featvis.jitter)
        table = snip_attribution(params_initial, head, dataset, sample_count)
        targets.append(HeadTarget(head=head, synth_image=synth.image, top_init=top_init_from_table(table, cfg.topinit_count)))
        logger.info("Head %s frozen: synth activation %.4g", head, synth.final_activation)
    return targets


def layer_synths(params: ModelParams, layer: str, featvis: FeatvisConfig, seed: int) -> torch.Tensor:
    """Synthetic image ``[width, C, H, W]`` of every channel of ``layer``."""
    return torch.stack([
        synth_featvis(params, ChannelRef(layer=layer, channel=c), featvis.steps, featvis.lr, seed, jitter=featvis.jitter).image
        for c in range(params.width(layer))
    ])


def check_fool_set(fool_set: FoolSet, initial_synths: torch.Tensor, params: ModelParams, cfg: AttackConfig) -> None:
    """Reject fool targets within ``rho`` of an initial synthetic image of the target layer."""
    expected = (params.width(cfg.target_layer), *params.input_shape)
    if tuple(initial_synths.shape) != expected:
        raise FoolSetError(
            f"cannot check fool targets against synthetic images of shape {list(initial_synths.shape)}; "
            f"'{cfg.target_layer}' needs {list(expected)}"
        )
    fool_set.check_excludes(initial_synths, cfg.rho)


def run_attack(
    params_initial: ModelParams,
    loss_kind: str,
    cfg: AttackConfig,
    dataset: Dataset,
    fool_set: FoolSet | None = None,
    heads: list[HeadTarget] | None = None,
    featvis: FeatvisConfig | None = None,
    circuits: CircuitConfig | None = None,
    initial_synths: torch.Tensor | None = None,
) -> tuple[ModelParams, AttackReport]:
    """Fine-tune ``params_initial`` against the chosen fooling loss.

    Parameters
    ----------
    loss_kind      : "proxpulse" or "circuitbreaker"
    fool_set       : ProxPulse targets; drawn from ``dataset`` when omitted
    heads          : precomputed CircuitBreaker head targets; built when omitted
    initial_synths : synthetic images of the target layer on ``params_initial``;
                     synthesised when omitted. ProxPulse refuses fool targets
                     within ``rho`` of any of them.

    Returns
    -------
    (attacked parameters, AttackReport)
    """
    started = time.perf_counter()
    featvis = featvis or FeatvisConfig()
    circuits = circuits or CircuitConfig()
    maintain_pool, holdout = dataset.holdout_split()

    initial = params_initial.clone()
    diagnostics = AttackDiagnostics()
    fool_sources: list[str] = []

    if loss_kind == "proxpulse":
        initial.width(cfg.target_layer)
        if fool_set is None:
            fool_set = (
                FoolSet.from_paths(cfg.fool_targets)
                if cfg.fool_targets
                else FoolSet.from_dataset(maintain_pool, cfg.fool_set_size, cfg.seed)
            )
        if len(fool_set) == 0:
            raise FoolSetError("the fool set is empty")
        fool_set.check_shape(initial.input_shape)
        if initial_synths is None:
            initial_synths = layer_synths(initial, cfg.target_layer, featvis, cfg.seed)
        check_fool_set(fool_set, initial_synths, initial, cfg)
        fool_sources = list(fool_set.sources)
        head_names: list[str] = []
    elif loss_kind == "circuitbreaker":
        heads = heads if heads is not None else prepare_heads(initial, cfg, maintain_pool, featvis, circuits)
        head_names = [str(h.head) for h in heads]
    else:
        raise ConfigError(f"unknown attack kind '{loss_kind}'")

    initial_accuracy = accuracy(initial, holdout)
    per_class_initial = per_class_accuracy(initial, holdout)
    maintain_set = maintain_pool.head(cfg.maintain_subset_size)

    work = initial.clone(requires_grad=True)
    steps: list[StepTrace] = []
    if cfg.epochs > 0:
        optimizer = torch.optim.Adam(work.parameters(), lr=cfg.lr)
        generator = torch.Generator().manual_seed(cfg.seed)
        guard: float | None = None

        for epoch in range(cfg.epochs):
            for x, _ in maintain_set.batches(cfg.batch, generator):
                optimizer.zero_grad(set_to_none=True)
                l_m = maintain_loss(work, initial, x)
                if loss_kind == "proxpulse":
                    l_f = proxpulse_loss(work, fool_set, cfg.target_layer, cfg, diagnostics)
                else:
                    l_f = multi_head_loss(work, heads, x[: cfg.ranking_samples], cfg, diagnostics)
                total = cfg.alpha * l_f + (1 - cfg.alpha) * l_m

                m_value = float(l_m.detach())
                if guard is None:
                    guard = cfg.divergence_factor * max(m_value, cfg.divergence_floor)
                if not math.isfinite(m_value) or m_value > guard:
                    log_event("attack_diverged", kind=loss_kind, step=len(steps), maintain_loss=m_value, guard=guard)
                    raise AttackDivergedError(
                        f"maintain loss {m_value:.4g} exceeded guard {guard:.4g} at step {len(steps)}"
                    )

                total.backward()
                optimizer.step()
                steps.append(
                    StepTrace(
                        step=len(steps),
                        epoch=epoch,
                        fool_loss=float(l_f.detach()),
                        maintain_loss=m_value,
                        total_loss=float(total.detach()),
                    )
                )
                if len(steps) % LOG_EVERY == 1:
                    logger.info(
                        "step %d epoch %d  L_F=%.4f  L_M=%.4f",
                        steps[-1].step, epoch, steps[-1].fool_loss, m_value,
                    )
            log_event("attack_epoch", kind=loss_kind, epoch=epoch, steps=len(steps), fool_loss=steps[-1].fool_loss if steps else None)

    result = work.clone()
    report = AttackReport(
        kind=loss_kind,
        target_layer=cfg.target_layer if loss_kind == "proxpulse" else None,
        heads=head_names,
        seed=cfg.seed,
        initial_accuracy=initial_accuracy,
        final_accuracy=accuracy(result, holdout),
        per_class_initial=per_class_initial,
        per_class_final=per_class_accuracy(result, holdout),
        steps=steps,
        fool_sources=fool_sources,
        diagnostics=diagnostics,
        config=cfg,
        meta=ReportMeta(wall_time_s=time.perf_counter() - started),
    )
    log_event(
        "attack_finished",
        kind=loss_kind,
        steps=len(steps),
        initial_accuracy=report.initial_accuracy,
        final_accuracy=report.final_accuracy,
    )
    logger.info(
        "Attack %s finished: %d steps, accuracy %.3f -> %.3f",
        loss_kind, len(steps), report.initial_accuracy, report.final_accuracy,
    )
    return result, report
