"""Attack losses: the fooling terms of ProxPulse and CircuitBreaker and the
distillation term that keeps the attacked model's outputs in place."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from app.attacks.fool_set import FoolSet
from app.autodiff import gradients, ops
from app.circuits.attribution import kernel_attributions
from app.errors import KernelSetMismatchError
from app.models.circuit_models import AttributionTable
from app.models.config_models import AttackConfig
from app.models.network_models import ChannelRef
from app.models.report_models import AttackDiagnostics
from app.network.mini_alexnet import forward_with_activations, logits
from app.network.params import ModelParams

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
DEFAULT_BIG_C = 1e6

TopInit = dict[str, list[int]]
Objective = Callable[[torch.Tensor], torch.Tensor]


# ── Inner loss and its sharpness step ─────────────────────────────────────────


def log_barrier(energy: torch.Tensor, big_c: float, diagnostics: AttackDiagnostics | None = None) -> torch.Tensor:
    """Elementwise ``log(1 + C / max(energy, 1e-12))``."""
    low = energy.detach() < NORM_FLOOR
    if bool(low.any()):
        count = int(low.sum())
        if diagnostics is not None:
            diagnostics.clamped_norms += count
        logger.warning("%d channel norm(s) below %.0e clamped", count, NORM_FLOOR)
    return torch.log1p(big_c / energy.clamp_min(NORM_FLOOR))


def inner_losses(
    params: ModelParams,
    x: torch.Tensor,
    channels: torch.Tensor,
    layer: str,
    big_c: float,
    diagnostics: AttackDiagnostics | None = None,
) -> torch.Tensor:
    """Per-image ``l_j`` where row ``i`` of ``x`` is scored on ``channels[i]``."""
    maps = forward_with_activations(params, x, upto=layer)[layer]
    picked = maps[torch.arange(x.shape[0]), channels]
    return log_barrier(ops.squared_norm(picked, dims=(1, 2)), big_c, diagnostics)


def inner_loss(
    params: ModelParams,
    x: torch.Tensor,
    ref: ChannelRef,
    big_c: float = DEFAULT_BIG_C,
    diagnostics: AttackDiagnostics | None = None,
) -> torch.Tensor:
    """``log(1 + C / ||f^(l,j)(x)||^2)`` summed over the images in ``x``."""
    params.validate_ref(ref)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    channels = torch.full((x.shape[0],), ref.channel, dtype=torch.int64)
    return inner_losses(params, x, channels, ref.layer, big_c, diagnostics).sum()


def sharpness_perturbation(
    objective: Objective,
    x: torch.Tensor,
    rho: float,
    diagnostics: AttackDiagnostics | None = None,
) -> torch.Tensor:
    """First-order inner maximiser ``rho * grad / ||grad||`` per leading-axis sample.

    ``objective`` maps a batch to per-sample values. The returned perturbation
    is detached so the outer gradient treats it as a constant; samples with a
    zero gradient get a zero perturbation.
    """
    leaf = x.detach().requires_grad_(True)
    (grad,) = gradients(objective(leaf).sum(), [leaf])
    flat = grad.reshape(grad.shape[0], -1).to(torch.float64)
    norms = flat.norm(dim=1)
    dead = norms == 0
    if bool(dead.any()):
        if diagnostics is not None:
            diagnostics.zero_gradient_epsilons += int(dead.sum())
        logger.warning("zero inner gradient at %d point(s); epsilon set to 0", int(dead.sum()))
    scale = torch.where(dead, torch.zeros_like(norms), rho / torch.where(dead, torch.ones_like(norms), norms))
    return (flat * scale[:, None]).reshape(grad.shape).to(x.dtype).detach()


def linearized_inner_max(objective: Objective, x: torch.Tensor, rho: float) -> torch.Tensor:
    """``l(x) + rho * ||grad l(x)||``, the first-order value of the max over the rho-ball."""
    leaf = x.detach().requires_grad_(True)
    values = objective(leaf)
    (grad,) = gradients(values.sum(), [leaf])
    norms = grad.reshape(grad.shape[0], -1).to(torch.float64).norm(dim=1)
    return values.detach().to(torch.float64) + rho * norms


def epsilon_star(
    params: ModelParams,
    x_star: torch.Tensor,
    ref: ChannelRef,
    rho: float,
    big_c: float = DEFAULT_BIG_C,
    diagnostics: AttackDiagnostics | None = None,
) -> torch.Tensor:
    """Perturbation of L2 norm ``rho`` that increases ``l_j`` fastest at ``x_star``."""
    params.validate_ref(ref)
    squeeze = x_star.dim() == 3
    x = x_star.unsqueeze(0) if squeeze else x_star
    channels = torch.full((x.shape[0],), ref.channel, dtype=torch.int64)
    eps = sharpness_perturbation(
        lambda batch: inner_losses(params, batch, channels, ref.layer, big_c), x, rho, diagnostics
    )
    return eps[0] if squeeze else eps


# ── ProxPulse ─────────────────────────────────────────────────────────────────


def proxpulse_loss(
    params: ModelParams,
    fool_set: FoolSet | torch.Tensor,
    layer: str,
    cfg: AttackConfig,
    diagnostics: AttackDiagnostics | None = None,
    perturb: bool = True,
) -> torch.Tensor:
    """Sum over every channel j of ``layer`` and every target of ``l_j(x* + eps_j(x*))``.

    All (channel, target) pairs run as one batch: row ``j * M + m`` holds
    target ``m`` scored on channel ``j``. ``perturb=False`` drops the
    sharpness step and scores the targets themselves.
    """
    targets = fool_set.targets if isinstance(fool_set, FoolSet) else fool_set
    width = params.width(layer)
    if targets.shape[0] == 0:
        return torch.zeros((), dtype=torch.float32)

    m = targets.shape[0]
    xs = targets.repeat(width, 1, 1, 1)
    channels = torch.arange(width).repeat_interleave(m)

    def objective(batch: torch.Tensor) -> torch.Tensor:
        return inner_losses(params, batch, channels, layer, cfg.big_c, diagnostics)

    if perturb:
        xs = xs + sharpness_perturbation(objective, xs, cfg.rho, diagnostics)
    return objective(xs).sum()


# ── Maintain (distillation) ───────────────────────────────────────────────────


def maintain_loss(params: ModelParams, params_initial: ModelParams, batch: torch.Tensor) -> torch.Tensor:
    """Cross entropy of the current logits against the initial model's softmax."""
    with torch.no_grad():
        target = F.softmax(logits(params_initial, batch).to(torch.float64), dim=1).to(torch.float32)
    return ops.softmax_cross_entropy(logits(params, batch), target)


# ── CircuitBreaker ────────────────────────────────────────────────────────────


def top_init_from_table(table: AttributionTable, topinit_count: int) -> TopInit:
    """Frozen top-attributed kernels of every ancestor layer of the table's head.

    A layer keeps ``min(topinit_count, max(1, width // 2))`` so non-top
    kernels always remain to rank against.
    """
    top: TopInit = {}
    for layer in table.layers:
        if layer == table.head.layer:
            continue
        entries = table.layer_entries(layer)
        size = min(topinit_count, max(1, len(entries) // 2))
        ranked = sorted(entries, key=lambda e: (-e.score, e.channel))[:size]
        top[layer] = sorted(e.channel for e in ranked)
    return top


def pairwise_hinge(scores: torch.Tensor, top_mask: torch.Tensor, margin: float = 0.0) -> torch.Tensor:
    """``sum over (k_hat in top, k not in top) of [score(k_hat) - score(k) + margin]_+``."""
    top = scores[top_mask]
    rest = scores[~top_mask]
    if top.numel() == 0 or rest.numel() == 0:
        return scores.sum() * 0
    return torch.relu(top[:, None] - rest[None, :] + margin).sum()


def _check_top_init(params: ModelParams, head: ChannelRef, top_init: TopInit) -> None:
    ancestors = params.ancestors(head.layer)
    for layer, channels in top_init.items():
        if layer not in ancestors:
            raise KernelSetMismatchError(f"topInit layer '{layer}' is not an ancestor of {head}")
        width = params.width(layer)
        if any(not 0 <= c < width for c in channels):
            raise KernelSetMismatchError(f"topInit references a kernel outside '{layer}' (width {width})")


def ranking_loss(
    params: ModelParams,
    head: ChannelRef,
    top_init: TopInit,
    batch: torch.Tensor,
    margin: float = 0.0,
) -> torch.Tensor:
    """Mean over batch images of the pairwise hinge on current attributions.

    Attributions are recomputed per image with ``create_graph=True`` so the
    loss differentiates through them (second derivatives of activations).
    """
    params.validate_ref(head)
    _check_top_init(params, head, top_init)
    total = torch.zeros((), dtype=torch.float32)
    for i in range(batch.shape[0]):
        scores = kernel_attributions(params, head, batch[i : i + 1], create_graph=True)
        for layer, channels in top_init.items():
            mask = torch.zeros(scores[layer].shape[0], dtype=torch.bool)
            mask[channels] = True
            total = total + pairwise_hinge(scores[layer], mask, margin)
    return total / max(batch.shape[0], 1)


@dataclass
class HeadTarget:
    """Frozen per-head inputs of CircuitBreaker, captured on the initial model."""

    head: ChannelRef
    synth_image: torch.Tensor
    top_init: TopInit


def circuitbreaker_loss(
    params: ModelParams,
    head: ChannelRef,
    x_star_synth: torch.Tensor,
    top_init: TopInit,
    batch: torch.Tensor,
    cfg: AttackConfig,
    diagnostics: AttackDiagnostics | None = None,
) -> torch.Tensor:
    """``l_j(x*_synth + eps) + beta * ranking_loss`` for a single head."""
    x = x_star_synth.unsqueeze(0) if x_star_synth.dim() == 3 else x_star_synth
    eps = epsilon_star(params, x, head, cfg.rho, cfg.big_c, diagnostics)
    preserve = inner_loss(params, x + eps, head, cfg.big_c, diagnostics)
    if cfg.beta == 0:
        return preserve
    return preserve + cfg.beta * ranking_loss(params, head, top_init, batch, cfg.margin)


def multi_head_loss(
    params: ModelParams,
    targets: list[HeadTarget],
    batch: torch.Tensor,
    cfg: AttackConfig,
    diagnostics: AttackDiagnostics | None = None,
) -> torch.Tensor:
    """Sum of :func:`circuitbreaker_loss` over several heads attacked together."""
    total = torch.zeros((), dtype=torch.float32)
    for target in targets:
        total = total + circuitbreaker_loss(
            params, target.head, target.synth_image, target.top_init, batch, cfg, diagnostics
        )
    return total
