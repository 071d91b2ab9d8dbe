"""Synthetic feature visualization by gradient ascent in pixel space."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from app.autodiff import gradients
from app.featvis.activation import channel_activation, channel_energy
from app.models.network_models import ChannelRef
from app.network.params import ModelParams

logger = logging.getLogger(__name__)

INIT_LOW, INIT_HIGH = 0.4, 0.6


@dataclass
class SynthResult:
    image: torch.Tensor
    final_activation: float
    steps_run: int
    seed: int
    initial_activation: float = 0.0


def noise_init(shape: tuple[int, ...], generator: torch.Generator) -> torch.Tensor:
    return INIT_LOW + (INIT_HIGH - INIT_LOW) * torch.rand((1, *shape), generator=generator)


def synth_featvis(
    params: ModelParams,
    ref: ChannelRef,
    steps: int,
    lr: float,
    seed: int,
    jitter: int = 2,
    clamp: bool = True,
) -> SynthResult:
    """Maximise ``channel_activation`` starting from uniform noise.

    Each step shifts the image by a random roll of at most ``jitter`` pixels,
    takes a gradient step of L2 length ``lr`` and clamps to ``[0, 1]``. The
    best unshifted iterate seen (including the start) is returned.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    params.validate_ref(ref)
    generator = torch.Generator().manual_seed(seed)

    x = noise_init(params.input_shape, generator)
    best, best_value = x.clone(), channel_activation(params, x, ref)
    initial = best_value

    steps_run = 0
    for _ in range(steps):
        leaf = x.detach().requires_grad_(True)
        shifted = leaf
        if jitter:
            dy, dx = torch.randint(-jitter, jitter + 1, (2,), generator=generator).tolist()
            shifted = torch.roll(leaf, shifts=(dy, dx), dims=(2, 3))
        value = channel_energy(params, shifted, ref).sum()
        (grad,) = gradients(value, [leaf])
        steps_run += 1
        norm = grad.norm()
        if float(norm) == 0.0:
            logger.debug("zero gradient for %s at step %d; stopping", ref, steps_run)
            break

        x = leaf.detach() + lr * grad / norm
        if clamp:
            x = x.clamp(0.0, 1.0)
        current = channel_activation(params, x, ref)
        if current > best_value:
            best, best_value = x.clone(), current

    logger.debug("synth %s: %.4g -> %.4g in %d steps", ref, initial, best_value, steps_run)
    return SynthResult(
        image=best[0],
        final_activation=best_value,
        steps_run=steps_run,
        seed=seed,
        initial_activation=initial,
    )
