"""Total-variation test separating noise-like synthetic images from structured ones."""

from __future__ import annotations

import torch

from app.errors import ShapeMismatchError

DEFAULT_NOISE_THRESHOLD = 0.9


def total_variation(image: torch.Tensor) -> float:
    """Anisotropic L1 total variation of a ``[C, H, W]`` image."""
    if image.dim() != 3:
        raise ShapeMismatchError(f"total_variation takes [C, H, W], got {list(image.shape)}")
    image = image.detach().to(torch.float64)
    vertical = (image[:, 1:, :] - image[:, :-1, :]).abs().sum()
    horizontal = (image[:, :, 1:] - image[:, :, :-1]).abs().sum()
    return float(vertical + horizontal)


def uniform_noise_tv(shape: tuple[int, int, int]) -> float:
    """Expected total variation of i.i.d. U[0, 1] pixels (E|U - U'| = 1/3)."""
    c, h, w = shape
    return c * ((h - 1) * w + h * (w - 1)) / 3.0


def is_noisy(image: torch.Tensor, threshold: float = DEFAULT_NOISE_THRESHOLD) -> bool:
    return total_variation(image) > threshold * uniform_noise_tv(tuple(image.shape))
