"""Differentiable primitives for small CNNs and the attack losses.

Each primitive validates its operands, computes with torch, checks that the
result is finite, and appends itself to the active :class:`~app.autodiff.tape.Tape`.
Convolution is cross-correlation with zero padding; max-pooling routes the
gradient of a tied window to its first (row-major) maximal element.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from app.autodiff.tape import record
from app.errors import NonFiniteError, NormalizationError, ShapeMismatchError

NORMALIZATION_TOLERANCE = 1e-5


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    """Raise NonFiniteError if ``t`` holds NaN or Inf."""
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{what} produced non-finite values")
    return t


def _require_ndim(t: torch.Tensor, ndim: int, what: str) -> None:
    if t.dim() != ndim:
        raise ShapeMismatchError(f"{what} must be {ndim}-D, got shape {list(t.shape)}")


# ── Layers ────────────────────────────────────────────────────────────────────


def conv2d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlate ``x[N,Cin,H,W]`` with ``kernel[Cout,Cin,Kh,Kw]``.

    Output spatial size is ``(H + 2*padding - Kh) / stride + 1`` and must be
    an integer.
    """
    _require_ndim(x, 4, "conv2d input")
    _require_ndim(kernel, 4, "conv2d kernel")
    if stride < 1 or padding < 0:
        raise ShapeMismatchError(f"conv2d needs stride >= 1 and padding >= 0 (got {stride}, {padding})")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}"
        )
    if bias.shape != (kernel.shape[0],):
        raise ShapeMismatchError(f"conv2d bias must have shape [{kernel.shape[0]}], got {list(bias.shape)}")
    for size, k in ((x.shape[2], kernel.shape[2]), (x.shape[3], kernel.shape[3])):
        span = size + 2 * padding - k
        if span < 0 or span % stride != 0:
            raise ShapeMismatchError(
                f"conv2d output size ({size} + 2*{padding} - {k}) / {stride} + 1 is not a positive integer"
            )

    out = F.conv2d(x, kernel, bias, stride=stride, padding=padding)
    record("conv2d", (x, kernel, bias), out)
    return check_finite(out, "conv2d")


def relu(x: torch.Tensor) -> torch.Tensor:
    out = torch.relu(x)
    record("relu", (x,), out)
    return out


def maxpool2d(x: torch.Tensor, k: int, stride: int | None = None) -> torch.Tensor:
    """Max-pool with a ``k x k`` window; ties go to the first element."""
    _require_ndim(x, 4, "maxpool2d input")
    if stride is None:
        stride = k
    if stride < 1:
        raise ShapeMismatchError(f"maxpool2d stride must be >= 1, got {stride}")
    if k < 1 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeMismatchError(f"maxpool2d window {k} does not fit input {list(x.shape)}")
    out = F.max_pool2d(x, kernel_size=k, stride=stride)
    record("maxpool2d", (x,), out)
    return out


def flatten(x: torch.Tensor) -> torch.Tensor:
    out = x.reshape(x.shape[0], -1)
    record("flatten", (x,), out)
    return out


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Affine map ``x[N,D] -> x @ w.T + b`` with ``w[O,D]``, ``b[O]``."""
    _require_ndim(x, 2, "linear input")
    _require_ndim(w, 2, "linear weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"linear expects {w.shape[1]} features, got {x.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatchError(f"linear bias must have shape [{w.shape[0]}], got {list(b.shape)}")
    out = F.linear(x, w, b)
    record("linear", (x, w, b), out)
    return check_finite(out, "linear")


# ── Reductions and losses ─────────────────────────────────────────────────────


def squared_norm(x: torch.Tensor, dims: tuple[int, ...]) -> torch.Tensor:
    """Sum of squares over ``dims``, accumulated in float64."""
    out = torch.sum(x.to(torch.float64) ** 2, dim=dims).to(x.dtype)
    record("squared_norm", (x,), out)
    return out


def softmax_cross_entropy(logits: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``-sum_k p_k log softmax(logits)_k``.

    ``log_softmax`` subtracts the row max before exponentiating.
    """
    _require_ndim(logits, 2, "logits")
    if logits.shape != target_probs.shape:
        raise ShapeMismatchError(
            f"logits {list(logits.shape)} and targets {list(target_probs.shape)} differ"
        )
    if logits.shape[1] < 2:
        raise ShapeMismatchError("cross entropy needs at least two classes")
    row_sums = target_probs.detach().to(torch.float64).sum(dim=1)
    if not bool(torch.all(torch.abs(row_sums - 1.0) <= NORMALIZATION_TOLERANCE)):
        raise NormalizationError("target probabilities must sum to 1 per row")

    log_probs = F.log_softmax(logits, dim=1)
    per_row = -torch.sum((target_probs * log_probs).to(torch.float64), dim=1)
    out = per_row.mean().to(logits.dtype)
    record("softmax_cross_entropy", (logits, target_probs), out)
    return check_finite(out, "softmax_cross_entropy")


def one_hot(labels: torch.Tensor, class_count: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return F.one_hot(labels.long(), class_count).to(dtype)
