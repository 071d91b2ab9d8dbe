"""Operation tape and backward pass.

Reverse-mode differentiation itself is torch autograd; the tape adds the
bookkeeping the lab relies on: an ordered record of the primitives executed
inside a forward pass, and the rule that a recording is consumed by exactly
one backward pass.
"""

from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch

from app.errors import NonScalarLossError, TapeConsumedError

logger = logging.getLogger(__name__)

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


@dataclass(frozen=True)
class TapeRecord:
    """One primitive application: op name, inputs and output."""

    op: str
    inputs: tuple[torch.Tensor, ...]
    output: torch.Tensor


@dataclass(eq=False)
class Tape:
    """Ordered record of primitives for a single forward pass.

    Use as a context manager; primitives from :mod:`app.autodiff.ops`
    executed inside the block are appended in execution order, so every
    record's inputs were produced before it.
    """

    records: list[TapeRecord] = field(default_factory=list)
    consumed: bool = False
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeConsumedError("tape was consumed; call reset() before recording again")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor) -> None:
        if self.consumed:
            raise TapeConsumedError(f"cannot record '{op}' on a consumed tape")
        self.records.append(TapeRecord(op=op, inputs=tuple(inputs), output=output))

    def reset(self) -> None:
        """Drop all records and make the tape reusable."""
        self.records.clear()
        self.consumed = False

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]


def active_tape() -> Tape | None:
    """Return the tape currently recording, if any."""
    return _ACTIVE_TAPE.get()


def record(op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor) -> None:
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(op, inputs, output)


def backward(loss: torch.Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Raises
    ------
    NonScalarLossError  if ``loss`` has more than one element
    TapeConsumedError   if the recording was already used by a backward pass
    """
    tape = tape if tape is not None else _ACTIVE_TAPE.get()
    if loss.numel() != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if tape is not None and tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise TapeConsumedError("loss carries no recorded graph")

    try:
        loss.backward()
    except RuntimeError as exc:
        if "second time" in str(exc):
            raise TapeConsumedError("graph already consumed by a previous backward pass") from exc
        raise

    if tape is not None:
        tape.consumed = True


def gradients(
    output: torch.Tensor,
    inputs: Sequence[torch.Tensor],
    create_graph: bool = False,
) -> list[torch.Tensor]:
    """Gradients of a scalar ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs the output does not depend on receive zeros instead of ``None``.
    With ``create_graph=True`` the result is itself differentiable.
    """
    if output.numel() != 1:
        raise NonScalarLossError(f"gradients need a scalar output, got shape {list(output.shape)}")
    grads = torch.autograd.grad(
        output,
        list(inputs),
        create_graph=create_graph,
        retain_graph=create_graph,
        allow_unused=True,
    )
    return [torch.zeros_like(t) if g is None else g for g, t in zip(grads, inputs)]


def set_deterministic(seed: int, num_threads: int = 1) -> torch.Generator:
    """Seed torch, force deterministic kernels and pin the thread count."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(num_threads)
    logger.debug("Deterministic mode: seed=%d threads=%d", seed, num_threads)
    return torch.Generator().manual_seed(seed)
