"""Error types raised by the lab.

Every error carries a stable ``code`` (the class name) so the command line
can report failures as a single machine-parsable line.
"""

from __future__ import annotations


class LabError(Exception):
    """Base class for all errors raised by the lab."""

    @property
    def code(self) -> str:
        return type(self).__name__


# ── Tensors / autodiff ───────────────────────────────────────────────────────


class ShapeMismatchError(LabError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(LabError):
    """A tensor contains NaN or Inf values."""


class NormalizationError(LabError):
    """A probability vector does not sum to one."""


class TapeConsumedError(LabError):
    """A backward pass was requested on a tape that was already consumed."""


class NonScalarLossError(LabError):
    """backward() was called on a tensor with more than one element."""


# ── Network / data ───────────────────────────────────────────────────────────


class UnknownLayerError(LabError):
    """A layer name does not exist in the network."""


class InvalidChannelRefError(LabError):
    """A ChannelRef does not point at an existing conv channel."""


class ModelConfigError(LabError):
    """A layer list does not type-check on the declared input shape."""


class EmptyDatasetError(LabError):
    """An operation needs at least one sample (or class) and got none."""


class CheckpointFormatError(LabError):
    """A checkpoint file is malformed (magic, version or length)."""


class ArtifactIOError(LabError):
    """A file could not be read or written."""


class DatasetParseError(LabError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        super().__init__(message)
        self.offset = offset


# ── Circuits / metrics ───────────────────────────────────────────────────────


class ZeroVarianceError(LabError):
    """A correlation is undefined because one series is constant."""


class DegenerateRankingError(LabError):
    """A rank correlation is undefined because one list is entirely tied."""


class KernelSetMismatchError(LabError):
    """Two attribution tables (or a table and a mask) cover different kernels."""


class EmptyGraphError(LabError):
    """A circuit graph without nodes cannot be exported."""


class DegenerateEmbeddingError(LabError):
    """An embedding or mean embedding has zero norm."""


class InsufficientSamplesError(LabError):
    """Too few samples survive for the statistic to be defined."""


# ── Attacks ──────────────────────────────────────────────────────────────────


class FoolSetError(LabError):
    """The fool set is empty, out of range, or too close to a synthetic image."""


class AttackDivergedError(LabError):
    """The maintain loss exceeded the divergence guard."""


# ── Configuration ────────────────────────────────────────────────────────────


class ConfigError(LabError):
    """The run configuration is invalid or references missing files."""
