"""Checkpoint files.

Layout::

    b"CBK1"                      magic, 4 bytes
    uint32 little-endian         header length in bytes
    header                       UTF-8 JSON, sorted keys, no whitespace
    float32 little-endian blocks kernel then bias, in layer order

The header carries the format version, input shape, class count, the layer
list, training metadata and the shape of every block, so the file size is
``8 + header length + 4 * parameter count``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from app.errors import ArtifactIOError, CheckpointFormatError, ModelConfigError
from app.models.network_models import LayerSpec, TrainingMetadata
from app.network.params import ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"CBK1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<I")
_FLOAT = np.dtype("<f4")


@dataclass(eq=False)
class Checkpoint:
    params: ModelParams
    metadata: TrainingMetadata = field(default_factory=TrainingMetadata)
    format_version: int = FORMAT_VERSION

    @property
    def layers(self) -> list[LayerSpec]:
        return self.params.layers


def _header(ckpt: Checkpoint) -> bytes:
    params = ckpt.params
    header = {
        "format_version": ckpt.format_version,
        "input_shape": list(params.input_shape),
        "class_count": params.class_count,
        "layers": [spec.model_dump(mode="json") for spec in params.layers],
        "metadata": ckpt.metadata.model_dump(mode="json"),
        "blocks": [
            {"layer": s.name, "kernel": list(params.kernel(s.name).shape), "bias": list(params.bias(s.name).shape)}
            for s in params.layers
            if s.name in params.tensors
        ],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = _header(ckpt)
    chunks = [MAGIC, _LENGTH.pack(len(header)), header]
    for tensor in ckpt.params.parameters():
        chunks.append(tensor.detach().to(torch.float32).contiguous().numpy().astype(_FLOAT, copy=False).tobytes())
    return b"".join(chunks)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 8:
        raise CheckpointFormatError("truncated checkpoint: missing header length")
    (header_len,) = _LENGTH.unpack_from(raw, 4)
    if len(raw) < 8 + header_len:
        raise CheckpointFormatError("truncated checkpoint: header cut short")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from exc

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")

    try:
        layers = [LayerSpec(**spec) for spec in header["layers"]]
        metadata = TrainingMetadata(**header["metadata"])
        blocks = header["blocks"]
        input_shape = tuple(header["input_shape"])
        class_count = int(header["class_count"])
    except (KeyError, TypeError, ValidationError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint header: {exc}") from exc

    offset = 8 + header_len
    tensors: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
    for block in blocks:
        pair = []
        for key in ("kernel", "bias"):
            shape = tuple(block[key])
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(raw):
                raise CheckpointFormatError(
                    f"truncated checkpoint: block '{block['layer']}.{key}' needs bytes up to {end}, file has {len(raw)}"
                )
            values = np.frombuffer(raw, dtype=_FLOAT, count=count, offset=offset).astype(np.float32)
            pair.append(torch.from_numpy(values.reshape(shape)))
            offset = end
        tensors[block["layer"]] = (pair[0], pair[1])
    if offset != len(raw):
        raise CheckpointFormatError(f"{len(raw) - offset} trailing bytes after the last parameter block")

    try:
        params = ModelParams(layers=layers, tensors=tensors, input_shape=input_shape, class_count=class_count)
    except ModelConfigError as exc:
        raise CheckpointFormatError(f"checkpoint parameters do not match its layers: {exc}") from exc
    return Checkpoint(params=params, metadata=metadata, format_version=version)


# ── Public API ────────────────────────────────────────────────────────────────


def save_checkpoint(path: Path | str, ckpt: Checkpoint) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(ckpt))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc
    logger.info("Saved checkpoint %s (%s, %d params)", path, ckpt.metadata.role, ckpt.params.parameter_count())
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    ckpt = decode_checkpoint(raw)
    logger.info("Loaded checkpoint %s (%s)", path, ckpt.metadata.role)
    return ckpt
