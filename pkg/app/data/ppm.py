"""Binary PPM (P6) images and contact-sheet grids.

Images are ``[3, H, W]`` float tensors in ``[0, 1]``; on disk every channel
value is ``round(clamp(v, 0, 1) * 255)`` stored row-major as RGB triples.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from app.errors import ArtifactIOError, DatasetParseError, ShapeMismatchError

logger = logging.getLogger(__name__)

MAGIC = b"P6"


def encode_ppm(image: torch.Tensor) -> bytes:
    if image.dim() != 3 or image.shape[0] not in (1, 3):
        raise ShapeMismatchError(f"PPM image must be [1|3, H, W], got {list(image.shape)}")
    if image.shape[0] == 1:
        image = image.expand(3, -1, -1)
    _, height, width = image.shape
    pixels = torch.round(image.detach().clamp(0.0, 1.0) * 255.0).to(torch.uint8)
    body = pixels.permute(1, 2, 0).contiguous().numpy().tobytes()
    return b"P6\n%d %d\n255\n" % (width, height) + body


def write_ppm(path: Path | str, image: torch.Tensor) -> Path:
    path = Path(path)
    data = encode_ppm(image)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    logger.debug("Wrote %s", path)
    return path


def _header_fields(raw: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers, skipping ``#`` comments.

    Returns the integers and the offset of the single whitespace byte that
    ends the header.
    """
    values: list[int] = []
    pos = len(MAGIC)
    while len(values) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DatasetParseError("malformed PPM header", offset=pos)
        values.append(int(raw[start:pos]))
    return values, pos


def decode_ppm(raw: bytes) -> torch.Tensor:
    if raw[: len(MAGIC)] != MAGIC:
        raise DatasetParseError("not a binary PPM (P6) file", offset=0)
    (width, height, maxval), pos = _header_fields(raw, 3)
    if not 0 < maxval <= 255:
        raise DatasetParseError(f"unsupported PPM maxval {maxval}", offset=pos)
    start = pos + 1
    expected = width * height * 3
    if len(raw) - start < expected:
        raise DatasetParseError(
            f"PPM pixel data truncated: need {expected} bytes, found {len(raw) - start}",
            offset=len(raw),
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=start)
    image = torch.from_numpy(pixels.reshape(height, width, 3).astype(np.float32) / maxval)
    return image.permute(2, 0, 1).contiguous()


def read_ppm(path: Path | str) -> torch.Tensor:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return decode_ppm(raw)


def image_grid(images: torch.Tensor, columns: int, pad: int = 1, pad_value: float = 1.0) -> torch.Tensor:
    """Tile ``[N, C, H, W]`` images into one ``[C, H', W']`` sheet, row-major."""
    if images.dim() != 4:
        raise ShapeMismatchError(f"image_grid needs [N, C, H, W], got {list(images.shape)}")
    n, c, h, w = images.shape
    columns = max(1, min(columns, n))
    rows = max(1, -(-n // columns))
    sheet = torch.full((c, rows * (h + pad) + pad, columns * (w + pad) + pad), pad_value)
    for i in range(n):
        r, col = divmod(i, columns)
        top, left = pad + r * (h + pad), pad + col * (w + pad)
        sheet[:, top : top + h, left : left + w] = images[i].detach()
    return sheet
