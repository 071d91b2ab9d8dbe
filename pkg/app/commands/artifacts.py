"""Output layout and file writers shared by the pipeline commands.

    <out>/checkpoints/{baseline,reference,attacked}.cbk
    <out>/featvis/<model>/<layer>/synth_<c>.ppm, natural_<c>.ppm, grid.ppm
    <out>/circuits/<model>/<layer>_<c>/table.json, mask_<s>.json, graph_<s>.dot
    <out>/attack/report*.json
    <out>/evaluate/report.json, histograms/<layer>.csv
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import TypeVar

import numpy as np
import torch
from pydantic import BaseModel

from app.data.ppm import read_ppm
from app.models.network_models import ChannelRef
from app.models.report_models import LayerSimilarity

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)


def featvis_dir(out_dir: Path, model: str, layer: str) -> Path:
    return out_dir / "featvis" / model / layer


def synth_path(out_dir: Path, model: str, ref: ChannelRef) -> Path:
    return featvis_dir(out_dir, model, ref.layer) / f"synth_{ref.channel}.ppm"


def circuit_dir(out_dir: Path, model: str, head: ChannelRef) -> Path:
    return out_dir / "circuits" / model / f"{head.layer}_{head.channel}"


def sparsity_tag(sparsity: float) -> str:
    return f"{sparsity:g}"


def write_json(path: Path, model: BaseModel) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.debug("Wrote %s", path)
    return path


def read_json(path: Path, cls: type[M]) -> M:
    return cls.model_validate_json(path.read_text(encoding="utf-8"))


def cached_synths(out_dir: Path, model: str, layer: str, width: int) -> torch.Tensor | None:
    """Synthetic images of a whole layer written by an earlier featvis run, if complete."""
    paths = [featvis_dir(out_dir, model, layer) / f"synth_{c}.ppm" for c in range(width)]
    if not all(p.exists() for p in paths):
        return None
    return torch.stack([read_ppm(p) for p in paths])


def write_histogram_csv(path: Path, record: LayerSimilarity) -> Path:
    """Histogram bins of the before/after pairwise similarity distributions."""
    path.parent.mkdir(parents=True, exist_ok=True)
    before = record.before.histogram if record.before else None
    after = record.after.histogram if record.after else None
    bins = len(before or after or [])
    edges = np.linspace(-1.0, 1.0, bins + 1)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", "before", "after"])
        for i in range(bins):
            writer.writerow([
                f"{edges[i]:.2f}",
                f"{edges[i + 1]:.2f}",
                "" if before is None else before[i],
                "" if after is None else after[i],
            ])
    return path
