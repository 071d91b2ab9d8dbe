"""Pipeline stages: train, featvis, discover, attack, evaluate, export.

Every command takes a validated RunConfig, writes its artifacts under
``cfg.out_dir`` and returns the paths it wrote. Library errors propagate;
the CLI turns them into one-line messages.
"""

from __future__ import annotations

import logging
from pathlib import Path

import torch

from app.attacks.attack_loop import run_attack
from app.attacks.fool_set import FoolSet
from app.autodiff import set_deterministic
from app.circuits.attribution import snip_attribution
from app.circuits.extraction import extract_circuit
from app.circuits.graph import build_circuit_graph, export_dot
from app.commands import artifacts
from app.config import RunConfig
from app.data.datasets import Dataset, load_dataset
from app.data.ppm import image_grid, write_ppm
from app.errors import ConfigError
from app.events import log_event
from app.featvis.natural import natural_topk
from app.featvis.synthetic import synth_featvis
from app.metrics.embedding import ReferenceEmbedder
from app.metrics.evaluation import SynthCache, evaluate_models
from app.models.network_models import ChannelRef, KernelId, TrainingMetadata
from app.network.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.network.mini_alexnet import build_mini_alexnet
from app.network.params import ModelParams
from app.network.training import train_baseline_with_history

logger = logging.getLogger(__name__)


def _prepare(cfg: RunConfig) -> Dataset:
    set_deterministic(cfg.seed, cfg.num_threads)
    return load_dataset(cfg.dataset)


def _load_params(cfg: RunConfig, role: str) -> ModelParams:
    path = cfg.checkpoint_path(role)
    if not path.exists():
        raise ConfigError(f"{role} checkpoint {path} not found; run 'train' or set {role}_checkpoint")
    return load_checkpoint(path).params


# ── train ─────────────────────────────────────────────────────────────────────


def cmd_train(cfg: RunConfig) -> list[Path]:
    """Train the baseline classifier and the independently seeded reference embedder."""
    dataset = _prepare(cfg)
    written = []
    for role, seed in (("baseline", cfg.seed), ("reference", cfg.train.reference_seed)):
        _, params = build_mini_alexnet(dataset.image_shape, dataset.class_count, seed)
        run = train_baseline_with_history(params, dataset, cfg.train.epochs, cfg.train.lr, cfg.train.batch, seed)
        metadata = TrainingMetadata(seed=seed, epochs=cfg.train.epochs, final_accuracy=run.holdout_accuracy, role=role)
        written.append(save_checkpoint(cfg.checkpoint_path(role), Checkpoint(params=run.params, metadata=metadata)))
        log_event("train_finished", role=role, seed=seed, accuracy=run.holdout_accuracy, losses=run.epoch_losses)
    return written


# ── featvis ───────────────────────────────────────────────────────────────────


def cmd_featvis(cfg: RunConfig, model: str = "baseline") -> list[Path]:
    """Synthetic image and natural top-k grid for every channel of the configured layers."""
    dataset = _prepare(cfg)
    params = _load_params(cfg, model)
    fv = cfg.featvis
    k = min(fv.topk, len(dataset))
    written = []
    for layer in fv.layers:
        out = artifacts.featvis_dir(cfg.out_dir, model, layer)
        synths = []
        for channel in range(params.width(layer)):
            ref = ChannelRef(layer=layer, channel=channel)
            synth = synth_featvis(params, ref, fv.steps, fv.lr, cfg.seed, jitter=fv.jitter)
            synths.append(synth.image)
            written.append(write_ppm(out / f"synth_{channel}.ppm", synth.image))
            if k:
                top = natural_topk(params, dataset, ref, k)
                grid = image_grid(dataset.images[top.indices], columns=k)
                written.append(write_ppm(out / f"natural_{channel}.ppm", grid))
        written.append(write_ppm(out / "grid.ppm", image_grid(torch.stack(synths), columns=8)))
        logger.info("featvis %s/%s: %d channels", model, layer, len(synths))
    return written


# ── discover / export ─────────────────────────────────────────────────────────


def _discover_head(
    cfg: RunConfig, params: ModelParams, dataset: Dataset, model: str, head: ChannelRef, with_images: bool
) -> list[Path]:
    out = artifacts.circuit_dir(cfg.out_dir, model, head)
    sample_count = min(cfg.circuits.sample_count, len(dataset))
    table = snip_attribution(params, head, dataset, sample_count)
    written = [artifacts.write_json(out / "table.json", table)]

    images: dict[KernelId, Path] = {}
    for sparsity in cfg.circuits.sparsities:
        tag = artifacts.sparsity_tag(sparsity)
        mask = extract_circuit(table, sparsity, cfg.circuits.scope)
        written.append(artifacts.write_json(out / f"mask_{tag}.json", mask))
        graph = build_circuit_graph(table, mask, cfg.circuits.top_n)
        if with_images:
            for node in graph.nodes:
                key = KernelId(layer=node.layer, out_channel=node.channel)
                if key not in images:
                    ref = ChannelRef(layer=node.layer, channel=node.channel)
                    synth = synth_featvis(params, ref, cfg.featvis.steps, cfg.featvis.lr, cfg.seed, jitter=cfg.featvis.jitter)
                    images[key] = write_ppm(out / "nodes" / f"{node.node_id}.ppm", synth.image)
                    written.append(images[key])
            graph = build_circuit_graph(table, mask, cfg.circuits.top_n, images)
        else:
            present = {}
            for node in graph.nodes:
                path = artifacts.synth_path(cfg.out_dir, model, ChannelRef(layer=node.layer, channel=node.channel))
                if path.exists():
                    present[KernelId(layer=node.layer, out_channel=node.channel)] = path
            if present:
                graph = build_circuit_graph(table, mask, cfg.circuits.top_n, present)
        written.append(export_dot(graph, out / f"graph_{tag}.dot"))
    return written


def cmd_discover(cfg: RunConfig, model: str = "baseline") -> list[Path]:
    """Attribution table, masks at every sparsity and a DOT graph per sparsity for each head."""
    dataset = _prepare(cfg)
    params = _load_params(cfg, model)
    written = []
    for name in cfg.circuits.heads:
        head = params.validate_ref(ChannelRef.parse(name))
        written.extend(_discover_head(cfg, params, dataset, model, head, with_images=False))
    return written


def cmd_export(cfg: RunConfig, model: str = "baseline") -> list[Path]:
    """Like discover, plus a synthetic image for every graph node and top-k sheets for the head."""
    dataset = _prepare(cfg)
    params = _load_params(cfg, model)
    written = []
    for name in cfg.circuits.heads:
        head = params.validate_ref(ChannelRef.parse(name))
        written.extend(_discover_head(cfg, params, dataset, model, head, with_images=True))
        k = min(cfg.featvis.topk, len(dataset))
        if k:
            top = natural_topk(params, dataset, head, k)
            out = artifacts.circuit_dir(cfg.out_dir, model, head) / "head_natural.ppm"
            written.append(write_ppm(out, image_grid(dataset.images[top.indices], columns=k)))
    return written


# ── attack ────────────────────────────────────────────────────────────────────


def _proxpulse_inputs(cfg: RunConfig, dataset: Dataset, params: ModelParams) -> tuple[FoolSet, torch.Tensor | None]:
    """Fool set plus the target layer's synthetic images from an earlier featvis run, if any."""
    attack = cfg.attack
    if attack.fool_targets:
        fool_set = FoolSet.from_paths(attack.fool_targets)
    else:
        pool, _ = dataset.holdout_split()
        fool_set = FoolSet.from_dataset(pool, attack.fool_set_size, attack.seed)
    cached = artifacts.cached_synths(cfg.out_dir, "baseline", attack.target_layer, params.width(attack.target_layer))
    return fool_set, cached


def cmd_attack(cfg: RunConfig) -> list[Path]:
    """Fine-tune the baseline with ProxPulse or CircuitBreaker.

    CircuitBreaker heads run together when ``attack.simultaneous`` is set
    (or there is only one head); otherwise each head gets its own run,
    checkpoint and report.
    """
    dataset = _prepare(cfg)
    source = load_checkpoint(cfg.checkpoint_path("baseline"))
    attack = cfg.attack
    written = []
    synths: torch.Tensor | None = None

    if attack.kind == "proxpulse":
        fool_set, synths = _proxpulse_inputs(cfg, dataset, source.params)
        runs = [("", attack, fool_set)]
    elif attack.simultaneous or len(attack.heads) <= 1:
        runs = [("", attack, None)]
    else:
        runs = [
            (f"_{ChannelRef.parse(h).layer}_{ChannelRef.parse(h).channel}", attack.model_copy(update={"heads": [h]}), None)
            for h in attack.heads
        ]

    for suffix, run_cfg, fool_set in runs:
        result, report = run_attack(
            source.params, run_cfg.kind, run_cfg, dataset,
            fool_set=fool_set, featvis=cfg.featvis, circuits=cfg.circuits, initial_synths=synths,
        )
        ckpt_path = cfg.checkpoint_path("attacked")
        if suffix:
            ckpt_path = ckpt_path.with_name(f"{ckpt_path.stem}{suffix}{ckpt_path.suffix}")
        written.append(save_checkpoint(ckpt_path, Checkpoint(params=result, metadata=source.metadata)))
        written.append(artifacts.write_json(cfg.out_dir / "attack" / f"report{suffix}.json", report))
    return written


# ── evaluate ──────────────────────────────────────────────────────────────────


def cmd_evaluate(cfg: RunConfig, initial: Path | None = None, final: Path | None = None) -> list[Path]:
    """MetricReport comparing two checkpoints (default: baseline vs attacked)."""
    dataset = _prepare(cfg)
    initial_path = initial or cfg.checkpoint_path("baseline")
    final_path = final or cfg.checkpoint_path("attacked")
    for path in (initial_path, final_path, cfg.checkpoint_path("reference")):
        if not path.exists():
            raise ConfigError(f"checkpoint {path} not found")

    embedder = ReferenceEmbedder(load_checkpoint(cfg.checkpoint_path("reference")).params)
    before = load_checkpoint(initial_path).params
    after = load_checkpoint(final_path).params
    models = {"initial": before, "final": after}
    synths = _SharedSynthCache(models, cfg) if before.equals(after) else SynthCache(models, cfg)

    report = evaluate_models(before, after, embedder, dataset, cfg, synths)
    out = cfg.out_dir / "evaluate"
    written = [artifacts.write_json(out / "report.json", report)]
    for record in report.layers:
        written.append(artifacts.write_histogram_csv(out / "histograms" / f"{record.layer}.csv", record))
    log_event(
        "evaluate_finished",
        initial=str(initial_path),
        final=str(final_path),
        accuracy=[report.initial_accuracy, report.final_accuracy],
    )
    return written


class _SharedSynthCache(SynthCache):
    """Both roles read one cache when the two models are bitwise identical."""

    def layer(self, role: str, layer: str) -> torch.Tensor:
        return super().layer("initial", layer)
