"""Shared pytest fixtures for the featvis lab test suite."""

from __future__ import annotations

import pytest
import torch

from app.attacks.attack_loop import run_attack
from app.autodiff import set_deterministic
from app.config import RunConfig, get_settings, load_run_config, use_settings
from app.data.datasets import Dataset, synthetic_blobs
from app.featvis.activation import layer_energy
from app.metrics.embedding import ReferenceEmbedder
from app.metrics.evaluation import evaluate_models
from app.models.config_models import AttackConfig
from app.models.network_models import ChannelRef, LayerSpec
from app.models.report_models import AttackReport, MetricReport
from app.network.mini_alexnet import build_mini_alexnet, build_network
from app.network.params import ModelParams
from app.network.training import train_baseline

TOY_SHAPE = (3, 8, 8)
DESK_SHAPE = (3, 32, 32)
DESK_CLASSES = 10


# ── Toy networks ──────────────────────────────────────────────────────────────


def toy_layers(width: int = 4, class_count: int = 2) -> list[LayerSpec]:
    """Two 3x3 same-padded conv layers, no pooling, linear head."""
    return [
        LayerSpec(name="c1", kind="conv", out_channels=width, kernel_size=3, padding=1),
        LayerSpec(name="r1", kind="relu"),
        LayerSpec(name="c2", kind="conv", out_channels=width, kernel_size=3, padding=1),
        LayerSpec(name="r2", kind="relu"),
        LayerSpec(name="flat", kind="flatten"),
        LayerSpec(name="fc", kind="linear", out_features=class_count),
    ]


def toy_net(seed: int = 0, width: int = 4) -> ModelParams:
    return build_network(toy_layers(width), TOY_SHAPE, 2, seed)


def linear_net(width: int = 1, bias: float = 10.0, seed: int = 0) -> ModelParams:
    """A 4x4 kernel over a [3, 4, 4] input: every channel map is 1x1 and, with a
    large bias, always active, so activations are linear in the input."""
    layers = [
        LayerSpec(name="c", kind="conv", out_channels=width, kernel_size=4),
        LayerSpec(name="r", kind="relu"),
        LayerSpec(name="flat", kind="flatten"),
        LayerSpec(name="fc", kind="linear", out_features=2),
    ]
    generator = torch.Generator().manual_seed(seed)
    tensors = {
        "c": (torch.randn((width, 3, 4, 4), generator=generator), torch.full((width,), bias)),
        "fc": (torch.randn((2, width), generator=generator), torch.zeros(2)),
    }
    return ModelParams(layers=layers, tensors=tensors, input_shape=(3, 4, 4), class_count=2)


def scalar_net(weight: float) -> ModelParams:
    """One-pixel, one-channel network whose channel map is ``relu(weight * x)``."""
    layers = [
        LayerSpec(name="c", kind="conv", out_channels=1, kernel_size=1),
        LayerSpec(name="r", kind="relu"),
        LayerSpec(name="flat", kind="flatten"),
        LayerSpec(name="fc", kind="linear", out_features=2),
    ]
    tensors = {
        "c": (torch.full((1, 1, 1, 1), weight), torch.zeros(1)),
        "fc": (torch.tensor([[1.0], [-1.0]]), torch.zeros(2)),
    }
    return ModelParams(layers=layers, tensors=tensors, input_shape=(1, 1, 1), class_count=2)


def as_double(params: ModelParams, requires_grad: bool = False) -> ModelParams:
    tensors = {
        name: (k.detach().double().requires_grad_(requires_grad), b.detach().double().requires_grad_(requires_grad))
        for name, (k, b) in params.tensors.items()
    }
    return ModelParams(
        layers=list(params.layers), tensors=tensors, input_shape=params.input_shape, class_count=params.class_count
    )


def live_heads(params: ModelParams, images: torch.Tensor, layer: str, count: int) -> list[ChannelRef]:
    """The ``count`` channels of ``layer`` whose energy varies most across ``images``."""
    with torch.no_grad():
        spread = layer_energy(params, images, layer).var(dim=0)
    order = sorted(range(spread.shape[0]), key=lambda c: (-float(spread[c]), c))
    return [ChannelRef(layer=layer, channel=c) for c in order[:count]]


def live_head(params: ModelParams, images: torch.Tensor, layer: str) -> ChannelRef:
    """The channel of ``layer`` whose energy varies most across ``images``."""
    return live_heads(params, images, layer, 1)[0]


def toy_run_config(tmp_path, **overrides) -> RunConfig:
    """RunConfig sized for the toy network: layer c2, few featvis steps."""
    values = {
        "out_dir": str(tmp_path / "out"),
        "log_dir": str(tmp_path / "logs"),
        "featvis": {"steps": 4, "topk": 3, "layers": ["c2"]},
        "circuits": {"heads": ["c2:0"], "sparsities": [1.0, 0.5], "sample_count": 4, "top_n": 2},
        "attack": {"target_layer": "c2", "batch": 16, "epochs": 1},
        "evaluation": {"subset_size": 40},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            values.setdefault(key, {}).update(value)
        else:
            values[key] = value
    return load_run_config(None, values)


# ── Fixtures ──────────────────────────────────────────────────────────────────


@pytest.fixture(autouse=True)
def lab_settings(tmp_path) -> RunConfig:
    """Route event logs into the test's temporary directory."""
    cfg = RunConfig(out_dir=tmp_path / "out", log_dir=tmp_path / "logs")
    use_settings(cfg)
    yield cfg
    use_settings(None)


@pytest.fixture(scope="session")
def blobs() -> Dataset:
    """Two-class 8x8 synthetic blobs, 40 images per class."""
    return synthetic_blobs(2, 40, TOY_SHAPE, seed=0)


@pytest.fixture(scope="session")
def trained_toy(blobs) -> ModelParams:
    params, _ = train_baseline(toy_net(seed=0), blobs, epochs=25, lr=0.02, batch=16, seed=0)
    return params


@pytest.fixture
def toy_head(trained_toy, blobs) -> ChannelRef:
    return live_head(trained_toy, blobs.images, "c2")


# ── Desk-scale runs (slow tests only) ─────────────────────────────────────────


def run_with_settings(cfg: RunConfig, fn, *args, **kwargs):
    """Call ``fn`` with ``cfg`` active, then restore the previous settings."""
    previous = get_settings()
    use_settings(cfg)
    try:
        return fn(*args, **kwargs)
    finally:
        use_settings(previous)


@pytest.fixture(scope="session")
def desk_run_config(tmp_path_factory) -> RunConfig:
    """MiniAlexNet on blobs with conv4 attacked; events go to a session temp dir."""
    root = tmp_path_factory.mktemp("desk")
    return load_run_config(
        None,
        {
            "out_dir": str(root / "out"),
            "log_dir": str(root / "logs"),
            "featvis": {"layers": ["conv4"]},
            "attack": {"target_layer": "conv4"},
        },
    )


@pytest.fixture(scope="session")
def desk_blobs() -> Dataset:
    """Ten-class 32x32 synthetic blobs, 100 images per class."""
    return synthetic_blobs(DESK_CLASSES, 100, DESK_SHAPE, seed=0)


@pytest.fixture(scope="session")
def desk_models(desk_run_config, desk_blobs) -> tuple[ModelParams, ModelParams]:
    """MiniAlexNet baseline (seed 0) and reference embedder, trained with the default settings."""
    train = desk_run_config.train
    models = []
    for seed in (desk_run_config.seed, train.reference_seed):
        set_deterministic(seed)
        _, params = build_mini_alexnet(DESK_SHAPE, DESK_CLASSES, seed)
        trained, _ = run_with_settings(
            desk_run_config, train_baseline, params, desk_blobs, train.epochs, train.lr, train.batch, seed
        )
        models.append(trained)
    return models[0], models[1]


def desk_attack(cfg: RunConfig, baseline: ModelParams, kind: str, attack: AttackConfig, dataset: Dataset):
    set_deterministic(attack.seed)
    return run_with_settings(cfg, run_attack, baseline, kind, attack, dataset)


@pytest.fixture(scope="session")
def desk_proxpulse(desk_run_config, desk_blobs, desk_models) -> tuple[ModelParams, AttackReport]:
    """ProxPulse on conv4 with the default attack settings."""
    return desk_attack(desk_run_config, desk_models[0], "proxpulse", AttackConfig(target_layer="conv4"), desk_blobs)


@pytest.fixture(scope="session")
def desk_control(desk_run_config, desk_blobs, desk_models) -> tuple[ModelParams, AttackReport]:
    """The same run with alpha=0: only the maintain loss drives the weights."""
    control = AttackConfig(target_layer="conv4", alpha=0.0)
    return desk_attack(desk_run_config, desk_models[0], "proxpulse", control, desk_blobs)


@pytest.fixture(scope="session")
def desk_heads(desk_blobs, desk_models) -> list[ChannelRef]:
    """Ten live conv4 heads of the baseline."""
    return live_heads(desk_models[0], desk_blobs.images[:512], "conv4", 10)


@pytest.fixture(scope="session")
def desk_circuitbreaker(desk_run_config, desk_blobs, desk_models, desk_heads) -> list[tuple[ChannelRef, ModelParams, AttackReport]]:
    """CircuitBreaker run independently on the five liveliest heads."""
    runs = []
    for head in desk_heads[:5]:
        cfg = AttackConfig(kind="circuitbreaker", target_layer="conv4", heads=[str(head)])
        attacked, report = desk_attack(desk_run_config, desk_models[0], "circuitbreaker", cfg, desk_blobs)
        runs.append((head, attacked, report))
    return runs


def desk_metrics(cfg: RunConfig, models: tuple[ModelParams, ModelParams], final: ModelParams, dataset: Dataset, heads: list[ChannelRef]) -> MetricReport:
    """Evaluate ``final`` against the baseline with circuit metrics for ``heads``."""
    baseline, reference = models
    circuits = cfg.circuits.model_copy(update={"heads": [str(h) for h in heads]})
    cfg = cfg.model_copy(update={"circuits": circuits})
    return run_with_settings(cfg, evaluate_models, baseline, final, ReferenceEmbedder(reference), dataset, cfg)


@pytest.fixture(scope="session")
def desk_proxpulse_metrics(desk_run_config, desk_blobs, desk_models, desk_proxpulse, desk_heads) -> MetricReport:
    return desk_metrics(desk_run_config, desk_models, desk_proxpulse[0], desk_blobs, desk_heads)


@pytest.fixture(scope="session")
def desk_control_metrics(desk_run_config, desk_blobs, desk_models, desk_control, desk_heads) -> MetricReport:
    return desk_metrics(desk_run_config, desk_models, desk_control[0], desk_blobs, desk_heads[:1])
