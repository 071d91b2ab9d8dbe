"""Attack losses, the fool set and the fine-tuning loop."""

from __future__ import annotations

import math
from unittest.mock import patch

import pytest
import torch
from torch.autograd import gradcheck

from app.attacks.attack_loop import layer_synths, run_attack
from app.attacks.fool_set import FoolSet
from app.attacks.losses import (
    HeadTarget,
    circuitbreaker_loss,
    epsilon_star,
    inner_loss,
    linearized_inner_max,
    maintain_loss,
    multi_head_loss,
    pairwise_hinge,
    proxpulse_loss,
    ranking_loss,
    sharpness_perturbation,
    top_init_from_table,
)
from app.autodiff import gradients, set_deterministic
from app.circuits.attribution import snip_attribution
from app.errors import AttackDivergedError, ConfigError, FoolSetError, KernelSetMismatchError
from app.models.config_models import AttackConfig, CircuitConfig, FeatvisConfig
from app.models.network_models import ChannelRef, LayerSpec
from app.models.report_models import AttackDiagnostics
from app.network.checkpoint import Checkpoint, encode_checkpoint
from app.network.mini_alexnet import logits
from app.network.params import ModelParams
from app.network.training import predict
from tests.conftest import as_double, linear_net, scalar_net, toy_net

SCALAR = ChannelRef(layer="c", channel=0)
QUICK_FEATVIS = FeatvisConfig(steps=3)


# ── Inner loss ────────────────────────────────────────────────────────────────


def test_inner_loss_values():
    one = torch.ones(1, 1, 1)
    assert inner_loss(scalar_net(3.0), one, SCALAR, big_c=9.0).item() == pytest.approx(math.log(2.0), rel=1e-6)
    assert inner_loss(scalar_net(1.0), one, SCALAR, big_c=1e6).item() == pytest.approx(13.8155116, rel=1e-6)


def test_inner_loss_clamps_dead_channels():
    diagnostics = AttackDiagnostics()
    value = inner_loss(scalar_net(0.0), torch.ones(1, 1, 1), SCALAR, big_c=1e6, diagnostics=diagnostics)
    assert value.item() == pytest.approx(math.log1p(1e18), rel=1e-5)
    assert diagnostics.clamped_norms == 1


def test_inner_loss_gradient_matches_finite_differences():
    params = as_double(toy_net(seed=3))
    ref = ChannelRef(layer="c2", channel=1)
    for seed in range(3):
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)).requires_grad_(True)
        assert gradcheck(lambda t: inner_loss(params, t, ref, big_c=10.0), (x,), eps=1e-6, atol=1e-5, rtol=1e-3)


# ── Sharpness step ────────────────────────────────────────────────────────────


def test_epsilon_has_norm_rho_and_points_against_the_kernel():
    params = linear_net(width=1, bias=10.0, seed=2)
    x = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(0))
    eps = epsilon_star(params, x, SCALAR, rho=0.05)
    kernel = params.kernel("c")[0]
    assert eps.shape == x.shape
    assert float(eps.norm()) == pytest.approx(0.05, rel=1e-5)
    assert float(torch.dot(eps.flatten(), kernel.flatten()) / (eps.norm() * kernel.norm())) == pytest.approx(-1.0, abs=1e-5)


def test_one_dimensional_surrogate():
    eps = sharpness_perturbation(lambda b: (b**2).sum(dim=1), torch.tensor([[-2.0]]), rho=0.5)
    assert eps.item() == pytest.approx(-0.5)


def test_zero_gradient_gives_zero_epsilon():
    diagnostics = AttackDiagnostics()
    eps = sharpness_perturbation(lambda b: (b**2).sum(dim=1), torch.tensor([[0.0], [1.0]]), 0.5, diagnostics)
    assert eps.flatten().tolist() == [0.0, 0.5]
    assert diagnostics.zero_gradient_epsilons == 1


def test_first_order_error_shrinks_quadratically():
    # l(x) = a x^2 on the interval [x - rho, x + rho]: exact max is a (|x| + rho)^2
    a, x = 0.7, torch.tensor([[1.5]], dtype=torch.float64)
    errors = []
    for rho in (1e-1, 1e-2, 1e-3):
        approx = float(linearized_inner_max(lambda b: a * (b**2).sum(dim=1), x, rho)[0])
        exact = a * (1.5 + rho) ** 2
        errors.append(exact - approx)
    for coarse, fine in zip(errors, errors[1:]):
        assert 50 <= coarse / fine <= 200


def test_epsilon_beats_random_directions():
    rho = 0.05
    for seed in range(10):
        params = toy_net(seed=seed)
        g = torch.Generator().manual_seed(100 + seed)
        x = torch.rand(1, 3, 8, 8, generator=g)
        ref = ChannelRef(layer="c2", channel=seed % 4)
        eps = epsilon_star(params, x, ref, rho)
        with torch.no_grad():
            ours = inner_loss(params, x + eps, ref).item()
            samples = []
            for _ in range(100):
                d = torch.randn(x.shape, generator=g)
                samples.append(inner_loss(params, x + rho * d / d.norm(), ref).item())
        spread = max(samples) - min(samples)
        assert ours >= max(samples) - 0.05 * spread - 1e-5


# ── ProxPulse ─────────────────────────────────────────────────────────────────


def test_proxpulse_sums_every_channel_and_target():
    params = linear_net(width=2, bias=10.0, seed=5)
    targets = torch.rand(2, 3, 4, 4, generator=torch.Generator().manual_seed(1))
    cfg = AttackConfig(target_layer="c", big_c=100.0, rho=0.01)

    plain = proxpulse_loss(params, FoolSet(targets), "c", cfg, perturb=False)
    terms = [
        inner_loss(params, targets[m], ChannelRef(layer="c", channel=j), cfg.big_c)
        for j in range(2)
        for m in range(2)
    ]
    assert plain.item() == pytest.approx(sum(t.item() for t in terms), rel=1e-5)

    perturbed = proxpulse_loss(params, FoolSet(targets), "c", cfg)
    expected = 0.0
    for j in range(2):
        ref = ChannelRef(layer="c", channel=j)
        for m in range(2):
            eps = epsilon_star(params, targets[m], ref, cfg.rho, cfg.big_c)
            expected += inner_loss(params, targets[m] + eps, ref, cfg.big_c).item()
    assert perturbed.item() == pytest.approx(expected, rel=1e-5)
    assert perturbed.item() > plain.item()


def test_proxpulse_over_no_targets_is_zero():
    cfg = AttackConfig(target_layer="c")
    assert proxpulse_loss(linear_net(), torch.empty(0, 3, 4, 4), "c", cfg).item() == 0.0


def test_fool_set_validation():
    with pytest.raises(FoolSetError):
        FoolSet(torch.empty(0, 3, 4, 4))
    with pytest.raises(FoolSetError):
        FoolSet(torch.full((1, 3, 4, 4), 1.5))
    fool = FoolSet(torch.full((1, 3, 4, 4), 0.5))
    with pytest.raises(FoolSetError):
        fool.check_shape((3, 8, 8))
    with pytest.raises(FoolSetError):
        fool.check_excludes(torch.full((2, 3, 4, 4), 0.5), rho=0.1)
    fool.check_excludes(torch.zeros(2, 3, 4, 4), rho=0.1)


def test_fool_set_draws_distinct_classes(blobs):
    fool = FoolSet.from_dataset(blobs, 2, seed=3)
    labels = {int(blobs.labels[int(s[len("dataset[") : -1])]) for s in fool.sources}
    assert labels == {0, 1}
    again = FoolSet.from_dataset(blobs, 2, seed=3)
    assert torch.equal(fool.targets, again.targets)


# ── Maintain ──────────────────────────────────────────────────────────────────


def test_maintain_loss_is_bounded_below_by_the_initial_entropy(blobs):
    params = toy_net(seed=1)
    x = blobs.images[:8]
    with torch.no_grad():
        log_p = torch.log_softmax(logits(params, x).double(), dim=1)
        entropy = float(-(log_p.exp() * log_p).sum(dim=1).mean())
    assert maintain_loss(params, params, x).item() == pytest.approx(entropy, rel=1e-4)

    moved = params.clone()
    moved.tensors["fc"] = (moved.kernel("fc") * 1.5, moved.bias("fc") + 0.3)
    assert maintain_loss(moved, params, x).item() >= entropy - 1e-5


def test_maintain_loss_gradient_matches_finite_differences(blobs):
    initial = as_double(toy_net(seed=1))
    x = blobs.images[:4].double()
    base = as_double(toy_net(seed=2))

    def loss(w: torch.Tensor) -> torch.Tensor:
        tensors = dict(base.tensors)
        tensors["fc"] = (w, base.bias("fc"))
        params = ModelParams(layers=base.layers, tensors=tensors, input_shape=base.input_shape, class_count=2)
        return maintain_loss(params, initial, x)

    w = base.kernel("fc").clone().requires_grad_(True)
    assert gradcheck(loss, (w,), eps=1e-6, atol=1e-5, rtol=1e-3)


# ── CircuitBreaker ────────────────────────────────────────────────────────────


def test_pairwise_hinge():
    scores = torch.tensor([0.6, 0.4, 0.8])
    top = torch.tensor([True, False, False])
    assert pairwise_hinge(scores, top).item() == pytest.approx(0.2)
    assert pairwise_hinge(scores, top, margin=0.2).item() == pytest.approx(0.4)
    assert pairwise_hinge(scores, torch.ones(3, dtype=torch.bool)).item() == 0.0


def fan_in_net(head_weights: list[float]) -> ModelParams:
    """Three unit 1x1 kernels on a scalar input feeding one head kernel with ``head_weights``.

    At ``x = 1`` the attribution of first-layer kernel ``k`` is ``head_weights[k]``.
    """
    layers = [
        LayerSpec(name="a", kind="conv", out_channels=3, kernel_size=1),
        LayerSpec(name="ra", kind="relu"),
        LayerSpec(name="b", kind="conv", out_channels=1, kernel_size=1),
        LayerSpec(name="rb", kind="relu"),
        LayerSpec(name="flat", kind="flatten"),
        LayerSpec(name="fc", kind="linear", out_features=2),
    ]
    tensors = {
        "a": (torch.ones(3, 1, 1, 1), torch.zeros(3)),
        "b": (torch.tensor(head_weights).view(1, 3, 1, 1), torch.zeros(1)),
        "fc": (torch.ones(2, 1), torch.zeros(2)),
    }
    return ModelParams(layers=layers, tensors=tensors, input_shape=(1, 1, 1), class_count=2)


def test_ranking_loss_hand_example():
    # top kernel scores 0.5 against 0.2 and 0.4: (0.5 - 0.2) + (0.5 - 0.4)
    params = fan_in_net([0.5, 0.2, 0.4]).clone(requires_grad=True)
    head = ChannelRef(layer="b", channel=0)
    loss = ranking_loss(params, head, {"a": [0]}, torch.ones(1, 1, 1, 1))
    assert loss.item() == pytest.approx(0.4, rel=1e-6)
    assert ranking_loss(params, head, {"a": [1]}, torch.ones(1, 1, 1, 1)).item() == 0.0


def test_top_init_keeps_non_top_kernels(trained_toy, blobs, toy_head):
    table = snip_attribution(trained_toy, toy_head, blobs, 8)
    top = top_init_from_table(table, topinit_count=50)
    assert list(top) == ["c1"]
    assert len(top["c1"]) == 2
    scores = table.layer_scores("c1")
    assert min(scores[c] for c in top["c1"]) >= max(scores[c] for c in range(4) if c not in top["c1"])


def test_ranking_loss_penalizes_kernels_still_on_top(trained_toy, blobs, toy_head):
    batch = blobs.images[:2]
    scores = snip_attribution(trained_toy, toy_head, batch, 2).layer_scores("c1")
    top = sorted(range(4), key=lambda c: -scores[c])[:2]
    work = trained_toy.clone(requires_grad=True)
    loss = ranking_loss(work, toy_head, {"c1": top}, batch)
    assert loss.item() > 0
    (grad,) = gradients(loss, [work.kernel("c1")])
    assert float(grad.abs().sum()) > 0


def test_ranking_loss_gradient_matches_finite_differences(trained_toy, blobs, toy_head):
    base = as_double(trained_toy)
    top = top_init_from_table(snip_attribution(trained_toy, toy_head, blobs, 8), 50)
    x = blobs.images[:1].double()

    def loss(k1: torch.Tensor) -> torch.Tensor:
        tensors = {
            name: (k.detach().clone().requires_grad_(True), b.detach().clone().requires_grad_(True))
            for name, (k, b) in base.tensors.items()
        }
        tensors["c1"] = (k1, tensors["c1"][1])
        params = ModelParams(layers=base.layers, tensors=tensors, input_shape=base.input_shape, class_count=2)
        return ranking_loss(params, toy_head, top, x)

    k1 = base.kernel("c1").clone().requires_grad_(True)
    assert gradcheck(loss, (k1,), eps=1e-6, atol=1e-4, rtol=1e-2)


def test_ranking_loss_rejects_foreign_top_init(trained_toy, toy_head, blobs):
    with pytest.raises(KernelSetMismatchError):
        ranking_loss(trained_toy.clone(requires_grad=True), toy_head, {"c2": [0]}, blobs.images[:1])


def test_multi_head_loss_is_the_sum_of_single_heads(trained_toy, blobs):
    cfg = AttackConfig(target_layer="c2", beta=0.5, rho=0.01)
    work = trained_toy.clone(requires_grad=True)
    batch = blobs.images[:2]
    targets = []
    for channel in (0, 1):
        head = ChannelRef(layer="c2", channel=channel)
        table = snip_attribution(trained_toy, head, blobs, 4)
        targets.append(HeadTarget(head=head, synth_image=blobs.images[10 + channel], top_init=top_init_from_table(table, 50)))

    together = multi_head_loss(work, targets, batch, cfg).item()
    separate = sum(
        circuitbreaker_loss(work, t.head, t.synth_image, t.top_init, batch, cfg).item() for t in targets
    )
    assert together == pytest.approx(separate, rel=1e-5)


def test_circuitbreaker_without_ranking_is_the_perturbed_inner_loss(trained_toy, blobs, toy_head):
    cfg = AttackConfig(target_layer="c2", beta=0.0, rho=0.05, big_c=100.0)
    work = trained_toy.clone(requires_grad=True)
    synth = blobs.images[3]
    top = top_init_from_table(snip_attribution(trained_toy, toy_head, blobs, 4), 50)

    value = circuitbreaker_loss(work, toy_head, synth, top, blobs.images[:2], cfg).item()
    eps = epsilon_star(trained_toy, synth, toy_head, cfg.rho, cfg.big_c)
    expected = inner_loss(trained_toy, synth + eps, toy_head, cfg.big_c).item()
    assert value == pytest.approx(expected, rel=1e-6)


def test_circuitbreaker_value_at_the_log_barrier_midpoint():
    # relu(1.5) stepped back by rho = 0.5 leaves ||f||^2 = 1 = C, and topInit is empty
    cfg = AttackConfig(target_layer="c", big_c=1.0, rho=0.5, beta=0.01)
    params = scalar_net(1.0).clone(requires_grad=True)
    value = circuitbreaker_loss(params, SCALAR, torch.full((1, 1, 1), 1.5), {}, torch.ones(1, 1, 1, 1), cfg)
    assert value.item() == pytest.approx(math.log(2.0), rel=1e-6)


# ── Attack loop ───────────────────────────────────────────────────────────────


def test_zero_epochs_returns_the_input(trained_toy, blobs):
    cfg = AttackConfig(target_layer="c2", epochs=0)
    result, report = run_attack(trained_toy, "proxpulse", cfg, blobs, featvis=QUICK_FEATVIS)
    assert result.equals(trained_toy)
    assert report.steps == []
    assert report.accuracy_drop == 0.0
    assert len(report.fool_sources) == 2


def test_fool_set_containing_an_initial_synth_is_refused(trained_toy, blobs):
    synths = layer_synths(trained_toy, "c2", QUICK_FEATVIS, seed=0)
    fool = FoolSet(torch.cat([blobs.images[:1], synths[1:2]]), ["dataset[0]", "synth c2:1"])
    cfg = AttackConfig(target_layer="c2", epochs=0, seed=0)

    with pytest.raises(FoolSetError, match="initial synthetic image"):
        run_attack(trained_toy, "proxpulse", cfg, blobs, fool_set=fool, featvis=QUICK_FEATVIS)
    with pytest.raises(FoolSetError, match="initial synthetic image"):
        run_attack(trained_toy, "proxpulse", cfg, blobs, fool_set=fool, initial_synths=synths)


def test_fool_set_check_needs_synths_for_every_channel(trained_toy, blobs):
    cfg = AttackConfig(target_layer="c2", epochs=0)
    with pytest.raises(FoolSetError, match="cannot check"):
        run_attack(trained_toy, "proxpulse", cfg, blobs, featvis=QUICK_FEATVIS, initial_synths=torch.zeros(2, 3, 8, 8))


def test_proxpulse_run_records_every_step(trained_toy, blobs, lab_settings):
    cfg = AttackConfig(target_layer="c2", epochs=2, batch=36, lr=1e-3, seed=1)
    result, report = run_attack(trained_toy, "proxpulse", cfg, blobs, featvis=QUICK_FEATVIS)
    assert len(report.steps) == 4
    assert [s.epoch for s in report.steps] == [0, 0, 1, 1]
    assert not result.equals(trained_toy)
    assert set(report.per_class_initial) == {0, 1}
    events = (lab_settings.log_dir / "events.jsonl").read_text(encoding="utf-8")
    assert '"event": "attack_finished"' in events


def test_attack_is_deterministic(trained_toy, blobs):
    cfg = AttackConfig(target_layer="c2", epochs=1, batch=36, lr=1e-3, seed=2)
    a, report_a = run_attack(trained_toy, "proxpulse", cfg, blobs, featvis=QUICK_FEATVIS)
    b, report_b = run_attack(trained_toy, "proxpulse", cfg, blobs, featvis=QUICK_FEATVIS)
    assert a.equals(b)
    assert report_a.steps == report_b.steps


def test_circuitbreaker_run(trained_toy, blobs):
    cfg = AttackConfig(
        kind="circuitbreaker", target_layer="c2", heads=["c2:0"], epochs=1, batch=36, ranking_samples=2, lr=1e-3
    )
    result, report = run_attack(
        trained_toy, "circuitbreaker", cfg, blobs,
        featvis=FeatvisConfig(steps=3), circuits=CircuitConfig(heads=["c2:0"], sample_count=4),
    )
    assert report.heads == ["c2:0"]
    assert len(report.steps) == 2
    assert all(math.isfinite(s.total_loss) for s in report.steps)


def test_circuitbreaker_needs_heads(trained_toy, blobs):
    with pytest.raises(ConfigError):
        run_attack(trained_toy, "circuitbreaker", AttackConfig(target_layer="c2", epochs=0), blobs)


def test_divergence_guard_aborts(trained_toy, blobs):
    cfg = AttackConfig(target_layer="c2", epochs=1, batch=16)
    values = iter([torch.tensor(0.5), torch.tensor(100.0)])
    with patch("app.attacks.attack_loop.maintain_loss", side_effect=lambda *a, **k: next(values)):
        with pytest.raises(AttackDivergedError):
            run_attack(trained_toy, "proxpulse", cfg, blobs, featvis=QUICK_FEATVIS)


def test_non_finite_maintain_loss_aborts(trained_toy, blobs):
    cfg = AttackConfig(target_layer="c2", epochs=1, batch=16)
    values = iter([torch.tensor(0.5), torch.tensor(float("nan"))])
    with patch("app.attacks.attack_loop.maintain_loss", side_effect=lambda *a, **k: next(values)):
        with pytest.raises(AttackDivergedError):
            run_attack(trained_toy, "proxpulse", cfg, blobs, featvis=QUICK_FEATVIS)


def test_guard_floor_tolerates_early_drift(trained_toy, blobs):
    # 0.02 nats at step 0 would put a bare 10x guard at 0.2; the floor lifts it to 10
    cfg = AttackConfig(target_layer="c2", epochs=1, batch=36)
    values = iter([torch.tensor(0.02), torch.tensor(0.5), torch.tensor(0.9)])
    with patch("app.attacks.attack_loop.maintain_loss", side_effect=lambda *a, **k: next(values).requires_grad_(True)):
        _, report = run_attack(trained_toy, "proxpulse", cfg, blobs, featvis=QUICK_FEATVIS)
    assert [s.maintain_loss for s in report.steps] == pytest.approx([0.02, 0.5])


def test_unknown_attack_kind(trained_toy, blobs):
    with pytest.raises(ConfigError):
        run_attack(trained_toy, "whack", AttackConfig(target_layer="c2"), blobs)


# ── Desk-scale runs ───────────────────────────────────────────────────────────


def _fool_loss(params: ModelParams, dataset, cfg: AttackConfig) -> float:
    maintain_pool, _ = dataset.holdout_split()
    fool = FoolSet.from_dataset(maintain_pool, cfg.fool_set_size, cfg.seed)
    return proxpulse_loss(params, fool, cfg.target_layer, cfg).item()


@pytest.mark.slow
def test_proxpulse_halves_the_fool_loss_and_keeps_accuracy(desk_blobs, desk_models, desk_proxpulse):
    baseline, _ = desk_models
    attacked, report = desk_proxpulse
    cfg = report.config

    assert cfg.epochs <= 5
    assert len(report.steps) > 0
    assert report.accuracy_drop < 0.02
    assert _fool_loss(attacked, desk_blobs, cfg) <= 0.5 * _fool_loss(baseline, desk_blobs, cfg)


@pytest.mark.slow
def test_alpha_zero_control_leaves_predictions_alone(desk_blobs, desk_models, desk_control):
    baseline, _ = desk_models
    control, report = desk_control
    assert abs(report.final_accuracy - report.initial_accuracy) <= 0.01
    same = predict(control, desk_blobs.images) == predict(baseline, desk_blobs.images)
    assert float(same.to(torch.float64).mean()) >= 0.95


@pytest.mark.slow
def test_desk_attacks_rerun_bit_identically(desk_blobs, desk_models, desk_proxpulse, desk_circuitbreaker):
    baseline, _ = desk_models
    runs = [(desk_proxpulse[0], desk_proxpulse[1], "proxpulse")]
    runs.append((desk_circuitbreaker[0][1], desk_circuitbreaker[0][2], "circuitbreaker"))

    for attacked, report, kind in runs:
        set_deterministic(0)
        again, report_again = run_attack(baseline, kind, report.config, desk_blobs)
        assert encode_checkpoint(Checkpoint(params=again)) == encode_checkpoint(Checkpoint(params=attacked)), kind
        assert report_again.model_dump(exclude={"meta"}) == report.model_dump(exclude={"meta"}), kind
