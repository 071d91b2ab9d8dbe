"""The fooling framework: ProxPulse, CircuitBreaker and the fine-tuning driver."""

from app.attacks.attack_loop import prepare_heads, run_attack
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

__all__ = [
    "FoolSet",
    "HeadTarget",
    "circuitbreaker_loss",
    "epsilon_star",
    "inner_loss",
    "linearized_inner_max",
    "maintain_loss",
    "multi_head_loss",
    "pairwise_hinge",
    "prepare_heads",
    "proxpulse_loss",
    "ranking_loss",
    "run_attack",
    "sharpness_perturbation",
    "top_init_from_table",
]
