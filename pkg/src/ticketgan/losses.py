"""Adversarial losses for the hinge and non-saturating families.

Both the discriminator and generator losses are *minimized*:

    L_D = E[f_D(-D(x))] + E[f_D(D(G(z)))]
    L_G = E[f_G(-D(G(z)))]

with ``f_D(x) = max(0, 1 + x)``, ``f_G(x) = x`` for hinge and
``f_D = f_G = softplus`` for the non-saturating loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

VARIANTS = ("hinge", "non_saturating")


@dataclass(frozen=True)
class LossSpec:
    variant: str = "hinge"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")


def softplus(x):
    """Overflow-safe ``log(1 + e^x)`` for floats and tensors."""
    if isinstance(x, torch.Tensor):
        return torch.clamp_min(x, 0) + torch.log1p(torch.exp(-x.abs()))
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def f_d_loss(score, spec: LossSpec):
    if spec.variant == "hinge":
        if isinstance(score, torch.Tensor):
            return torch.relu(1 + score)
        return max(0.0, 1.0 + score)
    return softplus(score)


def f_g_loss(score, spec: LossSpec):
    if spec.variant == "hinge":
        return score
    return softplus(score)


def _as_tensor(scores) -> torch.Tensor:
    t = scores if isinstance(scores, torch.Tensor) else torch.as_tensor(scores, dtype=torch.float64)
    if t.numel() == 0:
        raise ValueError("empty score batch")
    return t


def discriminator_loss(real_scores, fake_scores, spec: LossSpec) -> torch.Tensor:
    real, fake = _as_tensor(real_scores), _as_tensor(fake_scores)
    return f_d_loss(-real, spec).mean() + f_d_loss(fake, spec).mean()


def generator_loss(fake_scores, spec: LossSpec) -> torch.Tensor:
    return f_g_loss(-_as_tensor(fake_scores), spec).mean()
