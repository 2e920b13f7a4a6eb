"""Adversarial feature-level augmentation.

PGD perturbations are injected between the two halves of each player
(``G = G2 ∘ G1``, ``D = D2 ∘ D1``).  Both players minimize their losses, so
the inner adversary always *ascends* the loss of the player being updated.
Perturbations are computed with the parameters frozen and then treated as
constants for the outer update.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .dataaug import AugPolicy, apply_policy
from .losses import LossSpec, discriminator_loss, f_d_loss, generator_loss
from .models import Network, ParamStore
from .training import (
    TrainConfig,
    TrainState,
    _check_finite,
    adam_update,
    augment,
    check_mask_shapes,
    sample_batch,
    sample_latent,
)

MODES = ("adversarial", "gaussian", "off")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AdvConfig:
    steps: int = 1
    step_size: float = 0.01
    # None means eps = steps * step_size, the set reachable by the sign iteration
    eps: Optional[float] = None
    lambda_g: float = 1.0
    lambda_d: float = 1.0
    g_split: Optional[int] = None
    d_split: Optional[int] = None
    perturb_generator: bool = True
    perturb_real: bool = True
    perturb_fake: bool = True
    mode: str = "adversarial"
    noise_std: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.lambda_g < 0 or self.lambda_d < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.eps is not None:
            if self.eps <= 0:
                raise ValueError("eps must be positive")
            if self.eps < self.step_size:
                raise ValueError(f"eps={self.eps} is smaller than step_size={self.step_size}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def radius(self) -> float:
        return self.steps * self.step_size if self.eps is None else self.eps

    @property
    def _perturbs(self) -> bool:
        if self.mode == "off":
            return False
        if self.mode == "gaussian":
            return self.noise_std > 0
        return self.steps > 0 and self.step_size > 0

    @property
    def active_g(self) -> bool:
        return self._perturbs and self.perturb_generator and self.lambda_g > 0

    @property
    def active_d(self) -> bool:
        return self._perturbs and (self.perturb_real or self.perturb_fake) and self.lambda_d > 0


def pgd_feature_perturb(
    features: torch.Tensor,
    objective: Callable[[torch.Tensor], torch.Tensor],
    cfg: AdvConfig,
    direction: str = "ascend",
) -> torch.Tensor:
    """Sign-gradient PGD on an l_inf ball around ``features``; returns a detached delta."""
    if direction not in ("ascend", "descend"):
        raise ValueError(f"direction must be 'ascend' or 'descend', got {direction!r}")
    h = features.detach()
    delta = torch.zeros_like(h)
    if cfg.steps == 0 or cfg.step_size == 0:
        return delta
    sign = 1.0 if direction == "ascend" else -1.0
    eps = cfg.radius
    for _ in range(cfg.steps):
        d = delta.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(objective(h + d), d)
        if not torch.isfinite(grad).all():
            raise NonFiniteGradientError("non-finite gradient with respect to the feature perturbation")
        delta = (delta + sign * cfg.step_size * grad.sign()).clamp(-eps, eps)
    return delta.detach()


def _perturbation(h, objective, cfg: AdvConfig, rng: Optional[torch.Generator]) -> torch.Tensor:
    if cfg.mode == "gaussian":
        if rng is None:
            raise ValueError("gaussian feature noise needs an rng")
        noise = torch.randn(h.shape, generator=rng, dtype=torch.float64).to(h.dtype)
        return cfg.noise_std * noise
    return pgd_feature_perturb(h, objective, cfg, "ascend")


class FrozenAugment:
    """Apply one fixed random augmentation draw to every call.

    The PGD objective re-evaluates the generator head several times; all
    evaluations must see the same augmentation parameters.  The first call
    consumes the draw from ``rng``; later calls replay it.
    """

    def __init__(self, policy: Optional[AugPolicy], rng: torch.Generator):
        self.policy, self.rng = policy, rng
        self.start = None

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.policy is None:
            return x
        if self.start is None:
            self.start = self.rng.get_state()
            return apply_policy(x, self.policy, self.rng)
        g = torch.Generator()
        g.set_state(self.start)
        return apply_policy(x, self.policy, g)


def _generator_terms(gen, theta, disc, phi, z, cfg: AdvConfig, spec: LossSpec, aug: Callable, rng=None):
    g1, g2 = gen.split_parts(theta, cfg.g_split)
    h = g1(z)

    def objective(hh):
        return generator_loss(disc(phi, aug(g2(hh))), spec)

    if not cfg.perturb_generator:
        clean = objective(h)
        return clean, clean
    delta = _perturbation(h, objective, cfg, rng)
    return objective(h), objective(h + delta)


def adv_generator_loss(
    gen: Network,
    theta: ParamStore,
    disc: Network,
    phi: ParamStore,
    z: torch.Tensor,
    cfg: AdvConfig,
    spec: LossSpec = LossSpec(),
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Worst-case generator loss over perturbations of ``G1(z)``."""
    return _generator_terms(gen, theta, disc, phi, z, cfg, spec, lambda x: x, rng)[1]


def _discriminator_terms(disc, phi, x, fake, cfg: AdvConfig, spec: LossSpec, rng=None):
    d1, d2 = disc.split_parts(phi, cfg.d_split)
    hr, hf = d1(x), d1(fake)
    clean = f_d_loss(-d2(hr), spec).mean() + f_d_loss(d2(hf), spec).mean()
    if cfg.perturb_real:
        hr = hr + _perturbation(hr, lambda h: f_d_loss(-d2(h), spec).mean(), cfg, rng)
    if cfg.perturb_fake:
        hf = hf + _perturbation(hf, lambda h: f_d_loss(d2(h), spec).mean(), cfg, rng)
    adv = f_d_loss(-d2(hr), spec).mean() + f_d_loss(d2(hf), spec).mean()
    return clean, adv


def adv_discriminator_loss(
    disc: Network,
    phi: ParamStore,
    x: torch.Tensor,
    fake: torch.Tensor,
    cfg: AdvConfig,
    spec: LossSpec = LossSpec(),
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Discriminator loss with real and fake features perturbed against D."""
    return _discriminator_terms(disc, phi, x, fake, cfg, spec, rng)[1]


def augmented_train_step(
    state: TrainState,
    data: torch.Tensor,
    gen: Network,
    disc: Network,
    cfg: TrainConfig,
    adv: AdvConfig,
    loss: LossSpec = LossSpec(),
    masks=None,
    policy: Optional[AugPolicy] = None,
) -> TrainState:
    """One iteration with data- and feature-level augmentation, in place.

    D minimizes ``L_D + lambda_d * L_D^adv`` and G minimizes
    ``L_G + lambda_g * L_G^adv``.  Inactive branches (zero weight, zero
    steps or zero step size) fall back to the plain losses.
    """
    if state.iteration >= cfg.iterations:
        raise ValueError(f"iteration {state.iteration} already reached total {cfg.iterations}")
    mask_g = masks.g if masks is not None else None
    mask_d = masks.d if masks is not None else None
    check_mask_shapes(state.theta, mask_g)
    check_mask_shapes(state.phi, mask_d)

    for _ in range(cfg.d_steps_per_g):
        x = sample_batch(data, cfg.batch_size, state.rng)
        z = sample_latent(cfg.batch_size, cfg.latent_dim, state.rng, gen.dtype)
        with torch.no_grad():
            fake = gen(state.theta, z)
        x, fake = augment(x, policy, state.aug_rng), augment(fake, policy, state.aug_rng)
        if adv.active_d:
            clean_d, adv_d = _discriminator_terms(disc, state.phi, x, fake, adv, loss, state.aug_rng)
            total = clean_d + adv.lambda_d * adv_d
        else:
            clean_d = total = discriminator_loss(disc(state.phi, x), disc(state.phi, fake), loss)
        _check_finite(total, "discriminator", state.iteration)
        grads = torch.autograd.grad(total, list(state.phi.values()))
        state.phi = adam_update(state.phi, grads, state.opt_d, cfg.lr_d, cfg.betas, mask_d)

    z = sample_latent(cfg.batch_size, cfg.latent_dim, state.rng, gen.dtype)
    if adv.active_g:
        frozen = FrozenAugment(policy, state.aug_rng)
        clean_g, adv_g = _generator_terms(gen, state.theta, disc, state.phi, z, adv, loss, frozen, state.aug_rng)
        total = clean_g + adv.lambda_g * adv_g
    else:
        fake = augment(gen(state.theta, z), policy, state.aug_rng)
        clean_g = total = generator_loss(disc(state.phi, fake), loss)
    _check_finite(total, "generator", state.iteration)
    grads = torch.autograd.grad(total, list(state.theta.values()))
    state.theta = adam_update(state.theta, grads, state.opt_g, cfg.lr_g, cfg.betas, mask_g)

    state.iteration += 1
    state.last_losses = (float(clean_d.detach()), float(clean_g.detach()))
    return state
