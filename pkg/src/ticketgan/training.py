"""Optimizer, training state and the vanilla alternating GAN update."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import torch

from .dataaug import AugPolicy, apply_policy
from .losses import LossSpec, discriminator_loss, generator_loss
from .models import Network, ParamStore, clone_store


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, iteration: int, round_index: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration
        self.round_index = round_index


@dataclass
class TrainConfig:
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    batch_size: int = 64
    iterations: int = 1000
    d_steps_per_g: int = 1
    betas: Tuple[float, float] = (0.0, 0.9)
    seed: int = 0
    latent_dim: int = 8

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.d_steps_per_g < 1:
            raise ValueError("d_steps_per_g must be >= 1")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("optimizer betas must lie in [0, 1)")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")


@dataclass
class AdamState:
    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, store: ParamStore) -> "AdamState":
        return cls(
            OrderedDict((k, torch.zeros_like(p)) for k, p in store.items()),
            OrderedDict((k, torch.zeros_like(p)) for k, p in store.items()),
        )

    def copy(self) -> "AdamState":
        return AdamState(clone_store(self.m), clone_store(self.v), self.step)


def make_rng(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def copy_rng(rng: torch.Generator) -> torch.Generator:
    g = torch.Generator()
    g.set_state(rng.get_state())
    return g


@dataclass
class TrainState:
    """Mutable training state; one iteration = ``d_steps_per_g`` D updates + one G update."""

    theta: ParamStore
    phi: ParamStore
    opt_g: AdamState
    opt_d: AdamState
    rng: torch.Generator
    aug_rng: torch.Generator
    iteration: int = 0
    last_losses: Tuple[float, float] = (math.nan, math.nan)

    @classmethod
    def create(cls, theta: ParamStore, phi: ParamStore, seed: int) -> "TrainState":
        theta, phi = _leaf_store(theta), _leaf_store(phi)
        return cls(
            theta, phi, AdamState.zeros_like(theta), AdamState.zeros_like(phi),
            rng=make_rng(seed), aug_rng=make_rng(seed + 7919),
        )

    def copy(self) -> "TrainState":
        return TrainState(
            _leaf_store(self.theta), _leaf_store(self.phi), self.opt_g.copy(), self.opt_d.copy(),
            copy_rng(self.rng), copy_rng(self.aug_rng), self.iteration, self.last_losses,
        )


def _leaf_store(store: ParamStore) -> ParamStore:
    return OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in store.items())


def check_mask_shapes(store: ParamStore, mask: Optional[Dict[str, torch.Tensor]]) -> None:
    if mask is None:
        return
    for name, m in mask.items():
        if name not in store:
            raise ValueError(f"mask entry {name!r} has no matching parameter")
        if tuple(m.shape) != tuple(store[name].shape):
            raise ValueError(
                f"mask shape {tuple(m.shape)} does not match parameter {name!r} of shape {tuple(store[name].shape)}"
            )


def apply_mask(store: ParamStore, mask: Optional[Dict[str, torch.Tensor]]) -> ParamStore:
    if not mask:
        return store
    out = OrderedDict()
    for k, p in store.items():
        if k in mask:
            # where() keeps pruned entries at +0.0 regardless of the sign of p
            p = torch.where(mask[k], p.detach(), torch.zeros((), dtype=p.dtype)).requires_grad_(True)
        out[k] = p
    return out


def adam_update(
    store: ParamStore,
    grads: Iterable[torch.Tensor],
    opt: AdamState,
    lr: float,
    betas: Tuple[float, float],
    mask: Optional[Dict[str, torch.Tensor]] = None,
    eps: float = 1e-8,
) -> ParamStore:
    b1, b2 = betas
    opt.step += 1
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    out = OrderedDict()
    with torch.no_grad():
        for (name, p), g in zip(store.items(), grads):
            keep = mask.get(name) if mask else None
            if keep is not None:
                g = torch.where(keep, g, torch.zeros((), dtype=g.dtype))
            m = opt.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v = opt.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            new = p - lr * (m / c1) / ((v / c2).sqrt() + eps)
            if keep is not None:
                new = torch.where(keep, new, torch.zeros((), dtype=new.dtype))
            out[name] = new.requires_grad_(True)
    return out


def sample_batch(data: torch.Tensor, batch_size: int, rng: torch.Generator) -> torch.Tensor:
    idx = torch.randint(0, data.shape[0], (batch_size,), generator=rng)
    return data[idx]


def sample_latent(n: int, dim: int, rng: torch.Generator, dtype: torch.dtype) -> torch.Tensor:
    return torch.randn(n, dim, generator=rng, dtype=torch.float64).to(dtype)


def _check_finite(loss: torch.Tensor, what: str, iteration: int) -> None:
    if not math.isfinite(float(loss.detach())):
        raise NonFiniteLossError(f"non-finite {what} loss at iteration {iteration}", iteration)


def augment(x: torch.Tensor, policy: Optional[AugPolicy], rng: torch.Generator) -> torch.Tensor:
    if policy is None:
        return x
    return apply_policy(x, policy, rng)


def train_step(
    state: TrainState,
    data: torch.Tensor,
    gen: Network,
    disc: Network,
    cfg: TrainConfig,
    loss: LossSpec = LossSpec(),
    masks=None,
    policy=None,
) -> TrainState:
    """Run one vanilla iteration in place and return ``state``.

    ``data`` is the full real training set; every D step draws its own batch
    from it with ``state.rng``.  ``masks`` is anything with ``g``/``d`` dict
    attributes (see :class:`ticketgan.sparsity.MaskPair`).
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
        loss_d = discriminator_loss(disc(state.phi, x), disc(state.phi, fake), loss)
        _check_finite(loss_d, "discriminator", state.iteration)
        grads = torch.autograd.grad(loss_d, list(state.phi.values()))
        state.phi = adam_update(state.phi, grads, state.opt_d, cfg.lr_d, cfg.betas, mask_d)

    z = sample_latent(cfg.batch_size, cfg.latent_dim, state.rng, gen.dtype)
    fake = augment(gen(state.theta, z), policy, state.aug_rng)
    loss_g = generator_loss(disc(state.phi, fake), loss)
    _check_finite(loss_g, "generator", state.iteration)
    grads = torch.autograd.grad(loss_g, list(state.theta.values()))
    state.theta = adam_update(state.theta, grads, state.opt_g, cfg.lr_g, cfg.betas, mask_g)

    state.iteration += 1
    state.last_losses = (float(loss_d.detach()), float(loss_g.detach()))
    return state
