"""Binary masks, global magnitude pruning, rewinding and the IMP driver."""

from __future__ import annotations

import math
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .losses import LossSpec
from .models import GANModels, ParamStore, clone_store, prunable_names
from .training import NonFiniteLossError, TrainConfig, TrainState, apply_mask, train_step

Mask = Dict[str, torch.Tensor]


@dataclass
class MaskPair:
    g: Mask
    d: Mask

    @classmethod
    def ones(cls, theta: ParamStore, phi: ParamStore) -> "MaskPair":
        return cls(ones_mask(theta), ones_mask(phi))

    def copy(self) -> "MaskPair":
        return MaskPair(OrderedDict((k, v.clone()) for k, v in self.g.items()),
                        OrderedDict((k, v.clone()) for k, v in self.d.items()))


@dataclass
class PruneConfig:
    rho: float = 0.2
    rounds: int = 0
    epochs_per_round: int = 10
    # "schedule": round k keeps round(N * (1 - rho)^k) weights; "floor": prune floor(rho * remaining)
    count_rule: str = "schedule"

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho={self.rho} must lie in (0, 1)")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be >= 1")
        if self.count_rule not in ("schedule", "floor"):
            raise ValueError(f"unknown count_rule {self.count_rule!r}")


def ones_mask(store: ParamStore) -> Mask:
    return OrderedDict((k, torch.ones(store[k].shape, dtype=torch.bool)) for k in prunable_names(store))


def mask_counts(mask: Mask) -> Tuple[int, int]:
    """``(remaining, total)`` over all masked entries."""
    total = sum(m.numel() for m in mask.values())
    remaining = sum(int(m.sum()) for m in mask.values())
    return remaining, total


def sparsity_of(mask: Mask) -> float:
    remaining, total = mask_counts(mask)
    return 0.0 if total == 0 else 1.0 - remaining / total


def target_sparsity(rho: float, k: int) -> float:
    return 1.0 - (1.0 - rho) ** k


def _check_mask(store: ParamStore, mask: Mask) -> None:
    for name, m in mask.items():
        if name not in store:
            raise ValueError(f"mask entry {name!r} has no matching parameter")
        if tuple(m.shape) != tuple(store[name].shape):
            raise ValueError(f"mask for {name!r} has shape {tuple(m.shape)}, parameter has {tuple(store[name].shape)}")


def _prune_smallest(store: ParamStore, mask: Mask, count: int) -> Mask:
    """Zero the ``count`` unmasked entries of smallest |w|, ties by (name, flat index)."""
    names = sorted(mask)
    mags, ranks, flat = [], [], []
    for rank, name in enumerate(names):
        alive = np.flatnonzero(mask[name].reshape(-1).numpy())
        w = store[name].detach().to(torch.float64).reshape(-1).numpy()
        mags.append(np.abs(w[alive]))
        ranks.append(np.full(alive.size, rank))
        flat.append(alive)
    mags, ranks, flat = np.concatenate(mags), np.concatenate(ranks), np.concatenate(flat)
    chosen = np.lexsort((flat, ranks, mags))[:count]
    out = OrderedDict((k, v.clone()) for k, v in mask.items())
    for rank, name in enumerate(names):
        hit = flat[chosen[ranks[chosen] == rank]]
        if hit.size:
            out[name].view(-1)[torch.from_numpy(hit)] = False
    return out


def prune_count(rho: float, remaining: int) -> int:
    # small slack so products like 0.29 * 100 = 28.999... still floor to 29
    return int(math.floor(rho * remaining + 1e-9))


def global_magnitude_prune(store: ParamStore, mask: Mask, rho: float, count: Optional[int] = None) -> Mask:
    """Prune ``floor(rho * remaining)`` weights globally across one player's layers.

    ``count`` overrides the number of newly pruned entries (used by the IMP
    driver to follow the geometric sparsity schedule exactly).
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho={rho} must lie in (0, 1)")
    _check_mask(store, mask)
    remaining, _ = mask_counts(mask)
    if remaining == 0:
        raise ValueError("all prunable entries are already pruned")
    k = prune_count(rho, remaining) if count is None else count
    if not 0 <= k <= remaining:
        raise ValueError(f"cannot prune {k} of {remaining} remaining entries")
    return _prune_smallest(store, mask, k)


def _zeros_for_target(mask: Mask, target: float) -> int:
    if not 0.0 <= target < 1.0:
        raise ValueError(f"target sparsity {target} must lie in [0, 1)")
    remaining, total = mask_counts(mask)
    wanted = int(round(target * total))
    current = total - remaining
    if wanted < current:
        raise ValueError(f"target sparsity {target:.4f} is below current sparsity {current / total:.4f}")
    return wanted - current


def one_shot_prune(store: ParamStore, mask: Mask, target: float) -> Mask:
    _check_mask(store, mask)
    return _prune_smallest(store, mask, _zeros_for_target(mask, target))


def random_prune(store: ParamStore, mask: Mask, target: float, seed: int) -> Mask:
    _check_mask(store, mask)
    k = _zeros_for_target(mask, target)
    names = sorted(mask)
    alive = [(name, np.flatnonzero(mask[name].reshape(-1).numpy())) for name in names]
    owner = np.concatenate([np.full(idx.size, i) for i, (_, idx) in enumerate(alive)])
    flat = np.concatenate([idx for _, idx in alive])
    chosen = np.random.default_rng(seed).choice(flat.size, size=k, replace=False)
    out = OrderedDict((n, v.clone()) for n, v in mask.items())
    for i, (name, _) in enumerate(alive):
        hit = flat[chosen[owner[chosen] == i]]
        if hit.size:
            out[name].view(-1)[torch.from_numpy(hit)] = False
    return out


def rewind(store: ParamStore, init: ParamStore, mask: Optional[Mask]) -> ParamStore:
    """Reset every parameter to its initial value, then zero the pruned entries."""
    if list(store) != list(init):
        raise ValueError(f"snapshot keys {list(init)} do not match parameter keys {list(store)}")
    for k in store:
        if store[k].shape != init[k].shape:
            raise ValueError(f"snapshot shape mismatch for {k!r}")
    if mask:
        _check_mask(init, mask)
    return apply_mask(OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in init.items()), mask)


@dataclass
class RoundRecord:
    round: int
    sparsity_g: float
    sparsity_d: float
    target: float
    remaining_g: int
    remaining_d: int
    seconds: float


@dataclass
class ImpResult:
    masks: MaskPair
    theta0: ParamStore
    phi0: ParamStore
    rounds: List[RoundRecord] = field(default_factory=list)


def iterations_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def _schedule_count(mask: Mask, rho: float, k: int) -> int:
    remaining, total = mask_counts(mask)
    keep = int(round(total * (1.0 - rho) ** k))
    return max(0, remaining - keep)


def run_imp(
    models: GANModels,
    data: torch.Tensor,
    cfg: PruneConfig,
    train_cfg: TrainConfig,
    loss: LossSpec = LossSpec(),
    callback: Optional[Callable[[int, ParamStore, ParamStore, MaskPair], None]] = None,
) -> ImpResult:
    """Iterative magnitude pruning with rewinding to the original initialization.

    Each round trains ``(theta0 * m_g, phi0 * m_d)`` for ``epochs_per_round``
    passes over ``data``, prunes ``rho`` of the remaining weights of each
    player separately and rewinds.  ``callback(round, theta, phi, masks)``
    sees the rewound weights after every round.
    """
    theta0, phi0 = clone_store(models.theta), clone_store(models.phi)
    masks = MaskPair.ones(theta0, phi0)
    iters = cfg.epochs_per_round * iterations_per_epoch(data.shape[0], train_cfg.batch_size)
    round_cfg = TrainConfig(**{**train_cfg.__dict__, "iterations": iters})
    result = ImpResult(masks, theta0, phi0)
    for r in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        state = TrainState.create(rewind(theta0, theta0, masks.g), rewind(phi0, phi0, masks.d), train_cfg.seed + r)
        try:
            for _ in range(iters):
                train_step(state, data, models.gen, models.disc, round_cfg, loss, masks)
        except NonFiniteLossError as err:
            raise NonFiniteLossError(f"IMP round {r}: {err}", err.iteration, round_index=r) from err
        if cfg.count_rule == "schedule":
            counts = (_schedule_count(masks.g, cfg.rho, r), _schedule_count(masks.d, cfg.rho, r))
        else:
            counts = (None, None)
        masks = MaskPair(
            global_magnitude_prune(state.theta, masks.g, cfg.rho, counts[0]),
            global_magnitude_prune(state.phi, masks.d, cfg.rho, counts[1]),
        )
        theta, phi = rewind(state.theta, theta0, masks.g), rewind(state.phi, phi0, masks.d)
        result.rounds.append(RoundRecord(
            r, sparsity_of(masks.g), sparsity_of(masks.d), target_sparsity(cfg.rho, r),
            mask_counts(masks.g)[0], mask_counts(masks.d)[0], time.perf_counter() - start,
        ))
        if callback is not None:
            callback(r, theta, phi, masks)
    result.masks = masks
    return result


# -- mask file ---------------------------------------------------------------

MASK_MAGIC = b"TKMK"
MASK_VERSION = 1


class MaskFormatError(ValueError):
    pass


@dataclass
class MaskHeader:
    player: str
    rho: float
    rounds: int
    seed: int
    version: int = MASK_VERSION


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_masks(path, mask: Mask, header: MaskHeader) -> None:
    out = [MASK_MAGIC, struct.pack("<H", MASK_VERSION), _pack_str(header.player),
           struct.pack("<dIqI", header.rho, header.rounds, header.seed, len(mask))]
    for name, m in mask.items():
        bits = np.packbits(m.reshape(-1).numpy().astype(np.uint8), bitorder="little").tobytes()
        out += [_pack_str(name), struct.pack("<B", m.ndim), struct.pack(f"<{m.ndim}I", *m.shape),
                struct.pack("<I", len(bits)), bits]
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MaskFormatError("truncated mask file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def read_masks(path) -> Tuple[Mask, MaskHeader]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MASK_MAGIC:
        raise MaskFormatError(f"{path}: not a mask file (bad magic)")
    (version,) = r.unpack("<H")
    if version != MASK_VERSION:
        raise MaskFormatError(f"{path}: mask format version {version}, expected {MASK_VERSION}")
    player = r.string()
    rho, rounds, seed, n = r.unpack("<dIqI")
    mask: Mask = OrderedDict()
    for _ in range(n):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<I")
        size = int(np.prod(shape))
        bits = np.unpackbits(np.frombuffer(r.take(nbytes), dtype=np.uint8), count=size, bitorder="little")
        mask[name] = torch.from_numpy(bits.astype(bool).reshape(shape))
    if r.pos != len(r.data):
        raise MaskFormatError(f"{path}: trailing bytes after mask payload")
    return mask, MaskHeader(player, rho, rounds, seed, version)
