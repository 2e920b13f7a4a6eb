"""Small reproducible trend experiments built on the config-driven pipeline.

Each runner trains a handful of toy models across seeds and returns the
per-seed final metrics; the acceptance suite and the README examples use
them to compare regimes by their medians.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

from .config import ExperimentConfig, parse_config
from .metrics import accuracy_gap_report
from .pipeline import _scores, find_ticket, generate, prepare, train
from .sparsity import MaskPair, random_prune, sparsity_of

log = logging.getLogger(__name__)

# conv settings for the overfitting probe: no spectral norm and a faster D
# so that memorization shows up within a couple of CPU minutes
OVERFIT_BASE = {
    "model.arch": "conv_gan_32",
    "model.width": 16,
    "model.spectral_norm": "false",
    "data.source": "toy_shapes",
    "data.size": 5000,
    "train.batch_size": 32,
    "train.lr_d": 2e-3,
    "train.lr_g": 1e-3,
    "train.iterations": 2000,
    "train.eval_every": 2000,
    "advaug.mode": "off",
    "metrics.samples": 500,
}

# ring settings: 200 training points; IMP rounds of ~1000 iterations; large
# evaluation sets because data-space FID differences here are small
RING_BASE = {
    "model.arch": "mlp_gan_2d",
    "data.source": "ring",
    "data.size": 2000,
    "data.fraction": 0.1,
    "data.validation_size": 10000,
    "train.lr_g": 1e-3,
    "train.lr_d": 1e-3,
    "train.iterations": 6000,
    "train.eval_every": 6000,
    "advaug.mode": "off",
    "prune.epochs_per_round": 250,
    "metrics.samples": 10000,
}


def make_config(base: Mapping[str, object], **overrides) -> ExperimentConfig:
    values = {**base, **{k.replace("__", "."): v for k, v in overrides.items()}}
    return parse_config("\n".join(f"{k} = {v}" for k, v in values.items()), check_paths=False)


def median(values: Iterable[float]) -> float:
    return float(statistics.median(list(values)))


@dataclass
class Trend:
    """Per-seed results for several named regimes."""

    runs: Dict[str, List[Dict[str, float]]] = field(default_factory=dict)
    seconds: float = 0.0

    def add(self, regime: str, row: Dict[str, float]) -> None:
        self.runs.setdefault(regime, []).append(row)

    def median(self, regime: str, key: str) -> float:
        return median(r[key] for r in self.runs[regime])

    def table(self, keys: Sequence[str]) -> str:
        lines = [f"{'regime':<22}" + "".join(f"{k:>14}" for k in keys)]
        for regime in self.runs:
            lines.append(f"{regime:<22}" + "".join(f"{self.median(regime, k):>14.4f}" for k in keys))
        return "\n".join(lines)


def gap_probe(cfg: ExperimentConfig) -> Dict[str, float]:
    """Train once and report D's accuracies on training reals, held-out reals and fakes."""
    setup = prepare(cfg)
    result = train(setup)
    state = result.state
    n = cfg["metrics.samples"]
    models = setup.models
    fakes = generate(models, state.theta, n, seed=977 + cfg["seed"])
    report = accuracy_gap_report(_scores(models, state.phi, setup.train_data[:n]),
                                 _scores(models, state.phi, setup.source.validation[:n]),
                                 _scores(models, state.phi, fakes))
    row = dict(result.rows[-1])
    row.update({
        "fake_acc": report["d_acc_fake"],
        "train_real_acc": report["d_acc_real"],
        "val_real_acc": 2 * report["d_acc_val"] - report["d_acc_fake"],
    })
    row["gap_points"] = 100.0 * (row["train_real_acc"] - row["val_real_acc"])
    return row


def overfitting_trend(seeds: Sequence[int] = (0, 1, 2), fractions=(0.1, 1.0), **overrides) -> Trend:
    trend = Trend()
    start = time.perf_counter()
    for fraction in fractions:
        for seed in seeds:
            cfg = make_config(OVERFIT_BASE, seed=seed, data__fraction=fraction, **overrides)
            row = gap_probe(cfg)
            log.info("overfit fraction=%s seed=%d gap=%.1f fake=%.3f", fraction, seed, row["gap_points"],
                     row["fake_acc"])
            trend.add(f"fraction={fraction:g}", row)
    trend.seconds = time.perf_counter() - start
    return trend


def _retrain(cfg: ExperimentConfig, masks: Optional[MaskPair], init=None) -> Dict[str, float]:
    setup = prepare(cfg)
    return train(setup, masks=masks, init=init).rows[-1]


def imp_tickets(cfg: ExperimentConfig, rounds: Sequence[int]):
    """One IMP run up to ``max(rounds)``; returns the setup, θ0/φ0 and the masks after each requested round."""
    kcfg = make_config({**cfg.values, "prune.rounds": max(rounds)})
    setup = prepare(kcfg)
    saved: Dict[int, MaskPair] = {}

    def keep(r, theta, phi, masks):
        if r in rounds:
            saved[r] = masks.copy()

    ticket = find_ticket(setup, callback=keep)
    return setup, (ticket.theta0, ticket.phi0), saved


def ticket_trend(seeds: Sequence[int] = (0, 1, 2), rounds: Sequence[int] = (2, 5), **overrides) -> Trend:
    """Dense baseline vs IMP tickets vs random masks at matched sparsity on the ring."""
    trend = Trend()
    start = time.perf_counter()
    for seed in seeds:
        cfg = make_config(RING_BASE, seed=seed, **overrides)
        trend.add("dense", _retrain(cfg, None))
        setup, init, saved = imp_tickets(cfg, rounds)
        theta0, phi0 = init
        dense_masks = MaskPair.ones(theta0, phi0)
        for k in rounds:
            masks = saved[k]
            trend.add(f"imp_k{k}", train(setup, masks=masks, init=init).rows[-1])
            rand = MaskPair(random_prune(theta0, dense_masks.g, sparsity_of(masks.g), seed),
                            random_prune(phi0, dense_masks.d, sparsity_of(masks.d), seed + 1))
            trend.add(f"random_k{k}", train(setup, masks=rand, init=init).rows[-1])
            log.info("ticket seed=%d k=%d imp=%.4f random=%.4f", seed, k, trend.runs[f"imp_k{k}"][-1]["fid"],
                     trend.runs[f"random_k{k}"][-1]["fid"])
    trend.seconds = time.perf_counter() - start
    return trend


ADVAUG_SETTINGS = {
    "no_advaug": {"advaug.mode": "off"},
    "pgd1_a0.01": {"advaug.mode": "adversarial", "advaug.steps": 1, "advaug.step_size": 0.01},
    "pgd5_a0.1": {"advaug.mode": "adversarial", "advaug.steps": 5, "advaug.step_size": 0.1},
}


def advaug_trend(seeds: Sequence[int] = (0, 1, 2), rounds: int = 5, settings=None, **overrides) -> Trend:
    """Retrain one IMP ticket per seed under several feature-level augmentation settings."""
    settings = settings or ADVAUG_SETTINGS
    trend = Trend()
    start = time.perf_counter()
    for seed in seeds:
        cfg = make_config(RING_BASE, seed=seed, **overrides)
        _, init, saved = imp_tickets(cfg, [rounds])
        for name, extra in settings.items():
            run_cfg = make_config({**cfg.values, **extra})
            row = train(prepare(run_cfg), masks=saved[rounds], init=init).rows[-1]
            trend.add(name, row)
            log.info("advaug seed=%d %s fid=%.4f", seed, name, row["fid"])
    trend.seconds = time.perf_counter() - start
    return trend
