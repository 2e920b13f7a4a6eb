"""Config-driven experiment runs: ticket finding, training and evaluation."""

from __future__ import annotations

import csv
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .advaug import augmented_train_step
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .config import ExperimentConfig
from .data import DatasetManifest, LoadedData, SyntheticSpec, load_source, make_few_shot, make_subset
from .metrics import (
    METRIC_COLUMNS,
    FeatureExtractor,
    GaussianStats,
    accuracy_gap_report,
    fit_gaussian,
    frechet_distance,
    inception_score,
    make_extractor,
    ring_coverage,
    ring_posteriors,
)
from .models import GANModels, ParamStore, build_gan, clone_store
from .sparsity import (
    ImpResult,
    MaskHeader,
    MaskPair,
    RoundRecord,
    iterations_per_epoch,
    mask_counts,
    one_shot_prune,
    random_prune,
    read_masks,
    rewind,
    run_imp,
    sparsity_of,
    target_sparsity,
    write_masks,
)
from .training import TrainState, make_rng, sample_latent, train_step

log = logging.getLogger(__name__)

SPARSITY_COLUMNS = ("round", "sparsity_g", "sparsity_d", "target", "remaining_g", "remaining_d", "seconds")


@dataclass
class RunSetup:
    cfg: ExperimentConfig
    models: GANModels
    manifest: DatasetManifest
    train_data: torch.Tensor
    source: LoadedData
    ring: Optional[SyntheticSpec]
    extractor: FeatureExtractor
    reference: GaussianStats = field(repr=False)

    @property
    def is_ring(self) -> bool:
        return self.ring is not None


def _default_manifest(cfg: ExperimentConfig) -> Optional[Path]:
    """Retraining a ticket reuses the manifest written next to its masks."""
    path = cfg.path("data.manifest")
    if path is not None:
        return path
    for key in ("train.masks_g", "train.init"):
        ref = cfg.path(key)
        if ref is not None and (ref.parent / "manifest.txt").exists():
            return ref.parent / "manifest.txt"
    return None


def build_manifest(cfg: ExperimentConfig, n: int) -> DatasetManifest:
    path = _default_manifest(cfg)
    if path is not None:
        manifest = DatasetManifest.read(path)
        if manifest.total != n:
            raise ValueError(f"manifest {path} indexes N={manifest.total} samples but the source has {n}")
        return manifest
    source = cfg["data.source"]
    if cfg["data.few_shot"]:
        return make_few_shot(n, cfg["data.few_shot"], cfg["seed"], source)
    return make_subset(n, cfg["data.fraction"], cfg["seed"], source)


def _validation_size(cfg: ExperimentConfig) -> int:
    if cfg["data.validation_size"]:
        return cfg["data.validation_size"]
    n = cfg["data.size"]
    return max(2000, n // 5) if cfg["data.source"] == "ring" else max(500, n // 5)


def prepare(cfg: ExperimentConfig) -> RunSetup:
    spec = cfg.model_spec()
    ring = None
    if cfg["data.source"] == "ring":
        if spec.arch != "mlp_gan_2d":
            raise ValueError("ring data needs model.arch = mlp_gan_2d")
        ring = SyntheticSpec(cfg["data.ring_modes"], cfg["data.ring_radius"], cfg["data.ring_std"], cfg["data.size"],
                             cfg["seed"])
    elif spec.arch != "conv_gan_32":
        raise ValueError("image data needs model.arch = conv_gan_32")
    folder = cfg.path("data.folder")
    # the data pool is fixed by a seed independent of the run seed
    source = load_source(cfg["data.source"], cfg["data.size"], 1234, ring=ring,
                         folder=str(folder) if folder else None, image_size=cfg["data.image_size"],
                         n_val=_validation_size(cfg))
    manifest = build_manifest(cfg, source.train_pool.shape[0])
    train_np = manifest.select(source.train_pool)
    models = build_gan(spec, cfg["seed"])
    train_data = torch.as_tensor(np.ascontiguousarray(train_np)).to(spec.torch_dtype)
    variant = cfg["metrics.extractor"]
    if variant == "auto":
        variant = "identity" if ring is not None else "fixed_random_conv"
    classifier = cfg.path("metrics.classifier")
    extractor = make_extractor(variant, seed=0, checkpoint=str(classifier) if classifier else None)
    ref_data = source.validation if cfg["metrics.reference"] == "validation" else train_np
    reference = fit_gaussian(_features(extractor, ref_data))
    return RunSetup(cfg, models, manifest, train_data, source, ring, extractor, reference)


def _features(extractor: FeatureExtractor, x, batch: int = 500) -> np.ndarray:
    x = np.asarray(x) if not isinstance(x, torch.Tensor) else x
    return np.concatenate([extractor(x[i:i + batch]) for i in range(0, len(x), batch)])


@torch.no_grad()
def generate(models: GANModels, theta: ParamStore, n: int, seed: int, batch: int = 500) -> torch.Tensor:
    rng = make_rng(seed)
    out = []
    for i in range(0, n, batch):
        z = sample_latent(min(batch, n - i), models.spec.latent_dim, rng, models.spec.torch_dtype)
        out.append(models.gen(theta, z))
    return torch.cat(out)


@torch.no_grad()
def _scores(models: GANModels, phi: ParamStore, x, batch: int = 500) -> np.ndarray:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(models.spec.torch_dtype)
    return torch.cat([models.disc(phi, t[i:i + batch]) for i in range(0, len(t), batch)]).double().numpy()


def evaluate(setup: RunSetup, theta: ParamStore, phi: ParamStore, iteration: int,
             masks: Optional[MaskPair] = None) -> Dict[str, float]:
    cfg, models = setup.cfg, setup.models
    n = cfg["metrics.samples"]
    # evaluation draws come from their own stream so they never perturb training
    fakes = generate(models, theta, n, seed=10_000_019 * (cfg["seed"] + 1) + iteration)
    fid = frechet_distance(fit_gaussian(_features(setup.extractor, fakes)), setup.reference)
    nan = float("nan")
    is_mean = is_std = modes = hq = nan
    if setup.is_ring:
        probs = ring_posteriors(fakes.numpy(), setup.ring)
        modes, hq = ring_coverage(fakes.numpy(), setup.ring, cfg["metrics.quality_radius"])
    else:
        probs = setup.extractor.probs(fakes)
    if probs is not None:
        is_mean, is_std = inception_score(probs, min(cfg["metrics.is_splits"], n))
    train_np = setup.train_data[:n]
    val_np = setup.source.validation[:n]
    report = accuracy_gap_report(_scores(models, phi, train_np), _scores(models, phi, val_np),
                                 _scores(models, phi, fakes))
    return {
        "iteration": iteration, "fid": fid, "is_mean": is_mean, "is_std": is_std,
        "d_acc_train": report["d_acc_train"], "d_acc_val": report["d_acc_val"], "d_acc_real": report["d_acc_real"],
        "modes_covered": modes, "hq_fraction": hq,
        "sparsity_g": sparsity_of(masks.g) if masks else 0.0,
        "sparsity_d": sparsity_of(masks.d) if masks else 0.0,
    }


class MetricLog:
    """Append-only CSV with the fixed metric header.

    A fresh run starts a new file; a resumed run keeps the rows up to
    ``keep_until`` so that the log matches an uninterrupted run.
    """

    def __init__(self, path: Path, keep_until: Optional[int] = None):
        self.path = Path(path)
        keep = []
        if keep_until is not None and self.path.exists():
            keep = [r for r in read_csv(self.path) if float(r["iteration"]) <= keep_until]
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for row in keep:
                w.writerow([row[c] for c in METRIC_COLUMNS])

    def append(self, row: Dict[str, float]) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) or (isinstance(v, float) and v.is_integer() and abs(v) < 2 ** 53):
        return str(int(v))
    return repr(float(v))


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_masks(cfg: ExperimentConfig) -> Optional[MaskPair]:
    pg, pd = cfg.path("train.masks_g"), cfg.path("train.masks_d")
    if pg is None and pd is None:
        return None
    if pg is None or pd is None:
        raise ValueError("train.masks_g and train.masks_d must be given together")
    return MaskPair(read_masks(pg)[0], read_masks(pd)[0])


def _state_checkpoint(setup: RunSetup, state: TrainState, theta0, phi0, masks, total: int) -> Checkpoint:
    return Checkpoint(
        iteration=state.iteration, theta=state.theta, phi=state.phi, theta0=theta0, phi0=phi0,
        opt_g=state.opt_g, opt_d=state.opt_d,
        rng_state=state.rng.get_state(), aug_rng_state=state.aug_rng.get_state(),
        config_hash=setup.cfg.hash(), mask_g=masks.g if masks else None, mask_d=masks.d if masks else None,
        extra={"total_iterations": total, "base_iterations": setup.cfg["train.iterations"],
               "iteration_multiplier": total // setup.cfg["train.iterations"]},
    )


def restore_state(ckpt: Checkpoint) -> TrainState:
    state = TrainState.create(ckpt.theta, ckpt.phi, 0)
    state.opt_g, state.opt_d = ckpt.opt_g, ckpt.opt_d
    state.rng.set_state(ckpt.rng_state)
    state.aug_rng.set_state(ckpt.aug_rng_state)
    state.iteration = ckpt.iteration
    return state


@dataclass
class TrainResult:
    state: TrainState
    rows: List[Dict[str, float]]
    masks: Optional[MaskPair]
    total_iterations: int


def train(
    setup: RunSetup,
    out_dir: Optional[Path] = None,
    masks: Optional[MaskPair] = None,
    init: Optional[tuple] = None,
    resume: Optional[Path] = None,
    stop_at: Optional[int] = None,
    on_eval: Optional[Callable[[TrainState, Dict[str, float]], None]] = None,
    evaluate_every: Optional[int] = None,
) -> TrainResult:
    """Train (a ticket of) the GAN under the run config.

    ``init`` is an optional ``(theta0, phi0)`` pair to rewind to; by default
    the seed-determined initialization is used.  ``stop_at`` interrupts the
    run early (used to exercise resuming).
    """
    cfg = setup.cfg
    total = cfg.total_iterations()
    tcfg = cfg.train_config(total)
    adv, policy, loss = cfg.adv_config(), cfg.aug_policy(), cfg.loss_spec()
    theta0, phi0 = init if init is not None else (setup.models.theta, setup.models.phi)
    if resume is not None:
        ckpt = read_checkpoint(resume, expected_hash=cfg.hash())
        state = restore_state(ckpt)
        theta0, phi0 = ckpt.theta0, ckpt.phi0
        if ckpt.mask_g is not None:
            masks = MaskPair(ckpt.mask_g, ckpt.mask_d)
    else:
        state = TrainState.create(rewind(theta0, theta0, masks.g if masks else None),
                                  rewind(phi0, phi0, masks.d if masks else None), cfg["seed"])
    every = evaluate_every or cfg["train.eval_every"]
    metric_log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        previous = Path(resume).parent / "metrics.csv" if resume else None
        if previous and previous.exists() and not (out_dir / "metrics.csv").exists():
            shutil.copyfile(previous, out_dir / "metrics.csv")
        metric_log = MetricLog(out_dir / "metrics.csv", keep_until=state.iteration if resume else None)
    rows: List[Dict[str, float]] = []
    end = total if stop_at is None else min(stop_at, total)
    while state.iteration < end:
        if adv.active_g or adv.active_d:
            augmented_train_step(state, setup.train_data, setup.models.gen, setup.models.disc, tcfg, adv, loss,
                                 masks, policy)
        else:
            train_step(state, setup.train_data, setup.models.gen, setup.models.disc, tcfg, loss, masks, policy)
        it = state.iteration
        if it % every == 0 or it == total:
            row = evaluate(setup, state.theta, state.phi, it, masks)
            rows.append(row)
            if metric_log:
                metric_log.append(row)
            if on_eval:
                on_eval(state, row)
            log.info("iter %d/%d fid=%.4f d_acc_train=%.3f d_acc_val=%.3f", it, total, row["fid"],
                     row["d_acc_train"], row["d_acc_val"])
        if out_dir is not None and (it % cfg["train.checkpoint_every"] == 0 or it == end):
            ck = _state_checkpoint(setup, state, theta0, phi0, masks, total)
            write_checkpoint(out_dir / f"ckpt_{it:07d}.tkgn", ck)
            write_checkpoint(out_dir / "last.tkgn", ck)
    return TrainResult(state, rows, masks, total)


@dataclass
class TicketResult:
    masks: MaskPair
    theta0: ParamStore
    phi0: ParamStore
    rounds: List[RoundRecord]


def find_ticket(setup: RunSetup, out_dir: Optional[Path] = None,
                callback=None) -> TicketResult:
    cfg = setup.cfg
    pcfg = cfg.prune_config()
    method = cfg["prune.method"]
    models = setup.models
    tcfg = cfg.train_config()
    if method == "imp":
        res: ImpResult = run_imp(models, setup.train_data, pcfg, tcfg, cfg.loss_spec(), callback)
        result = TicketResult(res.masks, res.theta0, res.phi0, res.rounds)
    else:
        theta0, phi0 = clone_store(models.theta), clone_store(models.phi)
        masks = MaskPair.ones(theta0, phi0)
        target = target_sparsity(pcfg.rho, pcfg.rounds)
        if method == "random":
            masks = MaskPair(random_prune(theta0, masks.g, target, cfg["seed"]),
                             random_prune(phi0, masks.d, target, cfg["seed"] + 1))
        else:
            iters = pcfg.epochs_per_round * iterations_per_epoch(len(setup.train_data), tcfg.batch_size)
            state = TrainState.create(theta0, phi0, cfg["seed"] + 1)
            round_cfg = cfg.train_config(iters)
            for _ in range(iters):
                train_step(state, setup.train_data, models.gen, models.disc, round_cfg, cfg.loss_spec())
            masks = MaskPair(one_shot_prune(state.theta, masks.g, target), one_shot_prune(state.phi, masks.d, target))
        rec = RoundRecord(pcfg.rounds, sparsity_of(masks.g), sparsity_of(masks.d), target,
                          mask_counts(masks.g)[0], mask_counts(masks.d)[0], 0.0)
        result = TicketResult(masks, theta0, phi0, [rec])
    if out_dir is not None:
        write_ticket(setup, result, Path(out_dir))
    return result


def write_ticket(setup: RunSetup, result: TicketResult, out_dir: Path) -> None:
    cfg = setup.cfg
    out_dir.mkdir(parents=True, exist_ok=True)
    rounds, rho, seed = cfg["prune.rounds"], cfg["prune.rho"], cfg["seed"]
    write_masks(out_dir / "masks_g.tkm", result.masks.g, MaskHeader("generator", rho, rounds, seed))
    write_masks(out_dir / "masks_d.tkm", result.masks.d, MaskHeader("discriminator", rho, rounds, seed))
    setup.manifest.write(out_dir / "manifest.txt")
    theta = rewind(result.theta0, result.theta0, result.masks.g)
    phi = rewind(result.phi0, result.phi0, result.masks.d)
    state = TrainState.create(theta, phi, seed)
    ck = Checkpoint(0, state.theta, state.phi, result.theta0, result.phi0, state.opt_g, state.opt_d,
                    state.rng.get_state(), state.aug_rng.get_state(), cfg.hash(),
                    result.masks.g, result.masks.d, extra={"method": cfg["prune.method"], "rounds": rounds})
    write_checkpoint(out_dir / "init.tkgn", ck)
    with open(out_dir / "sparsity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SPARSITY_COLUMNS)
        for r in result.rounds:
            w.writerow([r.round, repr(r.sparsity_g), repr(r.sparsity_d), repr(r.target), r.remaining_g,
                        r.remaining_d, f"{r.seconds:.3f}"])
