"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from .advaug import AdvConfig
from .dataaug import AugPolicy
from .losses import VARIANTS, LossSpec
from .models import ModelSpec
from .sparsity import PruneConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key, self.line = key, line


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text
    return parse


def _split(named: str) -> Callable[[str], Any]:
    def parse(text: str):
        if text == named:
            return named
        return int(text)
    return parse


def _auto_float(text: str):
    return "auto" if text == "auto" else float(text)


def _check(pred: Callable[[Any], bool], message: str):
    return pred, message


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    check: Optional[Tuple[Callable[[Any], bool], str]] = None
    is_path: bool = False
    # keys that change what is trained enter the config hash
    hashed: bool = True


_positive = _check(lambda v: v > 0, "must be > 0")
_nonneg = _check(lambda v: v >= 0, "must be >= 0")
_unit = _check(lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]")
_beta = _check(lambda v: 0.0 <= v < 1.0, "must lie in [0, 1)")

KEYS: List[Key] = [
    Key("seed", int, 0),
    Key("out", str, "runs/default", hashed=False),
    Key("model.arch", _choice("mlp_gan_2d", "conv_gan_32"), "mlp_gan_2d"),
    Key("model.latent_dim", int, 0, _nonneg),
    Key("model.width", int, 64, _positive),
    Key("model.depth", int, 3, _positive),
    Key("model.g_split", _split("first"), "first"),
    Key("model.d_split", _split("last"), "last"),
    Key("model.spectral_norm", _choice("auto", "true", "false"), "auto"),
    Key("model.dtype", _choice("auto", "float32", "float64"), "auto"),
    Key("train.loss", _choice(*VARIANTS), "hinge"),
    Key("train.lr_g", float, 2e-4, _positive),
    Key("train.lr_d", float, 2e-4, _positive),
    Key("train.batch_size", int, 64, _check(lambda v: v >= 2, "must be >= 2")),
    Key("train.iterations", int, 2000, _positive, hashed=False),
    Key("train.d_steps", int, 1, _positive),
    Key("train.beta1", float, 0.0, _beta),
    Key("train.beta2", float, 0.9, _beta),
    Key("train.checkpoint_every", int, 500, _positive, hashed=False),
    Key("train.eval_every", int, 100, _positive, hashed=False),
    Key("train.masks_g", str, "", is_path=True),
    Key("train.masks_d", str, "", is_path=True),
    Key("train.init", str, "", is_path=True),
    Key("train.resume", str, "", is_path=True, hashed=False),
    Key("prune.rho", float, 0.2, _check(lambda v: 0.0 < v < 1.0, "rho must lie in (0,1)")),
    Key("prune.rounds", int, 2, _nonneg),
    Key("prune.epochs_per_round", int, 10, _positive),
    Key("prune.method", _choice("imp", "random", "omp"), "imp"),
    Key("prune.count_rule", _choice("schedule", "floor"), "schedule"),
    Key("advaug.mode", _choice("adversarial", "gaussian", "off"), "adversarial"),
    Key("advaug.steps", int, 1, _nonneg),
    Key("advaug.step_size", float, 0.01, _nonneg),
    Key("advaug.eps", _auto_float, "auto"),
    Key("advaug.lambda_g", float, 1.0, _nonneg),
    Key("advaug.lambda_d", float, 1.0, _nonneg),
    Key("advaug.targets", str, "generator,discriminator_real,discriminator_fake"),
    Key("advaug.noise_std", float, 0.01, _nonneg),
    Key("aug.policy", str, "none"),
    Key("aug.translation_ratio", float, 0.125, _unit),
    Key("aug.cutout_ratio", float, 0.5, _unit),
    Key("aug.brightness", float, 0.5, _nonneg),
    Key("aug.saturation", float, 1.0, _nonneg),
    Key("aug.contrast", float, 0.5, _nonneg),
    Key("aug.probability", float, 1.0, _unit),
    Key("aug.double_iterations", _bool, True),
    Key("data.source", _choice("ring", "toy_shapes", "folder"), "ring"),
    Key("data.size", int, 2000, _positive),
    Key("data.fraction", float, 1.0, _check(lambda v: 0.0 < v <= 1.0, "fraction must lie in (0,1]")),
    Key("data.few_shot", int, 0, _nonneg),
    Key("data.manifest", str, "", is_path=True),
    Key("data.folder", str, "", is_path=True),
    Key("data.image_size", int, 32, _check(lambda v: v >= 8 and v % 8 == 0, "must be a multiple of 8")),
    Key("data.validation_size", int, 0, _nonneg),
    Key("data.ring_modes", int, 8, _positive),
    Key("data.ring_radius", float, 2.0, _nonneg),
    Key("data.ring_std", float, 0.05, _nonneg),
    Key("metrics.samples", int, 2000, _check(lambda v: v >= 2, "must be >= 2"), hashed=False),
    Key("metrics.reference", _choice("validation", "train"), "validation", hashed=False),
    Key("metrics.extractor", _choice("auto", "identity", "fixed_random_conv", "trained_classifier"), "auto",
        hashed=False),
    Key("metrics.classifier", str, "", is_path=True, hashed=False),
    Key("metrics.is_splits", int, 10, _positive, hashed=False),
    Key("metrics.quality_radius", float, 0.15, _positive, hashed=False),
]

KEY_INDEX: Dict[str, Key] = {k.name: k for k in KEYS}
ADV_TARGETS = ("generator", "discriminator_real", "discriminator_fake")


class ExperimentConfig:
    """Validated flat configuration with typed values and builders for the run objects."""

    def __init__(self, values: Optional[Dict[str, Any]] = None, base_dir: Optional[Path] = None):
        self.values: Dict[str, Any] = {k.name: k.default for k in KEYS}
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        if values:
            for name, value in values.items():
                self.set(name, value)

    def __getitem__(self, name: str):
        return self.values[name]

    def set(self, name: str, value: Any, line: Optional[int] = None) -> None:
        key = KEY_INDEX.get(name)
        if key is None:
            raise ConfigError("unknown key", name, line)
        if isinstance(value, str):
            try:
                value = key.parse(value.strip())
            except ValueError as err:
                raise ConfigError(f"type error: {err}", name, line) from None
        if key.check is not None and not isinstance(value, str):
            pred, message = key.check
            if not pred(value):
                raise ConfigError(f"{message} (got {value!r})", name, line)
        self.values[name] = value

    def path(self, name: str) -> Optional[Path]:
        raw = self.values[name]
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def check_paths(self) -> None:
        for key in KEYS:
            if key.is_path and self.values[key.name]:
                p = self.path(key.name)
                if not p.exists():
                    raise ConfigError(f"referenced path does not exist: {p}", key.name)

    def validate(self) -> "ExperimentConfig":
        self._cross_checks()
        self.check_paths()
        return self

    def _cross_checks(self) -> None:
        try:
            self.model_spec()
        except ValueError as err:
            key = next((k for k in ("g_split", "d_split") if k in str(err)), "arch")
            raise ConfigError(str(err), f"model.{key}") from None
        targets = [t.strip() for t in self["advaug.targets"].split(",") if t.strip()]
        bad = [t for t in targets if t not in ADV_TARGETS]
        if bad:
            raise ConfigError(f"unknown targets {bad}; expected a subset of {ADV_TARGETS}", "advaug.targets")
        try:
            self.adv_config()
        except ValueError as err:
            raise ConfigError(str(err), "advaug.eps") from None
        try:
            self.aug_policy()
        except ValueError as err:
            raise ConfigError(str(err), "aug.policy") from None
        if self["data.few_shot"] > self["data.size"] and self["data.source"] != "folder":
            raise ConfigError("few-shot count exceeds data.size", "data.few_shot")
        if self["data.source"] == "folder" and not self["data.folder"]:
            raise ConfigError("folder source needs data.folder", "data.folder")

    # -- builders ----------------------------------------------------------

    def model_spec(self) -> ModelSpec:
        arch = self["model.arch"]
        depth = self["model.depth"]
        n_layers = depth + 1 if arch == "mlp_gan_2d" else 4
        g_split = 1 if self["model.g_split"] == "first" else self["model.g_split"]
        d_split = n_layers - 1 if self["model.d_split"] == "last" else self["model.d_split"]
        sn = {"auto": None, "true": True, "false": False}[self["model.spectral_norm"]]
        return ModelSpec(
            arch=arch,
            latent_dim=self["model.latent_dim"] or None,
            width=self["model.width"],
            depth=depth,
            g_split=g_split,
            d_split=d_split,
            spectral_norm=sn,
            dtype=None if self["model.dtype"] == "auto" else self["model.dtype"],
            image_size=self["data.image_size"],
        )

    def loss_spec(self) -> LossSpec:
        return LossSpec(self["train.loss"])

    def train_config(self, iterations: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            lr_g=self["train.lr_g"], lr_d=self["train.lr_d"], batch_size=self["train.batch_size"],
            iterations=iterations or self["train.iterations"], d_steps_per_g=self["train.d_steps"],
            betas=(self["train.beta1"], self["train.beta2"]), seed=self["seed"],
            latent_dim=self.model_spec().latent_dim,
        )

    def prune_config(self) -> PruneConfig:
        return PruneConfig(self["prune.rho"], self["prune.rounds"], self["prune.epochs_per_round"],
                           self["prune.count_rule"])

    def adv_config(self) -> AdvConfig:
        targets = {t.strip() for t in self["advaug.targets"].split(",")}
        spec = self.model_spec()
        eps = None if self["advaug.eps"] == "auto" else float(self["advaug.eps"])
        return AdvConfig(
            steps=self["advaug.steps"], step_size=self["advaug.step_size"], eps=eps,
            lambda_g=self["advaug.lambda_g"], lambda_d=self["advaug.lambda_d"],
            g_split=spec.g_split, d_split=spec.d_split,
            perturb_generator="generator" in targets, perturb_real="discriminator_real" in targets,
            perturb_fake="discriminator_fake" in targets, mode=self["advaug.mode"],
            noise_std=self["advaug.noise_std"],
        )

    def aug_policy(self) -> Optional[AugPolicy]:
        policy = AugPolicy.from_string(
            self["aug.policy"], translation_ratio=self["aug.translation_ratio"], cutout_ratio=self["aug.cutout_ratio"],
            brightness=self["aug.brightness"], saturation=self["aug.saturation"], contrast=self["aug.contrast"],
            probability=self["aug.probability"],
        )
        return None if policy.is_identity else policy

    def total_iterations(self) -> int:
        """Training iterations; doubled when a non-identity data augmentation is active."""
        base = self["train.iterations"]
        return 2 * base if self.aug_policy() is not None and self["aug.double_iterations"] else base

    # -- serialization -----------------------------------------------------

    def to_text(self, keys: Optional[Iterable[str]] = None) -> str:
        names = list(keys) if keys is not None else [k.name for k in KEYS]
        return "".join(f"{n} = {_format(self.values[n])}\n" for n in names)

    def hash(self) -> str:
        hashed = [k.name for k in KEYS if k.hashed]
        return hashlib.sha256(self.to_text(hashed).encode("utf-8")).hexdigest()[:16]


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, base_dir=None, overrides: Iterable[str] = (), check_paths: bool = True) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) and fill defaults."""
    cfg = ExperimentConfig(base_dir=base_dir)
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise ConfigError("expected 'key = value'", None, lineno)
        name = name.strip()
        if name in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[name]})", name, lineno)
        seen[name] = lineno
        cfg.set(name, value, lineno)
    for item in overrides:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        cfg.set(name.strip(), value)
    env_seed = os.environ.get("TICKETGAN_SEED")
    if env_seed:
        cfg.set("seed", env_seed)
    cfg._cross_checks()
    if check_paths:
        cfg.check_paths()
    return cfg


def load_config(path=None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    if path is None:
        return parse_config("", overrides=overrides)
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), base_dir=p.parent, overrides=overrides)
