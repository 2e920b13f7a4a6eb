"""Fréchet distance, Inception Score and discriminator-overfitting diagnostics."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import SyntheticSpec

RIDGE = 1e-6

METRIC_COLUMNS = (
    "iteration", "fid", "is_mean", "is_std", "d_acc_train", "d_acc_val", "d_acc_real",
    "modes_covered", "hq_fraction", "sparsity_g", "sparsity_d",
)


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ValueError(f"covariance shape {self.sigma.shape} does not match mean dimension {d}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-10, rtol=0):
            raise ValueError("covariance must be symmetric")


def fit_gaussian(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least two samples to fit a Gaussian")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (x.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T) + RIDGE * np.eye(x.shape[1])
    return GaussianStats(mu, sigma, x.shape[0])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product square root is taken from the eigenvalues of
    the symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which shares its
    spectrum with ``S_a S_b``.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape[0]} vs {b.mu.shape[0]}")
    if np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma):
        return 0.0
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = float(np.sqrt(np.clip(eig, 0, None)).sum())
    diff = a.mu - b.mu
    value = float(diff @ diff) + float(np.trace(a.sigma) + np.trace(b.sigma)) - 2.0 * tr_cross
    if not math.isfinite(value):
        raise FloatingPointError("non-finite Fréchet distance")
    return max(value, 0.0)


def inception_score(probs, splits: int = 1, tol: float = 1e-6) -> Tuple[float, float]:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("expected a non-empty (n, K) matrix of class posteriors")
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise ValueError("rows must lie on the probability simplex")
    if splits < 1 or splits > p.shape[0]:
        raise ValueError(f"splits={splits} must lie in [1, {p.shape[0]}]")
    part = p.shape[0] // splits
    scores = []
    for s in range(splits):
        chunk = np.clip(p[s * part:(s + 1) * part], 0, None)
        with np.errstate(divide="ignore", invalid="ignore"):
            # log of the column sum, not of the mean: a subnormal mean can round to 0
            log_marginal = np.log(chunk.sum(axis=0, keepdims=True)) - math.log(chunk.shape[0])
            kl = np.where(chunk > 0, chunk * (np.log(chunk) - log_marginal), 0.0)
        scores.append(math.exp(kl.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def d_accuracy(fake_scores, threshold: float = 0.0) -> float:
    """Share of fake samples the discriminator scores below ``threshold``."""
    s = np.asarray(fake_scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("empty score array")
    return float(np.mean(s < threshold))


def real_accuracy(real_scores, threshold: float = 0.0) -> float:
    s = np.asarray(real_scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("empty score array")
    return float(np.mean(s > threshold))


def accuracy_gap_report(train_real_scores, val_real_scores, fake_scores, threshold: float = 0.0) -> Dict[str, float]:
    """Balanced real/fake accuracy of D on training reals versus held-out reals.

    ``d_acc_train`` pairs the fake batch with training reals, ``d_acc_val``
    pairs it with held-out reals; an overfitting D scores unseen reals as
    fake, opening a gap between the two.
    """
    fake = d_accuracy(fake_scores, threshold)
    train = real_accuracy(train_real_scores, threshold)
    val = real_accuracy(val_real_scores, threshold)
    return {
        "d_acc_train": 0.5 * (train + fake),
        "d_acc_val": 0.5 * (val + fake),
        "d_acc_real": train,
        "d_acc_fake": fake,
        "gap": 0.5 * (train - val),
    }


def ring_coverage(samples, spec: SyntheticSpec, quality_radius: float) -> Tuple[int, float]:
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if x.shape[0] < 1:
        raise ValueError("need at least one sample")
    d = np.linalg.norm(x[:, None, :] - spec.centers()[None], axis=2)
    near = d <= quality_radius
    per_mode = near.sum(axis=0)
    covered = int(np.sum(per_mode >= x.shape[0] / (10 * spec.modes)))
    return covered, float(np.mean(near.any(axis=1)))


def ring_posteriors(samples, spec: SyntheticSpec) -> np.ndarray:
    """Soft mode assignment used as the class posterior for IS on ring data."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    var = max(spec.std, 1e-3) ** 2
    logits = -((x[:, None, :] - spec.centers()[None]) ** 2).sum(axis=2) / (2 * var)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


# -- feature extractors -------------------------------------------------------

class FeatureExtractor:
    variant = "identity"
    dim: Optional[int] = None

    def __call__(self, x) -> np.ndarray:
        return np.asarray(_to_numpy(x), dtype=np.float64).reshape(len(x), -1)

    def probs(self, x) -> Optional[np.ndarray]:
        return None


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


class RandomConvFeatures(FeatureExtractor):
    """Fixed-seed random conv net (no training) producing ``dim`` features."""

    variant = "fixed_random_conv"

    def __init__(self, seed: int = 0, dim: int = 64):
        self.seed, self.dim = seed, dim
        g = torch.Generator().manual_seed(seed)
        self.w1 = torch.randn(32, 3, 4, 4, generator=g) / math.sqrt(48)
        self.w2 = torch.randn(dim, 32, 4, 4, generator=g) / math.sqrt(512)

    @torch.no_grad()
    def __call__(self, x) -> np.ndarray:
        t = torch.as_tensor(_to_numpy(x), dtype=torch.float32)
        h = F.leaky_relu(F.conv2d(t, self.w1, stride=2, padding=1), 0.2)
        h = F.leaky_relu(F.conv2d(h, self.w2, stride=2, padding=1), 0.2)
        return h.mean(dim=(2, 3)).double().numpy()


class ClassifierFeatures(FeatureExtractor):
    """Small conv classifier; penultimate activations are features, softmax gives IS posteriors."""

    variant = "trained_classifier"

    def __init__(self, params: Dict[str, torch.Tensor]):
        self.params = OrderedDict((k, v.detach().float()) for k, v in params.items())
        self.dim = self.params["fc1.weight"].shape[0]
        self.classes = self.params["fc2.weight"].shape[0]

    @staticmethod
    def _forward(params, t):
        h = F.relu(F.conv2d(t, params["conv1.weight"], params["conv1.bias"], stride=2, padding=1))
        h = F.relu(F.conv2d(h, params["conv2.weight"], params["conv2.bias"], stride=2, padding=1))
        h = F.relu(F.linear(h.mean(dim=(2, 3)), params["fc1.weight"], params["fc1.bias"]))
        return h, F.linear(h, params["fc2.weight"], params["fc2.bias"])

    @torch.no_grad()
    def __call__(self, x) -> np.ndarray:
        return self._forward(self.params, torch.as_tensor(_to_numpy(x), dtype=torch.float32))[0].double().numpy()

    @torch.no_grad()
    def probs(self, x) -> np.ndarray:
        logits = self._forward(self.params, torch.as_tensor(_to_numpy(x), dtype=torch.float32))[1]
        return torch.softmax(logits.double(), dim=1).numpy()

    def save(self, path) -> None:
        np.savez(path, **{k: v.numpy() for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "ClassifierFeatures":
        with np.load(Path(path)) as z:
            return cls(OrderedDict((k, torch.from_numpy(z[k])) for k in z.files))

    @classmethod
    def train(cls, images, labels, classes: int, seed: int = 0, epochs: int = 3, dim: int = 64,
              batch_size: int = 128, lr: float = 2e-3) -> "ClassifierFeatures":
        g = torch.Generator().manual_seed(seed)

        def init(*shape):
            fan_in = int(np.prod(shape[1:]))
            return (torch.randn(*shape, generator=g) * math.sqrt(2.0 / fan_in)).requires_grad_(True)

        params = OrderedDict([
            ("conv1.weight", init(32, 3, 4, 4)), ("conv1.bias", torch.zeros(32, requires_grad=True)),
            ("conv2.weight", init(64, 32, 4, 4)), ("conv2.bias", torch.zeros(64, requires_grad=True)),
            ("fc1.weight", init(dim, 64)), ("fc1.bias", torch.zeros(dim, requires_grad=True)),
            ("fc2.weight", init(classes, dim)), ("fc2.bias", torch.zeros(classes, requires_grad=True)),
        ])
        opt = torch.optim.Adam(params.values(), lr=lr)
        x = torch.as_tensor(_to_numpy(images), dtype=torch.float32)
        y = torch.as_tensor(_to_numpy(labels), dtype=torch.long)
        for _ in range(epochs):
            perm = torch.randperm(x.shape[0], generator=g)
            for i in range(0, x.shape[0], batch_size):
                idx = perm[i:i + batch_size]
                loss = F.cross_entropy(cls._forward(params, x[idx])[1], y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        return cls(params)


def make_extractor(variant: str, seed: int = 0, checkpoint: Optional[str] = None) -> FeatureExtractor:
    if variant == "identity":
        return FeatureExtractor()
    if variant == "fixed_random_conv":
        return RandomConvFeatures(seed)
    if variant == "trained_classifier":
        if checkpoint is None:
            raise ValueError("trained_classifier extractor needs a checkpoint path")
        return ClassifierFeatures.load(checkpoint)
    raise ValueError(f"unknown feature extractor {variant!r}")
