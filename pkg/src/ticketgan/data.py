"""Datasets and limited-data manifests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

MANIFEST_TAG = "ticketgan-manifest v1"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    source: str
    total: int
    indices: np.ndarray
    fraction: float
    seed: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        idx = self.indices
        if idx.size == 0:
            raise ManifestError("manifest selects no samples")
        if np.any(idx < 0) or np.any(idx >= self.total):
            raise ManifestError(f"manifest indices must lie in [0, {self.total})")
        if np.any(np.diff(idx) <= 0):
            raise ManifestError("manifest indices must be unique and ascending")

    def __len__(self):
        return int(self.indices.size)

    def header(self) -> str:
        return f"{MANIFEST_TAG}; source={self.source}; N={self.total}; fraction={self.fraction!r}; seed={self.seed}"

    def write(self, path) -> None:
        lines = [self.header()] + [str(i) for i in self.indices.tolist()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(MANIFEST_TAG):
            raise ManifestError(f"{path}: missing '{MANIFEST_TAG}' header")
        fields = {}
        for part in lines[0].split(";")[1:]:
            key, sep, value = part.strip().partition("=")
            if not sep:
                raise ManifestError(f"{path}: malformed header field {part.strip()!r}")
            fields[key] = value
        try:
            return cls(
                source=fields["source"],
                total=int(fields["N"]),
                indices=np.array([int(s) for s in lines[1:] if s.strip()], dtype=np.int64),
                fraction=float(fields["fraction"]),
                seed=int(fields["seed"]),
            )
        except KeyError as err:
            raise ManifestError(f"{path}: header lacks field {err}") from None

    def select(self, data):
        return data[self.indices]


def subset_size(n: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * n + 1e-9)))


def make_subset(n: int, fraction: float, seed: int, source: str = "unknown") -> DatasetManifest:
    """Uniformly sample ``floor(fraction * n)`` indices without replacement."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction={fraction} must lie in (0, 1]")
    k = subset_size(n, fraction)
    idx = np.arange(n) if k == n else np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return DatasetManifest(source, n, idx, fraction, seed)


def make_few_shot(n: int, count: int, seed: int, source: str = "unknown") -> DatasetManifest:
    if not 1 <= count <= n:
        raise ValueError(f"few-shot count {count} must lie in [1, {n}]")
    idx = np.arange(n) if count == n else np.sort(np.random.default_rng(seed).choice(n, size=count, replace=False))
    return DatasetManifest(source, n, idx, count / n, seed)


# -- synthetic ring ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    modes: int = 8
    radius: float = 2.0
    std: float = 0.05
    n: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.modes < 1:
            raise ValueError("mode count must be >= 1")
        if self.std < 0:
            raise ValueError("std must be non-negative")
        if self.n < 1:
            raise ValueError("sample count must be >= 1")

    def centers(self) -> np.ndarray:
        angles = 2.0 * np.pi * np.arange(self.modes) / self.modes
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sample_ring(spec: SyntheticSpec, return_modes: bool = False):
    rng = np.random.default_rng(spec.seed)
    modes = rng.integers(0, spec.modes, size=spec.n)
    points = spec.centers()[modes] + spec.std * rng.standard_normal((spec.n, 2))
    return (points, modes) if return_modes else points


# -- toy images --------------------------------------------------------------

SHAPES = ("disk", "square", "ring", "cross")


def make_toy_images(n: int, seed: int, size: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """Procedural 32x32-style RGB images of one coloured shape on a gradient.

    Returns ``(images, labels)``: float32 images of shape ``(n, 3, size, size)``
    in ``[-1, 1]`` and integer shape labels in ``range(len(SHAPES))``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    labels = rng.integers(0, len(SHAPES), size=n)
    bg_a = rng.uniform(-0.9, 0.1, size=(n, 3, 1, 1))
    bg_b = rng.uniform(-0.9, 0.1, size=(n, 3, 1, 1))
    angle = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    ramp = 0.5 * (1 + np.cos(angle) * xx + np.sin(angle) * yy)[:, None] / 2
    images = bg_a + (bg_b - bg_a) * ramp
    cy, cx = rng.uniform(-0.5, 0.5, size=(2, n, 1, 1))
    radius = rng.uniform(0.2, 0.45, size=(n, 1, 1))
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dy ** 2 + dx ** 2)
    inside = np.stack([
        dist < radius,
        np.maximum(np.abs(dy), np.abs(dx)) < radius,
        (dist < radius) & (dist > 0.55 * radius),
        (np.minimum(np.abs(dy), np.abs(dx)) < 0.3 * radius) & (np.maximum(np.abs(dy), np.abs(dx)) < radius),
    ])[labels, np.arange(n)]
    color = rng.uniform(0.0, 1.0, size=(n, 3, 1, 1))
    images = np.where(inside[:, None], color, images)
    images = images + 0.04 * rng.standard_normal(images.shape)
    return np.clip(images, -1, 1).astype(np.float32), labels.astype(np.int64)


def load_image_folder(path, size: int = 32) -> np.ndarray:
    """Load 8-bit RGB images from a folder, resized and scaled to ``[-1, 1]``."""
    from PIL import Image

    files: List[Path] = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images found in {path}")
    out = np.empty((len(files), 3, size, size), dtype=np.float32)
    for i, f in enumerate(files):
        with Image.open(f) as im:
            arr = np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR), dtype=np.float32)
        out[i] = arr.transpose(2, 0, 1) / 127.5 - 1.0
    return out


@dataclass
class LoadedData:
    train_pool: np.ndarray
    validation: np.ndarray
    labels: Optional[np.ndarray] = None
    val_labels: Optional[np.ndarray] = None


def load_source(source: str, n: int, seed: int, *, ring: Optional[SyntheticSpec] = None,
                folder: Optional[str] = None, image_size: int = 32, n_val: Optional[int] = None) -> LoadedData:
    """Materialize a full training pool plus a disjoint validation split."""
    n_val = n_val if n_val is not None else max(1, n // 5)
    if source == "ring":
        base = ring or SyntheticSpec()
        pool = sample_ring(SyntheticSpec(base.modes, base.radius, base.std, n, seed))
        val = sample_ring(SyntheticSpec(base.modes, base.radius, base.std, n_val, seed + 104729))
        return LoadedData(pool, val)
    if source == "toy_shapes":
        pool, labels = make_toy_images(n, seed, image_size)
        val, val_labels = make_toy_images(n_val, seed + 104729, image_size)
        return LoadedData(pool, val, labels, val_labels)
    if source == "folder":
        if folder is None:
            raise ValueError("folder source needs a path")
        images = load_image_folder(folder, image_size)
        if images.shape[0] < 2:
            raise ValueError("image folder needs at least two images")
        perm = np.random.default_rng(seed).permutation(images.shape[0])
        k = min(n_val, images.shape[0] // 5 or 1)
        return LoadedData(images[np.sort(perm[k:])], images[np.sort(perm[:k])])
    raise ValueError(f"unknown data source {source!r}")
