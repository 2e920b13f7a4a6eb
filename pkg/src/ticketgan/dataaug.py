"""Differentiable data-level augmentation (color, translation, cutout).

Every transform is built from additions, multiplications and index
gathers, so gradients flow back to the input pixels; this is what lets the
augmented fake batch train the generator.  Random parameters are drawn
independently per image from the supplied generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class AugPolicy:
    translation: bool = True
    cutout: bool = True
    color: bool = True
    translation_ratio: float = 0.125
    cutout_ratio: float = 0.5
    brightness: float = 0.5
    saturation: float = 1.0
    contrast: float = 0.5
    # fixed per-image application probability (stand-in for ADA's adaptive p)
    probability: float = 1.0

    def __post_init__(self):
        for name in ("translation_ratio", "cutout_ratio", "probability"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} must lie in [0, 1]")
        for name in ("brightness", "saturation", "contrast"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} range must be non-negative")

    @classmethod
    def off(cls) -> "AugPolicy":
        return cls(translation=False, cutout=False, color=False)

    @classmethod
    def from_string(cls, policy: str, **kwargs) -> "AugPolicy":
        """``"color,translation,cutout"`` style names, as in DiffAugment."""
        names = {p.strip() for p in policy.split(",") if p.strip() and p.strip() != "none"}
        unknown = names - {"color", "translation", "cutout"}
        if unknown:
            raise ValueError(f"unknown augmentation(s): {sorted(unknown)}")
        return cls(translation="translation" in names, cutout="cutout" in names, color="color" in names, **kwargs)

    @property
    def is_identity(self) -> bool:
        if self.probability == 0.0:
            return True
        color = self.color and (self.brightness > 0 or self.saturation > 0 or self.contrast > 0)
        return not (color or (self.translation and self.translation_ratio > 0) or (self.cutout and self.cutout_ratio > 0))

    def names(self) -> str:
        active = [n for n in ("color", "translation", "cutout") if getattr(self, n)]
        return ",".join(active) or "none"


def _uniform(n: int, low: float, high: float, rng: torch.Generator, like: torch.Tensor) -> torch.Tensor:
    u = torch.rand(n, generator=rng, dtype=torch.float64)
    return (low + (high - low) * u).to(like.dtype).view(n, 1, 1, 1)


def rand_brightness(x: torch.Tensor, r: float, rng: torch.Generator) -> torch.Tensor:
    return x + _uniform(x.shape[0], -r, r, rng, x)


def rand_saturation(x: torch.Tensor, r: float, rng: torch.Generator) -> torch.Tensor:
    mean = x.mean(dim=1, keepdim=True)
    return (x - mean) * _uniform(x.shape[0], 1 - r, 1 + r, rng, x) + mean


def rand_contrast(x: torch.Tensor, r: float, rng: torch.Generator) -> torch.Tensor:
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return (x - mean) * _uniform(x.shape[0], 1 - r, 1 + r, rng, x) + mean


def rand_translation(x: torch.Tensor, ratio: float, rng: torch.Generator) -> torch.Tensor:
    """Integer shift of up to ``floor(ratio * size)`` pixels, zero padded."""
    b, _, h, w = x.shape
    sh, sw = int(ratio * h), int(ratio * w)
    if sh == 0 and sw == 0:
        return x
    ty = torch.randint(-sh, sh + 1, (b, 1, 1), generator=rng)
    tx = torch.randint(-sw, sw + 1, (b, 1, 1), generator=rng)
    padded = torch.nn.functional.pad(x, [sw, sw, sh, sh]).permute(0, 2, 3, 1)
    rows = torch.arange(h).view(1, h, 1) + sh - ty
    cols = torch.arange(w).view(1, 1, w) + sw - tx
    batch = torch.arange(b).view(b, 1, 1)
    return padded[batch, rows, cols].permute(0, 3, 1, 2)


def rand_cutout(x: torch.Tensor, ratio: float, rng: torch.Generator) -> torch.Tensor:
    """Zero a square of side ``floor(ratio * size)`` placed fully inside the image."""
    b, _, h, w = x.shape
    ch, cw = int(ratio * h), int(ratio * w)
    if ch == 0 or cw == 0:
        return x
    oy = torch.randint(0, h - ch + 1, (b, 1, 1), generator=rng)
    ox = torch.randint(0, w - cw + 1, (b, 1, 1), generator=rng)
    ys = torch.arange(h).view(1, h, 1)
    xs = torch.arange(w).view(1, 1, w)
    inside = (ys >= oy) & (ys < oy + ch) & (xs >= ox) & (xs < ox + cw)
    return x * (~inside).to(x.dtype).unsqueeze(1)


def apply_policy(images: torch.Tensor, policy: AugPolicy, rng: torch.Generator) -> torch.Tensor:
    if images.ndim == 2:
        return images  # point data: nothing to augment
    if images.ndim != 4:
        raise ValueError(f"expected (batch, channel, height, width) or (batch, dim) layout, got shape {tuple(images.shape)}")
    if policy is None or policy.is_identity:
        return images
    x = images
    if policy.color:
        if policy.brightness > 0:
            x = rand_brightness(x, policy.brightness, rng)
        if policy.saturation > 0:
            x = rand_saturation(x, policy.saturation, rng)
        if policy.contrast > 0:
            x = rand_contrast(x, policy.contrast, rng)
    if policy.translation and policy.translation_ratio > 0:
        x = rand_translation(x, policy.translation_ratio, rng)
    if policy.cutout and policy.cutout_ratio > 0:
        x = rand_cutout(x, policy.cutout_ratio, rng)
    if policy.probability < 1.0:
        keep = torch.rand(x.shape[0], generator=rng, dtype=torch.float64) < policy.probability
        x = torch.where(keep.view(-1, 1, 1, 1), x, images)
    return x
