"""Toy generator/discriminator families with explicit split points.

Networks are stateless: the architecture lives in a :class:`Network` and the
weights live in a plain ordered ``dict`` (a *param store*).  Keeping the two
apart makes masking, rewinding and checkpointing simple dictionary
operations.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

ParamStore = Dict[str, torch.Tensor]

ARCHITECTURES = ("mlp_gan_2d", "conv_gan_32")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class Layer:
    kind: str  # linear | conv | convT
    fan_in: int
    fan_out: int
    act: str = "none"  # relu | lrelu | tanh | none
    out_shape: Optional[Tuple[int, ...]] = None
    spectral: bool = False


@dataclass
class ModelSpec:
    arch: str = "mlp_gan_2d"
    latent_dim: Optional[int] = None
    width: int = 64
    depth: int = 3
    g_split: Optional[int] = None
    d_split: Optional[int] = None
    spectral_norm: Optional[bool] = None
    dtype: Optional[str] = None
    data_dim: int = 2
    image_size: int = 32

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.latent_dim is None:
            self.latent_dim = 8 if self.arch == "mlp_gan_2d" else 128
        if self.spectral_norm is None:
            self.spectral_norm = self.arch == "conv_gan_32"
        if self.dtype is None:
            self.dtype = "float64" if self.arch == "mlp_gan_2d" else "float32"
        if self.dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if self.latent_dim < 1 or self.width < 1 or self.depth < 1:
            raise ValueError("latent_dim, width and depth must be positive")
        n = self.n_layers
        # defaults: first layer of G, last layer of D
        if self.g_split is None:
            self.g_split = 1
        if self.d_split is None:
            self.d_split = n - 1
        for name, value in (("g_split", self.g_split), ("d_split", self.d_split)):
            if not 1 <= value <= n - 1:
                raise ValueError(f"{name}={value} must lie in [1, {n - 1}]")

    @property
    def n_layers(self) -> int:
        return self.depth + 1 if self.arch == "mlp_gan_2d" else 4

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        if self.arch == "mlp_gan_2d":
            return (self.data_dim,)
        return (3, self.image_size, self.image_size)


class Network:
    """A feed-forward stack evaluated against an external param store."""

    def __init__(self, name: str, layers: Sequence[Layer], split: int, dtype: torch.dtype, scores: bool = False):
        self.name = name
        self.layers: List[Layer] = list(layers)
        self.split = split
        self.dtype = dtype
        # discriminators return a flat (batch,) score vector
        self.scores = scores

    def __len__(self):
        return len(self.layers)

    def __call__(self, params: ParamStore, x: torch.Tensor) -> torch.Tensor:
        return self.run(params, x, 0, len(self.layers))

    def param_names(self) -> List[str]:
        names = []
        for i, _ in enumerate(self.layers):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def init_params(self, seed: int) -> ParamStore:
        gen = torch.Generator().manual_seed(seed)
        store: ParamStore = OrderedDict()
        for i, layer in enumerate(self.layers):
            w = torch.empty(_weight_shape(layer), dtype=torch.float64)
            torch.nn.init.orthogonal_(w, generator=gen)
            store[f"layer{i}.weight"] = w.to(self.dtype)
            bias_len = layer.fan_out
            store[f"layer{i}.bias"] = torch.zeros(bias_len, dtype=self.dtype)
        return store

    def run(self, params: ParamStore, x: torch.Tensor, start: int, stop: int) -> torch.Tensor:
        for i in range(start, stop):
            x = _apply_layer(self.layers[i], params[f"layer{i}.weight"], params[f"layer{i}.bias"], x)
        if self.scores and stop == len(self.layers):
            x = x.reshape(-1)
        return x

    def split_parts(self, params: ParamStore, split: Optional[int] = None):
        """Return ``(part1, part2)`` callables with ``net = part2 ∘ part1``."""
        k = self.split if split is None else split
        if not 1 <= k <= len(self.layers) - 1:
            raise ValueError(f"split {k} outside [1, {len(self.layers) - 1}]")
        n = len(self.layers)
        return (lambda x: self.run(params, x, 0, k)), (lambda h: self.run(params, h, k, n))


def _weight_shape(layer: Layer) -> Tuple[int, ...]:
    if layer.kind == "linear":
        return (layer.fan_out, layer.fan_in)
    if layer.kind == "conv":
        return (layer.fan_out, layer.fan_in, 4, 4)
    if layer.kind == "convT":
        return (layer.fan_in, layer.fan_out, 4, 4)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def spectral_normalize(w: torch.Tensor) -> torch.Tensor:
    # exact largest singular value; no power-iteration state to carry around
    sigma = torch.linalg.matrix_norm(w.reshape(w.shape[0], -1), ord=2)
    return w / sigma.clamp_min(1e-12)


def _apply_layer(layer: Layer, w: torch.Tensor, b: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if layer.spectral:
        w = spectral_normalize(w)
    if layer.kind == "linear":
        x = F.linear(x.flatten(1), w, b)
    elif layer.kind == "conv":
        x = F.conv2d(x, w, b, stride=2, padding=1)
    else:
        x = F.conv_transpose2d(x, w, b, stride=2, padding=1)
    if layer.out_shape is not None:
        x = x.reshape((x.shape[0],) + layer.out_shape)
    if layer.act == "relu":
        x = F.relu(x)
    elif layer.act == "lrelu":
        x = F.leaky_relu(x, 0.2)
    elif layer.act == "tanh":
        x = torch.tanh(x)
    return x


def _generator_layers(spec: ModelSpec) -> List[Layer]:
    w = spec.width
    if spec.arch == "mlp_gan_2d":
        dims = [spec.latent_dim] + [w] * spec.depth
        layers = [Layer("linear", a, b, "relu") for a, b in zip(dims[:-1], dims[1:])]
        return layers + [Layer("linear", w, spec.data_dim)]
    base = spec.image_size // 8
    return [
        Layer("linear", spec.latent_dim, 4 * w * base * base, "relu", out_shape=(4 * w, base, base)),
        Layer("convT", 4 * w, 2 * w, "relu"),
        Layer("convT", 2 * w, w, "relu"),
        Layer("convT", w, 3, "tanh"),
    ]


def _discriminator_layers(spec: ModelSpec) -> List[Layer]:
    w, sn = spec.width, bool(spec.spectral_norm)
    if spec.arch == "mlp_gan_2d":
        dims = [spec.data_dim] + [w] * spec.depth
        layers = [Layer("linear", a, b, "lrelu", spectral=sn) for a, b in zip(dims[:-1], dims[1:])]
        return layers + [Layer("linear", w, 1, spectral=sn)]
    base = spec.image_size // 8
    return [
        Layer("conv", 3, w, "lrelu", spectral=sn),
        Layer("conv", w, 2 * w, "lrelu", spectral=sn),
        Layer("conv", 2 * w, 4 * w, "lrelu", spectral=sn),
        Layer("linear", 4 * w * base * base, 1, spectral=sn),
    ]


def build_generator(spec: ModelSpec, seed: int) -> Tuple[ParamStore, Network]:
    net = Network("generator", _generator_layers(spec), spec.g_split, spec.torch_dtype)
    return net.init_params(seed), net


def build_discriminator(spec: ModelSpec, seed: int) -> Tuple[ParamStore, Network]:
    net = Network("discriminator", _discriminator_layers(spec), spec.d_split, spec.torch_dtype, scores=True)
    return net.init_params(seed), net


def forward_split(
    part1: Callable[[torch.Tensor], torch.Tensor],
    part2: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    delta: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Evaluate ``part2(part1(x) + delta)``; returns ``(features, output)``."""
    features = part1(x)
    if delta is None:
        return features, part2(features)
    if delta.shape != features.shape:
        raise ValueError(f"delta shape {tuple(delta.shape)} does not match features {tuple(features.shape)}")
    return features, part2(features + delta)


def is_prunable(name: str) -> bool:
    return name.rsplit(".", 1)[-1] == "weight"


def prunable_names(store: ParamStore) -> List[str]:
    return [k for k in store if is_prunable(k)]


def count_params(store: ParamStore, prunable_only: bool = False) -> int:
    return sum(v.numel() for k, v in store.items() if not prunable_only or is_prunable(k))


def clone_store(store: ParamStore) -> ParamStore:
    return OrderedDict((k, v.detach().clone()) for k, v in store.items())


@dataclass
class GANModels:
    """Convenience bundle of both players built from one spec."""

    spec: ModelSpec
    gen: Network
    disc: Network
    theta: ParamStore = field(repr=False)
    phi: ParamStore = field(repr=False)


def build_gan(spec: ModelSpec, seed: int) -> GANModels:
    theta, gen = build_generator(spec, 2 * seed + 1)
    phi, disc = build_discriminator(spec, 2 * seed + 2)
    return GANModels(spec, gen, disc, theta, phi)
