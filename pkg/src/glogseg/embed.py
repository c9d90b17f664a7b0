"""Convolutional patch embedding over the image and its filter-bank responses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .filters import FilterBank, bank_apply
from .tensor import Tensor


@dataclass(frozen=True)
class EmbedConfig:
    patch_size: int = 4
    embed_dim: int = 48
    conv_stack: tuple = ((24, 2), (48, 2))
    conv_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_stack", tuple(tuple(s) for s in self.conv_stack))
        strides = math.prod(s for _, s in self.conv_stack)
        if strides != self.patch_size:
            raise ValueError(f"conv strides multiply to {strides}, patch size is {self.patch_size}")
        if self.conv_stack[-1][0] != self.embed_dim:
            raise ValueError("last conv stage must output embed_dim channels")


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_embed_weights(cfg: EmbedConfig, in_channels: int, rng: np.random.Generator,
                       prefix: str = "embed") -> dict[str, Tensor]:
    """Weights for the strided conv stages; ``in_channels`` = 1 + filter count."""
    weights = {}
    c_in, k = in_channels, cfg.conv_kernel
    for i, (c_out, _) in enumerate(cfg.conv_stack):
        fan_in = c_in * k * k
        weights[f"{prefix}.{i}.w"] = Tensor(uniform_init(rng, (c_out, c_in, k, k), fan_in), True)
        weights[f"{prefix}.{i}.b"] = Tensor(np.zeros(c_out), True)
        weights[f"{prefix}.{i}.ln_g"] = Tensor(np.ones(c_out), True)
        weights[f"{prefix}.{i}.ln_b"] = Tensor(np.zeros(c_out), True)
        c_in = c_out
    for name, t in weights.items():
        t.name = name
    return weights


def stem_forward(image: Tensor, bank: FilterBank) -> Tensor:
    """The raw image with its filter responses stacked behind it."""
    if bank.n_filters == 0:
        return image
    return ops.concat_channels([image, bank_apply(image, bank)])


def conv_stack_forward(x: Tensor, weights: dict, cfg: EmbedConfig, prefix: str = "embed") -> Tensor:
    for i, (_, stride) in enumerate(cfg.conv_stack):
        x = ops.conv2d(x, weights[f"{prefix}.{i}.w"], weights[f"{prefix}.{i}.b"], stride=stride)
        x = ops.gelu(x)
        x = ops.layer_norm(x, weights[f"{prefix}.{i}.ln_g"], weights[f"{prefix}.{i}.ln_b"])
    return x


def embed_forward(image: Tensor, bank: FilterBank, weights: dict, cfg: EmbedConfig,
                  prefix: str = "embed") -> Tensor:
    """Token grid ``[embed_dim, H/patch, W/patch]`` (batched inputs keep their batch axis)."""
    h, w = image.shape[-2:]
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {cfg.patch_size}")
    return conv_stack_forward(stem_forward(image, bank), weights, cfg, prefix)


__all__ = ["EmbedConfig", "init_embed_weights", "stem_forward", "conv_stack_forward",
           "embed_forward", "uniform_init"]
