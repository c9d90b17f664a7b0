"""Synthetic oriented-texture segmentation task.

Each image is a background texture with one to three ellipses or
rectangles pasted on top.  Every class owns a sinusoidal texture with its
own frequency and orientation (random phase per region), so separating
classes requires local frequency/orientation analysis and correct
boundaries, which is what the Gabor and LoG filters provide.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_classes: int = 4
    n_train: int = 200
    n_val: int = 40
    frequencies: tuple = (0.0, 0.125, 0.25, 1.0 / 6.0)  # cycles per pixel, one per class
    orientations: tuple = (0.0, 0.0, math.pi / 4, math.pi / 2)  # radians, one per class
    noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))
        object.__setattr__(self, "orientations", tuple(float(o) for o in self.orientations))
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if len(self.frequencies) != self.n_classes or len(self.orientations) != self.n_classes:
            raise ValueError("need one texture frequency and orientation per class")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class SegmentationSample:
    image: np.ndarray   # [H, W] float64
    labels: np.ndarray  # [H, W] int64
    index: int = 0
    meta: dict = field(default_factory=dict)


def _texture(cfg: SynthConfig, cls: int, phase: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    f, a = cfg.frequencies[cls], cfg.orientations[cls]
    return np.cos(2.0 * math.pi * f * (x * math.cos(a) + y * math.sin(a)) + phase)


def _shape_mask(rng: np.random.Generator, size: int, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, str]:
    s = size / 64.0
    cx, cy = rng.uniform(12 * s, size - 12 * s, size=2)
    a, b = rng.uniform(7 * s, 18 * s, size=2)
    if rng.random() < 0.5:
        t = rng.uniform(0, math.pi)
        dx, dy = x - cx, y - cy
        u = dx * math.cos(t) + dy * math.sin(t)
        v = -dx * math.sin(t) + dy * math.cos(t)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0, "ellipse"
    return (np.abs(x - cx) <= a) & (np.abs(y - cy) <= b), "rectangle"


def make_sample(cfg: SynthConfig, rng: np.random.Generator, index: int = 0) -> SegmentationSample:
    n = cfg.image_size
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    image = _texture(cfg, 0, rng.uniform(0, 2 * math.pi), x, y)
    labels = np.zeros((n, n), dtype=np.int64)
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        mask, kind = _shape_mask(rng, n, x, y)
        cls = int(rng.integers(1, cfg.n_classes))
        image = np.where(mask, _texture(cfg, cls, rng.uniform(0, 2 * math.pi), x, y), image)
        labels[mask] = cls
        shapes.append((kind, cls))
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    return SegmentationSample(image, labels, index, {"shapes": shapes})


def generate_samples(cfg: SynthConfig, count: int, seed: int) -> list[SegmentationSample]:
    rng = np.random.default_rng(seed)
    return [make_sample(cfg, rng, i) for i in range(count)]


def synth_generate(cfg: SynthConfig) -> list[SegmentationSample]:
    """``n_train + n_val`` samples, training samples first; deterministic in ``cfg.seed``."""
    return generate_samples(cfg, cfg.n_train + cfg.n_val, cfg.seed)


def synth_splits(cfg: SynthConfig) -> tuple[list, list]:
    samples = synth_generate(cfg)
    return samples[:cfg.n_train], samples[cfg.n_train:]


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """Images ``[N, 1, H, W]`` and labels ``[N, H, W]``."""
    return (np.stack([s.image for s in samples])[:, None],
            np.stack([s.labels for s in samples]))
