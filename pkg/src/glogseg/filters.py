"""Learnable Gabor and Laplacian-of-Gaussian kernels with closed-form gradients.

Kernels are sampled on an integer grid centred on the origin, ``x``
pointing right (columns) and ``y`` pointing down (rows).  Positive
parameters (wavelength, envelope width, aspect ratio, LoG scale) are
stored as logs and exponentiated, so any unconstrained update keeps them
valid.  Orientation and phase are plain radians.

Kernel generation does not go through the generic tape.  The derivative
of every tap with respect to every raw parameter is written out here and
joined to the tape at the kernel tensor (see :func:`bank_kernels`).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .tensor import Tensor

GABOR_FIELDS = ("lambda_raw", "theta", "psi", "sigma_raw", "gamma_raw")


@dataclass(frozen=True)
class KernelGrid:
    size: int = 7

    def __post_init__(self):
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 3, got {self.size}")

    @property
    def radius(self) -> int:
        return (self.size - 1) // 2

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """``(x, y)`` offset arrays of shape ``[K, K]`` indexed ``[row, col]``."""
        r = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        y, x = np.meshgrid(r, r, indexing="ij")
        return x, y


@dataclass(frozen=True)
class GaborParams:
    lambda_raw: float
    theta: float
    psi: float
    sigma_raw: float
    gamma_raw: float

    @classmethod
    def from_effective(cls, lam: float, theta: float, psi: float, sigma: float, gamma: float) -> "GaborParams":
        return cls(math.log(lam), theta, psi, math.log(sigma), math.log(gamma))

    @property
    def wavelength(self) -> float:
        return math.exp(self.lambda_raw)

    @property
    def sigma(self) -> float:
        return math.exp(self.sigma_raw)

    @property
    def gamma(self) -> float:
        return math.exp(self.gamma_raw)

    def raw(self) -> np.ndarray:
        return np.array([self.lambda_raw, self.theta, self.psi, self.sigma_raw, self.gamma_raw])


@dataclass(frozen=True)
class LoGParams:
    sigma_raw: float

    @classmethod
    def from_effective(cls, sigma: float) -> "LoGParams":
        return cls(math.log(sigma))

    @property
    def sigma(self) -> float:
        return math.exp(self.sigma_raw)

    def raw(self) -> np.ndarray:
        return np.array([self.sigma_raw])


def _gabor_terms(p: GaborParams, g: KernelGrid):
    x, y = g.coords()
    lam, sig, gam = p.wavelength, p.sigma, p.gamma
    c, s = math.cos(p.theta), math.sin(p.theta)
    xt = x * c + y * s
    yt = -x * s + y * c
    quad = xt * xt + gam * gam * yt * yt
    env = np.exp(-quad / (2.0 * sig * sig))
    arg = 2.0 * math.pi * xt / lam + p.psi
    return xt, yt, env, np.cos(arg), np.sin(arg), lam, sig, gam


def gabor_kernel(p: GaborParams, g: KernelGrid) -> np.ndarray:
    """Unnormalized Gabor taps: Gaussian envelope times a cosine carrier."""
    _, _, env, cos_a, _, _, _, _ = _gabor_terms(p, g)
    return env * cos_a


def gabor_kernel_grad(p: GaborParams, g: KernelGrid) -> np.ndarray:
    """``[5, K, K]`` derivatives of every tap w.r.t. the raw parameters.

    Order follows :data:`GABOR_FIELDS`.  Log-stored parameters carry the
    chain factor ``d(effective)/d(raw) = effective``.
    """
    xt, yt, env, cos_a, sin_a, lam, sig, gam = _gabor_terms(p, g)
    s2 = sig * sig
    two_pi = 2.0 * math.pi
    d_lambda = env * sin_a * two_pi * xt / lam
    # rotating the grid: d(xt)/d(theta) = yt, d(yt)/d(theta) = -xt
    d_theta = (-env * cos_a * xt * yt * (1.0 - gam * gam) / s2
               - env * sin_a * two_pi * yt / lam)
    d_psi = -env * sin_a
    d_sigma = env * cos_a * (xt * xt + gam * gam * yt * yt) / s2
    d_gamma = -env * cos_a * gam * gam * yt * yt / s2
    return np.stack([d_lambda, d_theta, d_psi, d_sigma, d_gamma])


def log_kernel_raw(p: LoGParams, g: KernelGrid) -> np.ndarray:
    """LoG taps before mean subtraction."""
    x, y = g.coords()
    sig = p.sigma
    u = (x * x + y * y) / (2.0 * sig * sig)
    return -(1.0 / (math.pi * sig ** 4)) * (1.0 - u) * np.exp(-u)


def log_kernel(p: LoGParams, g: KernelGrid) -> np.ndarray:
    """Zero-sum LoG kernel: sampled taps minus their mean."""
    k = log_kernel_raw(p, g)
    return k - k.mean()


def log_kernel_grad(p: LoGParams, g: KernelGrid) -> np.ndarray:
    """``[K, K]`` derivative of :func:`log_kernel` w.r.t. ``sigma_raw``."""
    x, y = g.coords()
    sig = p.sigma
    u = (x * x + y * y) / (2.0 * sig * sig)
    d = (2.0 / (math.pi * sig ** 4)) * np.exp(-u) * (2.0 - 4.0 * u + u * u)
    return d - d.mean()


@dataclass
class FilterBank:
    """Raw Gabor parameters ``[G, 5]`` and LoG parameters ``[L, 1]`` as tensors."""

    gabor: Tensor
    log: Tensor
    grid: KernelGrid

    @classmethod
    def from_params(cls, gabor: Sequence[GaborParams], log: Sequence[LoGParams],
                    size: int = 7) -> "FilterBank":
        g = np.array([p.raw() for p in gabor]).reshape(len(gabor), 5)
        lg = np.array([p.raw() for p in log]).reshape(len(log), 1)
        return cls(Tensor(g, requires_grad=True, name="bank.gabor"),
                   Tensor(lg, requires_grad=True, name="bank.log"),
                   KernelGrid(size))

    @property
    def n_gabor(self) -> int:
        return self.gabor.shape[0]

    @property
    def n_log(self) -> int:
        return self.log.shape[0]

    @property
    def n_filters(self) -> int:
        return self.n_gabor + self.n_log

    def gabor_params(self) -> list[GaborParams]:
        return [GaborParams(*map(float, row)) for row in self.gabor.data]

    def log_params(self) -> list[LoGParams]:
        return [LoGParams(float(row[0])) for row in self.log.data]

    def parameters(self) -> list[Tensor]:
        return [self.gabor, self.log]

    def copy(self) -> "FilterBank":
        return FilterBank(Tensor(self.gabor.data.copy(), True, "bank.gabor"),
                          Tensor(self.log.data.copy(), True, "bank.log"), self.grid)

    def effective_rows(self) -> list[dict]:
        """One record per filter with effective (not raw) parameter values."""
        rows = []
        for i, p in enumerate(self.gabor_params()):
            rows.append(dict(filter_id=i, type="gabor", wavelength=p.wavelength, theta=p.theta,
                             psi=p.psi, sigma=p.sigma, gamma=p.gamma))
        for j, p in enumerate(self.log_params()):
            rows.append(dict(filter_id=self.n_gabor + j, type="log", wavelength=None, theta=None,
                             psi=None, sigma=p.sigma, gamma=None))
        return rows


def learnable_param_count(bank: FilterBank) -> int:
    return int(bank.gabor.size + bank.log.size)


def init_bank(n_gabor: int, n_log: int, size: int = 7, seed: int = 0) -> FilterBank:
    """Standard filter-bank initialization.

    Orientations evenly spaced over ``[0, pi)``, wavelengths evenly spaced
    over ``[K/4, K]``, envelope width ``0.56 * wavelength``, aspect 0.5,
    phase 0.  LoG scales are log-spaced over ``[0.5, K/3]``.  The layout is
    fully determined by the counts; ``seed`` is accepted for interface
    symmetry with the rest of the initializers.
    """
    if n_gabor < 0 or n_log < 0:
        raise ValueError("filter counts must be non-negative")
    grid = KernelGrid(size)
    thetas = np.arange(n_gabor) * math.pi / max(n_gabor, 1)
    lams = np.linspace(size / 4.0, float(size), n_gabor)
    gabor = [GaborParams.from_effective(lam, th, 0.0, 0.56 * lam, 0.5)
             for lam, th in zip(lams, thetas)]
    sigmas = np.geomspace(0.5, size / 3.0, n_log) if n_log else []
    log = [LoGParams.from_effective(s) for s in sigmas]
    return FilterBank.from_params(gabor, log, grid.size)


def kernel_stack(bank: FilterBank) -> np.ndarray:
    k = bank.grid.size
    mats = [gabor_kernel(p, bank.grid) for p in bank.gabor_params()]
    mats += [log_kernel(p, bank.grid) for p in bank.log_params()]
    if not mats:
        return np.zeros((0, 1, k, k))
    return np.stack(mats)[:, None]


def _contract(bank: FilterBank, kernel_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain ``d(loss)/d(kernel)`` ``[F, K, K]`` into raw-parameter gradients."""
    g_gabor = np.zeros((bank.n_gabor, 5))
    g_log = np.zeros((bank.n_log, 1))
    for i, p in enumerate(bank.gabor_params()):
        g_gabor[i] = np.tensordot(gabor_kernel_grad(p, bank.grid), kernel_grad[i], axes=2)
    for j, p in enumerate(bank.log_params()):
        g_log[j, 0] = np.sum(log_kernel_grad(p, bank.grid) * kernel_grad[bank.n_gabor + j])
    return g_gabor, g_log


def bank_kernels(bank: FilterBank) -> Tensor:
    """``[F, 1, K, K]`` kernel tensor, Gabor filters first, differentiable in the bank."""
    stack = kernel_stack(bank)

    def back(g):
        return _contract(bank, g[:, 0])

    return ops._result(stack, (bank.gabor, bank.log), back)


def _check_single_channel(image: Tensor) -> None:
    if image.data.ndim not in (3, 4) or image.shape[-3] != 1:
        raise ValueError(f"filter bank expects a single-channel image, got shape {image.shape}")


def bank_apply(image: Tensor, bank: FilterBank) -> Tensor:
    """Filter responses ``[F, H, W]`` (or ``[N, F, H, W]``), Gabor channels first."""
    _check_single_channel(image)
    if bank.n_filters == 0:
        shape = image.shape[:-3] + (0,) + image.shape[-2:]
        return Tensor(np.zeros(shape))
    return ops.conv2d(image, bank_kernels(bank))


def bank_param_grad(grad_maps, image, bank: FilterBank) -> tuple[np.ndarray, np.ndarray]:
    """Raw-parameter gradients given d(loss)/d(responses).

    Returns ``(gabor [G, 5], log [L, 1])``.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    gm = grad_maps.data if isinstance(grad_maps, Tensor) else np.asarray(grad_maps, dtype=np.float64)
    if img.ndim not in (3, 4) or img.shape[-3] != 1:
        raise ValueError(f"filter bank expects a single-channel image, got shape {img.shape}")
    if gm.shape[-3] != bank.n_filters or gm.shape[-2:] != img.shape[-2:] or gm.ndim != img.ndim:
        raise ValueError(f"grad maps {gm.shape} do not match image {img.shape} and "
                         f"{bank.n_filters} filters")
    kgrad = ops.conv2d_kernel_grad(img, gm, bank.grid.size)  # [F, 1, K, K]
    return _contract(bank, kgrad[:, 0])


# -- export -----------------------------------------------------------------

def write_pgm16(path, array: np.ndarray) -> None:
    """Binary 16-bit PGM, min-max scaled to ``[0, 65535]``."""
    a = np.asarray(array, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros(a.shape) if hi == lo else (a - lo) / (hi - lo)
    pix = np.round(scaled * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode("ascii"))
        f.write(pix.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w)


FILTER_CSV_HEADER = ("filter_id", "type", "lambda", "theta", "psi", "sigma", "gamma")


def export_filters(bank: FilterBank, out_dir, prefix: str = "") -> list[Path]:
    """Write one PGM per kernel plus ``<prefix>filters.csv`` of effective values."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    kernels = kernel_stack(bank)[:, 0] if bank.n_filters else []
    rows = bank.effective_rows()
    for row, kern in zip(rows, kernels):
        p = out / f"{prefix}filter_{row['filter_id']:02d}_{row['type']}.pgm"
        write_pgm16(p, kern)
        written.append(p)
    csv_path = out / f"{prefix}filters.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FILTER_CSV_HEADER)
        for r in rows:
            w.writerow([r["filter_id"], r["type"]] + [
                "" if r[k] is None else repr(float(r[k]))
                for k in ("wavelength", "theta", "psi", "sigma", "gamma")])
    written.append(csv_path)
    return written


__all__ = [
    "KernelGrid", "GaborParams", "LoGParams", "FilterBank", "GABOR_FIELDS",
    "gabor_kernel", "gabor_kernel_grad", "log_kernel", "log_kernel_raw", "log_kernel_grad",
    "bank_kernels", "bank_apply", "bank_param_grad", "init_bank", "learnable_param_count",
    "export_filters", "write_pgm16", "read_pgm16", "kernel_stack",
]
