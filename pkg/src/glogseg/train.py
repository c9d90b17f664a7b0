"""Training loop, ablation runner and JSON run configuration."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ops
from .backbone import BankConfig, ModelConfig, ModelWeights, model_forward, model_init
from .filters import FilterBank
from .data import SynthConfig, stack, synth_splits
from .metrics import MetricsReport, evaluate_dataset
from .optim import AdamW
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 2e-4
    n_gabor: int = 2
    n_log: int = 5
    kernel_size: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.n_gabor < 0 or self.n_log < 0:
            raise ValueError("filter counts must be >= 0")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 3")

    @property
    def bank(self) -> BankConfig:
        return BankConfig(self.n_gabor, self.n_log, self.kernel_size)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainReport:
    train_cfg: TrainConfig
    synth_cfg: SynthConfig
    losses: list = field(default_factory=list)
    val_dice: list = field(default_factory=list)
    bank_init: list = field(default_factory=list)
    initial_bank: Optional[FilterBank] = None
    bank_final: list = field(default_factory=list)
    first_step_bank_grads: dict = field(default_factory=dict)
    wall_time: float = 0.0
    final_metrics: Optional[MetricsReport] = None
    weights: Optional[ModelWeights] = None


def segmentation_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """``0.5 * cross-entropy + 0.5 * soft Dice``."""
    return ops.add(ops.scale(ops.softmax_cross_entropy(logits, labels), 0.5),
                   ops.scale(ops.dice_loss(logits, labels), 0.5))


def train(train_cfg: TrainConfig, synth_cfg: SynthConfig, model_cfg: Optional[ModelConfig] = None,
          on_epoch: Optional[Callable[[int, float, float], None]] = None) -> TrainReport:
    """Mini-batch AdamW training; validation Dice after every epoch.

    Shuffling uses a generator seeded from ``train_cfg.seed`` so two runs
    with the same configs produce identical curves.
    """
    t0 = time.perf_counter()
    train_set, val_set = synth_splits(synth_cfg)
    weights = model_init(synth_cfg.n_classes, model_cfg, train_cfg.bank, train_cfg.seed)
    report = TrainReport(train_cfg, synth_cfg, bank_init=weights.bank.effective_rows(),
                         initial_bank=weights.bank.copy())
    opt = AdamW(weights.parameters(), lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    images, labels = stack(train_set)
    n = len(train_set)
    rng = np.random.default_rng(train_cfg.seed)

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            try:
                with Tape() as tape:
                    logits = model_forward(Tensor(images[idx]), weights)
                    loss = segmentation_loss(logits, labels[idx])
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, batch {b}") from exc
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(tape, loss, reset=True)
            if epoch == 0 and b == 0:
                report.first_step_bank_grads = {
                    "gabor": np.zeros(weights.bank.gabor.shape) if weights.bank.gabor.grad is None
                    else weights.bank.gabor.grad.copy(),
                    "log": np.zeros(weights.bank.log.shape) if weights.bank.log.grad is None
                    else weights.bank.log.grad.copy(),
                }
            opt.step()
            total += float(loss.data) * len(idx)
        report.losses.append(total / n)
        val = evaluate_dataset(weights, val_set) if val_set else None
        report.val_dice.append(val.mean_dice if val else float("nan"))
        report.final_metrics = val
        log.info("epoch %d loss %.5f val_dice %.4f", epoch, report.losses[-1], report.val_dice[-1])
        if on_epoch:
            on_epoch(epoch, report.losses[-1], report.val_dice[-1])

    report.bank_final = weights.bank.effective_rows()
    report.weights = weights
    report.wall_time = time.perf_counter() - t0
    return report


ABLATION_VARIANTS = ("none", "gabor", "log", "glog")


def run_ablation(base_cfg: TrainConfig, synth_cfg: SynthConfig, model_cfg: Optional[ModelConfig] = None,
                 on_variant: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Train the no-filter, Gabor-only, LoG-only and combined variants on one budget."""
    g, l = base_cfg.n_gabor, base_cfg.n_log
    counts = {"none": (0, 0), "gabor": (g, 0), "log": (0, l), "glog": (g, l)}
    rows = []
    for name in ABLATION_VARIANTS:
        ng, nl = counts[name]
        cfg = dataclasses.replace(base_cfg, n_gabor=ng, n_log=nl)
        rep = train(cfg, synth_cfg, model_cfg)
        m = rep.final_metrics
        row = dict(variant=name, n_gabor=ng, n_log=nl, extra_params=5 * ng + nl,
                   total_params=rep.weights.param_count(),
                   mean_dice=m.mean_dice if m else float("nan"),
                   mean_hd95=m.mean_hd95 if m else float("nan"),
                   final_loss=rep.losses[-1])
        rows.append(row)
        if on_variant:
            on_variant(row)
    return rows


def ablation_ordering_holds(rows: list[dict]) -> bool:
    """Combined variant at least as good as each single-filter variant (informational)."""
    by = {r["variant"]: r["mean_dice"] for r in rows}
    return by["glog"] >= by["gabor"] and by["glog"] >= by["log"]


ABLATION_FIELDS = ("variant", "n_gabor", "n_log", "extra_params", "total_params",
                   "mean_dice", "mean_hd95", "final_loss")


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for r in rows:
            w.writerow([r["variant"], r["n_gabor"], r["n_log"], r["extra_params"], r["total_params"],
                        f"{r['mean_dice']:.6f}", f"{r['mean_hd95']:.6f}", f"{r['final_loss']:.6f}"])


def write_loss_csv(path, report: TrainReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_dice"])
        for e, (lo, vd) in enumerate(zip(report.losses, report.val_dice)):
            w.writerow([e, f"{lo:.6f}", f"{vd:.6f}"])


# -- config files -------------------------------------------------------------

def _build(cls, section: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ValueError(f"unknown keys in {where}: {', '.join(unknown)}")
    return cls(**section)


def config_from_dict(raw: dict) -> tuple[TrainConfig, SynthConfig]:
    """``{"train": {...}, "synth": {...}}``; both sections optional, unknown keys rejected."""
    unknown = sorted(set(raw) - {"train", "synth"})
    if unknown:
        raise ValueError(f"unknown top-level config keys: {', '.join(unknown)}")
    return (_build(TrainConfig, raw.get("train", {}), "train"),
            _build(SynthConfig, raw.get("synth", {}), "synth"))


def load_config(path) -> tuple[TrainConfig, SynthConfig]:
    with open(path) as f:
        return config_from_dict(json.load(f))


def config_to_dict(train_cfg: TrainConfig, synth_cfg: SynthConfig) -> dict:
    s = dataclasses.asdict(synth_cfg)
    s["frequencies"] = list(s["frequencies"])
    s["orientations"] = list(s["orientations"])
    return {"train": dataclasses.asdict(train_cfg), "synth": s}
