"""Dice similarity and 95th-percentile Hausdorff distance for label maps.

Boundary pixels are mask pixels with at least one 4-neighbour outside the
mask or outside the image.  HD95 takes, for each direction, the
nearest-rank 95th percentile (sorted index ``ceil(0.95 n) - 1``) of
boundary-to-boundary nearest distances, and reports the larger one.

Empty-mask conventions: Dice is 1 when both masks are empty and 0 when
exactly one is; HD95 is 0 when both are empty and the image diagonal
when exactly one is.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class MetricsReport:
    class_ids: list
    per_class_dice: list
    per_class_hd95: list
    mean_dice: float
    mean_hd95: float
    counts: list = field(default_factory=list)

    def rows(self) -> list[tuple]:
        out = [(str(c), d, h) for c, d, h in zip(self.class_ids, self.per_class_dice, self.per_class_hd95)]
        out.append(("mean", self.mean_dice, self.mean_hd95))
        return out


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice(pred, gt, class_id: int) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_shapes(pred, gt)
    p, g = pred == class_id, gt == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(mask) -> np.ndarray:
    """Inner 4-connected boundary, counting the image edge as outside."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def percentile_index(n: int) -> int:
    """Nearest-rank index ``ceil(0.95 n) - 1`` computed in integers."""
    return (95 * n + 99) // 100 - 1


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return np.sort(np.asarray(d, dtype=np.float64))


def hd95(pred_mask, gt_mask, spacing: float = 1.0) -> float:
    a, b = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    _check_shapes(a, b)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        h, w = a.shape
        return math.hypot(h - 1, w - 1) * spacing
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    dab = _directed(pa, pb)
    dba = _directed(pb, pa)
    return float(max(dab[percentile_index(len(dab))], dba[percentile_index(len(dba))])) * spacing


def sample_metrics(pred, gt, n_classes: int, spacing: float = 1.0,
                   include_background: bool = False) -> dict:
    """``{class_id: (dice, hd95)}`` for classes present in ``gt``."""
    out = {}
    start = 0 if include_background else 1
    for c in range(start, n_classes):
        if not np.any(gt == c):
            continue
        out[c] = (dice(pred, gt, c), hd95(pred == c, gt == c, spacing))
    return out


def aggregate(per_sample: Sequence[dict], n_classes: int, include_background: bool = False) -> MetricsReport:
    """Average per class over samples containing it, then over classes."""
    start = 0 if include_background else 1
    ids, dices, hds, counts = [], [], [], []
    for c in range(start, n_classes):
        vals = [m[c] for m in per_sample if c in m]
        ids.append(c)
        counts.append(len(vals))
        if vals:
            dices.append(float(np.mean([v[0] for v in vals])))
            hds.append(float(np.mean([v[1] for v in vals])))
        else:
            dices.append(float("nan"))
            hds.append(float("nan"))
    present = [i for i, n in enumerate(counts) if n]
    mean_d = float(np.mean([dices[i] for i in present])) if present else float("nan")
    mean_h = float(np.mean([hds[i] for i in present])) if present else float("nan")
    return MetricsReport(ids, dices, hds, mean_d, mean_h, counts)


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("GLOG_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_dataset(model, samples: Sequence, n_classes: Optional[int] = None,
                     spacing: float = 1.0, batch_size: int = 16,
                     threads: Optional[int] = None) -> MetricsReport:
    """Metrics of ``argmax`` predictions over ``samples``.

    ``model`` is either :class:`~glogseg.backbone.ModelWeights` or a
    callable mapping images ``[N, 1, H, W]`` to logits ``[N, C, H, W]``.
    Evaluation is split across ``GLOG_THREADS`` workers (default 1); the
    per-sample results are merged in sample order.
    """
    if not samples:
        raise ValueError("evaluate_dataset needs at least one sample")
    from .backbone import ModelWeights, model_forward
    from .tensor import Tensor, no_grad

    if isinstance(model, ModelWeights):
        weights = model

        def logits_fn(x):
            with no_grad():
                return model_forward(Tensor(x), weights).data
        n_classes = n_classes or weights.config.n_classes
    else:
        logits_fn = model
    images = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])[:, None]
    labels = [np.asarray(s.labels) for s in samples]

    def run(chunk: range) -> list[dict]:
        out = []
        for i in range(chunk.start, chunk.stop, batch_size):
            j = min(i + batch_size, chunk.stop)
            logits = np.asarray(logits_fn(images[i:j]))
            nc = n_classes or logits.shape[1]
            for k, pred in enumerate(logits.argmax(axis=1)):
                out.append(sample_metrics(pred, labels[i + k], nc, spacing))
        return out

    n = len(samples)
    threads = threads or eval_threads()
    if threads <= 1:
        per_sample = run(range(n))
    else:
        step = math.ceil(n / threads)
        chunks = [range(s, min(s + step, n)) for s in range(0, n, step)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_sample = [m for part in pool.map(run, chunks) for m in part]
    if n_classes is None:
        n_classes = int(np.asarray(logits_fn(images[:1])).shape[1])
    return aggregate(per_sample, n_classes)


def write_metrics_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class_id", "dice", "hd95"])
        for cid, d, h in report.rows():
            w.writerow([cid, f"{d:.6f}", f"{h:.6f}"])


__all__ = ["MetricsReport", "dice", "boundary", "hd95", "percentile_index", "sample_metrics",
           "aggregate", "evaluate_dataset", "write_metrics_csv", "eval_threads"]
