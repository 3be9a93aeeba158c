"""Boundary-weighted BCE + IoU loss, deep supervision, and evaluation metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def _as_mask(g, shape: tuple[int, ...]) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim == 2:
        g = g[None]
    if g.shape != tuple(shape):
        raise ShapeError(f"ground truth shape {g.shape} != prediction shape {tuple(shape)}")
    if not np.isin(g, (0, 1)).all():
        raise ValueError("ground truth must be binary (0/1)")
    return g


def boundary_weights(mask: np.ndarray, kernel_size: int = 15, gain: float = 5.0) -> np.ndarray:
    """1 + gain * |local mean - mask|; the local mean ignores out-of-image pixels."""
    m = np.asarray(mask, dtype=np.float64)
    if gain == 0:
        return np.ones_like(m)
    size = (1,) * (m.ndim - 2) + (kernel_size, kernel_size)
    num = uniform_filter(m, size=size, mode="constant", cval=0.0)
    den = uniform_filter(np.ones_like(m), size=size, mode="constant", cval=0.0)
    return 1.0 + gain * np.abs(num / den - m)


def weighted_bce_iou(target, logits: Tensor, kernel_size: int = 15, weight_gain: float = 5.0,
                     smooth: float = 1.0) -> tuple[Tensor, Tensor]:
    """(iou_loss, bce_loss) for mask logits against a binary target of the same shape."""
    g = _as_mask(target, logits.shape).astype(logits.dtype)
    w = boundary_weights(g, kernel_size, weight_gain).astype(logits.dtype)
    prob = ad.sigmoid(logits)
    inter = ad.sum_all(prob * (w * g))
    union = ad.sum_all(prob * (w * (1 - g))) + float((w * g).sum())
    iou = 1.0 - ad.div(inter + smooth, union + smooth)
    bce = ad.sum_all(ad.bce_with_logits(logits, g) * w) / float(w.sum())
    return iou, bce


@dataclass
class LossReport:
    total: Tensor
    branches: list[Tensor]
    parts: list[tuple[Tensor, Tensor]]   # (iou, bce) per branch

    def summary(self) -> dict:
        return {
            "total": self.total.item(),
            "branches": [b.item() for b in self.branches],
            "iou": [p[0].item() for p in self.parts],
            "bce": [p[1].item() for p in self.parts],
        }


def total_loss(target, masks: Sequence[Tensor], **kwargs) -> LossReport:
    """Sum over branches of the loss of each mask upsampled to the target size."""
    g = np.asarray(target)
    if g.ndim == 2:
        g = g[None]
    size = g.shape[1:]
    branches, parts = [], []
    total = None
    for m in masks:
        iou, bce = weighted_bce_iou(g, ad.resize_bilinear(m, size), **kwargs)
        loss = iou + bce
        parts.append((iou, bce))
        branches.append(loss)
        total = loss if total is None else total + loss
    return LossReport(total, branches, parts)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricReport:
    dice: float
    miou: float
    mae: float
    mpa: float
    count: int = 1
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def row(self) -> dict:
        return {"Dice": self.dice, "mIoU": self.miou, "MAE": self.mae, "MPA": self.mpa}

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **asdict(self)}, sort_keys=True)


def metrics(pred_prob, target, threshold: float = 0.5) -> MetricReport:
    pred = np.asarray(pred_prob, dtype=np.float64)
    g = np.asarray(target)
    if pred.shape != g.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {g.shape}")
    g = g.astype(bool)
    p = pred >= threshold
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    if tp + fp + fn == 0:
        dice = iou = 1.0
    else:
        dice = 2 * tp / (2 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
    accs = []
    if tp + fn:
        accs.append(tp / (tp + fn))
    if tn + fp:
        accs.append(tn / (tn + fp))
    mpa = sum(accs) / len(accs)
    mae = float(np.abs(pred - g).mean())
    return MetricReport(dice, iou, mae, mpa, 1, tp, fp, fn, tn)


def aggregate(reports: Iterable[MetricReport]) -> MetricReport:
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    n = len(reports)

    def mean(field):
        return math.fsum(getattr(r, field) for r in reports) / n

    return MetricReport(mean("dice"), mean("miou"), mean("mae"), mean("mpa"), n,
                        sum(r.tp for r in reports), sum(r.fp for r in reports),
                        sum(r.fn for r in reports), sum(r.tn for r in reports))


def format_table(rows: dict[str, MetricReport]) -> str:
    """Plain-text table with Dice, mIoU, MAE, MPA columns, one row per entry."""
    name_w = max([len("Method")] + [len(k) for k in rows])
    head = f"{'Method':<{name_w}}  {'Dice':>7}  {'mIoU':>7}  {'MAE':>7}  {'MPA':>7}"
    lines = [head, "-" * len(head)]
    for name, r in rows.items():
        lines.append(f"{name:<{name_w}}  {r.dice:7.4f}  {r.miou:7.4f}  {r.mae:7.4f}  {r.mpa:7.4f}")
    return "\n".join(lines)
