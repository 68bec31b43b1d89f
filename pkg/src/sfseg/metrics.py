"""Segmentation metrics over a pooled confusion matrix.

The confusion matrix has C rows (ground truth) and C + 1 columns (prediction,
last column = UNKNOWN).  Ground-truth UNKNOWN pixels are dropped before
counting; predicted UNKNOWN pixels count against the true class.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

CSV_HEADER = ["row", "class_id", "name", "value"]


def confusion(pred, gt, num_classes):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    keep = (gt >= 0) & (gt < num_classes)
    p = np.clip(pred[keep], 0, num_classes)
    idx = gt[keep].astype(np.int64) * (num_classes + 1) + p.astype(np.int64)
    return np.bincount(idx, minlength=num_classes * (num_classes + 1)).reshape(num_classes, num_classes + 1)


def iou_from_confusion(cm):
    c = cm.shape[0]
    inter = np.diag(cm[:, :c]).astype(np.float64)
    union = cm.sum(axis=1) + cm[:, :c].sum(axis=0) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    return iou


def per_class_iou(pred, gt, num_classes):
    return iou_from_confusion(confusion(pred, gt, num_classes))


def entropy_map(prob):
    """Per-pixel Shannon entropy (nats) of a (C, H, W) or (N, C, H, W) map."""
    p = np.asarray(prob, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-3)


def group_miou(per_class, groups: dict, num_classes=None):
    per_class = np.asarray(per_class, dtype=np.float64)
    c = len(per_class) if num_classes is None else num_classes
    out = {}
    for name, members in groups.items():
        bad = [m for m in members if not 0 <= m < c]
        if bad:
            raise ConfigError(f"groups.{name}", f"class id {bad[0]} outside [0, {c})")
        vals = per_class[list(members)]
        vals = vals[~np.isnan(vals)]
        out[name] = float(vals.mean()) if len(vals) else float("nan")
    return out


@dataclass
class MetricsReport:
    per_class_iou: list
    miou: float
    group_mious: dict = field(default_factory=dict)
    avg_entropy: float = float("nan")
    pixel_accuracy: float = float("nan")
    counted_pixels: int = 0
    class_names: list | None = None

    @property
    def risk(self):
        """Empirical target risk, 1 - mIoU."""
        return 1.0 - self.miou

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and np.isnan(v) else v
        return {
            "per_class_iou": [clean(float(v)) for v in self.per_class_iou],
            "miou": clean(float(self.miou)),
            "group_mious": {k: clean(float(v)) for k, v in self.group_mious.items()},
            "avg_entropy": clean(float(self.avg_entropy)),
            "pixel_accuracy": clean(float(self.pixel_accuracy)),
            "counted_pixels": int(self.counted_pixels),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_rows(self, prefix=""):
        d = self.to_dict()
        names = self.class_names or [f"class_{i}" for i in range(len(self.per_class_iou))]
        rows = []
        for i, v in enumerate(d["per_class_iou"]):
            rows.append([f"{prefix}iou", i, names[i], _fmt(v)])
        for k, v in d["group_mious"].items():
            rows.append([f"{prefix}group_miou", "", k, _fmt(v)])
        for k in ("miou", "pixel_accuracy", "avg_entropy", "counted_pixels"):
            rows.append([f"{prefix}summary", "", k, _fmt(d[k])])
        return rows

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.csv_rows())
        return buf.getvalue()


def _fmt(v):
    # repr round-trips floats exactly; empty cell stands for NaN
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def report_from_confusion(cm, groups=None, avg_entropy=float("nan"), class_names=None):
    iou = iou_from_confusion(cm)
    c = cm.shape[0]
    total = int(cm.sum())
    # classes absent from the ground truth do not enter the means
    present = cm.sum(axis=1) > 0
    miou = float(np.mean(iou[present])) if present.any() else float("nan")
    acc = float(np.trace(cm[:, :c]) / total) if total else float("nan")
    gm = group_miou(np.where(present, iou, np.nan), groups, c) if groups else {}
    return MetricsReport(list(iou), miou, gm, avg_entropy, acc, total, class_names)


def aggregate(pairs, num_classes, groups=None, avg_entropy=float("nan"), class_names=None):
    """Pool confusion counts over (pred, gt) pairs, then compute IoUs."""
    cm = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    for pred, gt in pairs:
        cm += confusion(pred, gt, num_classes)
    return report_from_confusion(cm, groups, avg_entropy, class_names)


def mean_per_image_iou(pairs, num_classes):
    """Average of per-image mIoUs (reference only; not the benchmark convention)."""
    vals = []
    for pred, gt in pairs:
        iou = per_class_iou(pred, gt, num_classes)
        if np.any(~np.isnan(iou)):
            vals.append(np.nanmean(iou))
    return float(np.mean(vals))


def retained_miou(pseudo, gt, num_classes):
    """mIoU of pseudo-labels restricted to pixels that were not set UNKNOWN."""
    pseudo = np.asarray(pseudo)
    gt = np.asarray(gt).copy()
    gt[pseudo >= num_classes] = num_classes
    return report_from_confusion(confusion(pseudo, gt, num_classes)).miou
