"""Augmentation-group admission by risk gap on a single-source baseline.

A candidate is admitted when the baseline's mIoU drop on the candidate-augmented
validation set exceeds ``tau`` (risk taken as 1 - mIoU).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .augment import apply_ag_batch
from .errors import ConfigError
from .metrics import aggregate
from .soman import SomanModel, TrainConfig, class_weights_from_labels, forward, vendor_train

DEFAULT_TAU = 0.25


def train_baseline(source_train, cfg: TrainConfig | None = None, arch=None, num_classes=None):
    """Single-head model trained on unaugmented source data."""
    cfg = cfg or TrainConfig()
    if source_train.labels is None or len(source_train) == 0:
        raise ConfigError("source_train", "empty or unlabeled dataset")
    c = num_classes or source_train.spec.num_classes
    model = SomanModel(c, 0, "ERM", (), arch, class_weights_from_labels(source_train.labels, c), seed=cfg.seed)
    if cfg.iters > 0:
        vendor_train(model, source_train, cfg.iters, cfg)
    model.eval()
    return model


def dataset_miou(model, images, labels, head="g", num_classes=None):
    c = num_classes or model.num_classes
    pred = forward(model, images, head).argmax(1)
    return aggregate(zip(pred, labels), c).miou


def augmented_val(ag, source_val, seed):
    return apply_ag_batch(ag, source_val.images, source_val.labels, seed, source_val.spec.num_classes
                          if source_val.spec else int(source_val.labels.max()) + 1)


def risk_gap(baseline, ag, source_val, seed=0, clean_miou=None):
    if clean_miou is None:
        clean_miou = dataset_miou(baseline, source_val.images, source_val.labels)
    imgs, labs = augmented_val(ag, source_val, seed)
    return clean_miou - dataset_miou(baseline, imgs, labs)


@dataclass
class CandidateResult:
    ag_id: int
    name: str
    clean_miou: float
    augmented_miou: float
    risk_gap: float
    selected: bool


@dataclass
class SelectionReport:
    tau: float
    candidates: list = field(default_factory=list)
    diversity_order: list = field(default_factory=list)

    @property
    def selected_ids(self):
        """Admitted ids in diversity order."""
        sel = {c.ag_id for c in self.candidates if c.selected}
        return [i for i in self.diversity_order if i in sel]

    def to_dict(self):
        return {"tau": self.tau, "diversity_order": list(self.diversity_order),
                "candidates": [vars(c) for c in self.candidates]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["tau"], [CandidateResult(**c) for c in d["candidates"]], list(d["diversity_order"]))

    def to_table(self):
        lines = [f"tau = {self.tau:.3f}",
                 f"{'id':>3} {'name':<10} {'clean':>7} {'augm.':>7} {'gap':>7}  selected"]
        for c in sorted(self.candidates, key=lambda c: self.diversity_order.index(c.ag_id)):
            lines.append(f"{c.ag_id:>3} {c.name:<10} {c.clean_miou:7.4f} {c.augmented_miou:7.4f} "
                         f"{c.risk_gap:7.4f}  {'yes' if c.selected else 'no'}")
        return "\n".join(lines) + "\n"


def decide(gaps: dict, tau: float):
    """Apply the threshold rule to precomputed gaps {ag_id: gap}."""
    order = sorted(gaps, key=lambda i: (-gaps[i], i))
    return {i: gaps[i] > tau for i in gaps}, order


def select_augmentations(baseline, candidates, source_val, tau=DEFAULT_TAU, seed=0):
    if not candidates:
        raise ConfigError("candidates", "need at least one candidate")
    clean = dataset_miou(baseline, source_val.images, source_val.labels)
    rows = {}
    for ag in candidates:
        imgs, labs = augmented_val(ag, source_val, seed)
        aug = dataset_miou(baseline, imgs, labs)
        rows[ag.id] = (ag, aug, clean - aug)
    chosen, order = decide({i: r[2] for i, r in rows.items()}, tau)
    results = [CandidateResult(i, ag.name, float(clean), float(aug), float(gap), bool(chosen[i]))
               for i, (ag, aug, gap) in rows.items()]
    return SelectionReport(float(tau), results, order)


def bind_heads(report: SelectionReport, candidates, max_k=5):
    """Admitted groups in diversity order, capped at ``max_k``."""
    by_id = {a.id: a for a in candidates}
    return [by_id[i] for i in report.selected_ids[:max_k]]
