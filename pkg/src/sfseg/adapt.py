"""Client-side source-free adaptation.

The client sees only the vendor model, an optional cPAE and unlabeled target
images.  Each round extracts class-thresholded pseudo-labels from the head with
the lowest average self-entropy, then fine-tunes the last backbone block on
them with an entropy regularizer.  Everything else stays frozen.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .cpae import check_pairing, refine
from .errors import ConfigError
from .metrics import entropy_map, retained_miou
from .soman import GLOBAL, TrainConfig, _param_dtype, head_key, make_sgd, mean_entropy, poly_lr, to_tensor, weighted_ce

log = logging.getLogger(__name__)

SENTINEL_EPS = 1e-6


@dataclass
class AdaptConfig:
    rounds: int = 3
    retain_fraction: float = 0.33
    lambda_ent: float = 0.005
    use_cpae: bool = True
    iters_per_round: int = 50
    batch_size: int = 4
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    seed: int = 0
    # "source": the vendor's class weights; "uniform": unit weights
    class_weighting: str = "uniform"

    def to_dict(self):
        return asdict(self)

    def train_config(self, round_idx):
        return TrainConfig(iters=self.iters_per_round, batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           poly_power=self.poly_power, seed=self.seed * 1009 + round_idx)


@dataclass
class ThresholdVector:
    values: np.ndarray
    retain_fraction: float = 0.33
    counts: np.ndarray | None = None

    def __len__(self):
        return len(self.values)

    def to_dict(self):
        return {"values": [float(v) for v in self.values], "retain_fraction": self.retain_fraction,
                "counts": None if self.counts is None else [int(c) for c in self.counts]}


@dataclass
class PseudoLabelDataset:
    images: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    head: str
    cpae_used: bool
    round: int
    thresholds: ThresholdVector

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self):
        return len(self.thresholds)

    def retained_fraction(self):
        """Per class: retained / predicted pixel count (NaN where nothing was predicted)."""
        c = self.num_classes
        kept = np.bincount(self.labels[self.labels < c].ravel(), minlength=c)
        n = self.thresholds.counts
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, kept / np.maximum(n, 1), np.nan)

    def provenance(self):
        return {"head": self.head, "cpae_used": self.cpae_used, "round": self.round,
                "thresholds": self.thresholds.to_dict(),
                "retained_fraction": [None if np.isnan(v) else float(v) for v in self.retained_fraction()]}


def _images(target):
    imgs = getattr(target, "images", target)
    imgs = np.asarray(imgs)
    if imgs.ndim != 4 or len(imgs) == 0:
        raise ConfigError("target_train", "need a non-empty stack of target images")
    return imgs


# ------------------------------------------------------------ head selection

@torch.no_grad()
def per_image_entropy(model, head, images, batch_size=16):
    """Mean per-pixel self-entropy for each image."""
    images = _images(images)
    out = []
    for s in range(0, len(images), batch_size):
        x = to_tensor(images[s:s + batch_size], _param_dtype(model))
        p = model(x, head).double().numpy()
        out.append(entropy_map(p).mean(axis=(-2, -1)))
    return np.concatenate(out)


def average_self_entropy(model, head, target_train, batch_size=16):
    return float(per_image_entropy(model, head, target_train, batch_size).mean())


def argmin_head(entropies: dict):
    """Lowest entropy wins; ties go to g, then to the lowest head index."""
    def rank(h):
        return (entropies[h], 0 if head_key(h) == GLOBAL else 1, 0 if head_key(h) == GLOBAL else int(h))
    return min(entropies, key=rank)


@torch.no_grad()
def head_entropies(model, target_train, batch_size=16):
    images = _images(target_train)
    sums = {h: 0.0 for h in model.head_ids()}
    for s in range(0, len(images), batch_size):
        x = to_tensor(images[s:s + batch_size], _param_dtype(model))
        f = model.features(x)
        for h in model.head_ids():
            p = torch.softmax(model.head_logits(f, h, x.shape[-2:]).double(), 1).numpy()
            sums[h] += float(entropy_map(p).mean(axis=(-2, -1)).sum())
    return {h: v / len(images) for h, v in sums.items()}


def select_optimal_head(model, target_train, batch_size=16, return_entropies=False):
    ent = head_entropies(model, target_train, batch_size)
    best = argmin_head(ent)
    return (best, ent) if return_entropies else best


# ------------------------------------------------------------ pseudo-labels

def compute_class_thresholds(confidences, retain_fraction=0.33):
    """Per-class threshold at index floor((1 - r) * N) of the ascending sort."""
    if not 0 < retain_fraction <= 1:
        raise ConfigError("retain_fraction", f"must lie in (0, 1], got {retain_fraction}")
    vals, counts = [], []
    for conf in confidences:
        conf = np.sort(np.asarray(conf, dtype=np.float64).ravel())
        n = len(conf)
        counts.append(n)
        if n == 0:
            vals.append(1.0 + SENTINEL_EPS)
            continue
        k = min(int(np.floor((1.0 - retain_fraction) * n)), n - 1)
        vals.append(conf[k])
    return ThresholdVector(np.array(vals, dtype=np.float64), float(retain_fraction), np.array(counts, dtype=np.int64))


@torch.no_grad()
def predict_maps(model, head, images, q=None, batch_size=16):
    """(argmax class, max confidence) per pixel; optionally after one cPAE pass."""
    images = _images(images)
    if q is not None:
        check_pairing(q, model)
    preds, confs = [], []
    dtype = _param_dtype(model)
    model.eval()
    for s in range(0, len(images), batch_size):
        x = to_tensor(images[s:s + batch_size], dtype)
        f = model.features(x)
        logits = model.head_logits(f, head, x.shape[-2:])
        if q is not None:
            prob = torch.softmax(logits, 1).numpy()
            feats = model.heads[GLOBAL].block(f).numpy()
            p = refine(q, prob, feats).astype(np.float64)
        else:
            p = torch.softmax(logits.double(), 1).numpy()
        preds.append(p.argmax(1))
        confs.append(p.max(1))
    return np.concatenate(preds), np.concatenate(confs)


def threshold_maps(pred, conf, thresholds: ThresholdVector):
    c = len(thresholds)
    out = pred.astype(np.int64).copy()
    out[conf < thresholds.values[pred]] = c
    return out


def extract_pseudo_labels(model, head, q, target_train, retain_fraction=0.33, round_idx=1, batch_size=16):
    images = _images(target_train)
    c = model.num_classes
    pred, conf = predict_maps(model, head, images, q, batch_size)
    # pass 1: global per-class confidence pools
    per_class = [conf[pred == k] for k in range(c)]
    t = compute_class_thresholds(per_class, retain_fraction)
    # pass 2: write labels
    labels = threshold_maps(pred, conf, t)
    return PseudoLabelDataset(images, labels, conf, head_key(head), q is not None, round_idx, t)


# ------------------------------------------------------------ self-training

def trainable_block(model):
    return model.backbone[len(model.backbone) - 1]


def self_train_weights(model, class_weighting="uniform"):
    if class_weighting == "source":
        return model.class_weights
    if class_weighting == "uniform":
        return torch.ones_like(model.class_weights)
    raise ConfigError("class_weighting", f"expected 'source' or 'uniform', got {class_weighting!r}")


def self_train_loss(model, head, x, y, lambda_ent, weights=None):
    logits = model.logits(x, head)
    weights = model.class_weights if weights is None else weights
    ce = weighted_ce(torch.log_softmax(logits, 1), y, weights, model.num_classes)
    ent = mean_entropy(logits)
    return ce + lambda_ent * ent, ce, ent


def self_train_round(model, head, plabels: PseudoLabelDataset, cfg: AdaptConfig | None = None, round_idx=1):
    """Fine-tune the last backbone block on pseudo-labels.  Returns the loss log."""
    cfg = cfg or AdaptConfig()
    if len(plabels) == 0:
        raise ConfigError("plabels", "empty pseudo-label set")
    tcfg = cfg.train_config(round_idx)
    block = trainable_block(model)
    flags = [(p, p.requires_grad) for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    for p in block.parameters():
        p.requires_grad_(True)
    opt = make_sgd(block.parameters(), tcfg)
    rng = np.random.default_rng([tcfg.seed % 2**63, 31])
    n, bs = len(plabels), min(tcfg.batch_size, len(plabels))
    order, pos = rng.permutation(n), 0
    dtype = _param_dtype(model)
    weights = self_train_weights(model, cfg.class_weighting)
    hist = []
    try:
        model.train()
        for it in range(tcfg.iters):
            if pos + bs > n:
                order, pos = rng.permutation(n), 0
            idx = np.sort(order[pos:pos + bs])
            pos += bs
            x = to_tensor(plabels.images[idx], dtype)
            y = torch.from_numpy(plabels.labels[idx])
            for g in opt.param_groups:
                g["lr"] = poly_lr(tcfg.lr, it, tcfg.iters, tcfg.poly_power)
            opt.zero_grad(set_to_none=True)
            loss, ce, ent = self_train_loss(model, head, x, y, cfg.lambda_ent, weights)
            loss.backward()
            opt.step()
            hist.append((float(ce.detach()), float(ent.detach())))
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)
        model.eval()
    return hist


# ------------------------------------------------------------ rounds

@dataclass
class RoundReport:
    round: int
    head: str
    avg_entropy: float
    thresholds: list
    retained_fraction: list
    pseudo_miou: float | None = None
    pseudo_miou_unrefined: float | None = None
    ce_start: float | None = None
    ent_start: float | None = None
    ce_end: float | None = None
    ent_end: float | None = None
    head_entropies: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["retained_fraction"] = [None if v is None or np.isnan(v) else float(v) for v in self.retained_fraction]
        return d


def _window(vals, frac=0.1):
    k = max(1, int(len(vals) * frac))
    return float(np.mean(vals[:k])), float(np.mean(vals[-k:]))


def _run_rounds(model, q, target_train, cfg, target_labels, stage):
    images = _images(target_train)
    if cfg.rounds <= 0:
        raise ConfigError("rounds", f"need at least one round, got {cfg.rounds}")
    use_q = q if cfg.use_cpae else None
    model = copy.deepcopy(model)
    model.eval()
    head, ent = select_optimal_head(model, images, return_entropies=True)
    head = head_key(head)
    reports = []
    for r in range(1, cfg.rounds + 1):
        pl = extract_pseudo_labels(model, head, use_q, images, cfg.retain_fraction, r)
        rep = RoundReport(r, head, average_self_entropy(model, head, images),
                          [float(v) for v in pl.thresholds.values], list(pl.retained_fraction()),
                          head_entropies={str(k): float(v) for k, v in ent.items()} if r == 1 else {})
        if target_labels is not None:
            rep.pseudo_miou = retained_miou(pl.labels, target_labels, model.num_classes)
            if use_q is not None:
                raw = extract_pseudo_labels(model, head, None, images, cfg.retain_fraction, r)
                rep.pseudo_miou_unrefined = retained_miou(raw.labels, target_labels, model.num_classes)
        hist = self_train_round(model, head, pl, cfg, r)
        ce = [h[0] for h in hist]
        en = [h[1] for h in hist]
        rep.ce_start, rep.ce_end = _window(ce)
        rep.ent_start, rep.ent_end = _window(en)
        log.info("%s round %d head %s: pseudo mIoU %s, CE %.3f -> %.3f", stage, r, head, rep.pseudo_miou,
                 rep.ce_start, rep.ce_end)
        reports.append(rep)
    model.lineage.append({"stage": stage, "head": head, "rounds": cfg.rounds, "use_cpae": use_q is not None,
                          "num_images": int(len(images))})
    return model, reports


def adapt(model, q, target_train, rounds=None, cfg: AdaptConfig | None = None, target_labels=None):
    """Adapt a copy of ``model`` to ``target_train``; returns (model, per-round reports).

    ``target_labels`` is optional and only used to score pseudo-labels.
    """
    cfg = copy.copy(cfg or AdaptConfig())
    if rounds is not None:
        cfg.rounds = rounds
    return _run_rounds(model, q, target_train, cfg, target_labels, "adapt")


def adapt_online(model, q, new_target_train, rounds=None, cfg: AdaptConfig | None = None, target_labels=None):
    """Re-run the client procedure from an already adapted model (head selection included)."""
    cfg = copy.copy(cfg or AdaptConfig())
    if rounds is not None:
        cfg.rounds = rounds
    return _run_rounds(model, q, new_target_train, cfg, target_labels, "adapt-online")


def inference_head(model):
    """Head chosen by the most recent adaptation stage, else the global head."""
    for entry in reversed(model.lineage):
        if "head" in entry:
            return entry["head"]
    return GLOBAL


def frozen_diff(before: dict, after: dict, trainable_prefix: str):
    """Names of arrays outside ``trainable_prefix`` that changed."""
    return [k for k in before if not k.startswith(trainable_prefix) and not torch.equal(before[k], after[k])]
