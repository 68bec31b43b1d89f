"""Multi-head segmentation network and vendor-side training.

A shared convolutional backbone feeds a global head ``g`` and ``K``
leave-one-out heads.  Under LOpp routing every step draws one augmentation
group ``i1``, trains ``g`` and every head except ``i1`` on the augmented
batch, and leaves head ``i1`` untouched.  DEpp trains ``g`` plus head ``i1``
only; ERM trains ``g`` alone.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import apply_ag_batch
from .errors import ConfigError
from .synthdata import derive_seed

log = logging.getLogger(__name__)

ROUTINGS = ("ERM", "DEpp", "LOpp")
GLOBAL = "g"


@dataclass(frozen=True)
class Architecture:
    widths: tuple = (16, 32, 48, 48)
    strides: tuple = (1, 2, 2, 1)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ConfigError("architecture", "widths and strides must be non-empty and equally long")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    def to_dict(self):
        return {"widths": list(self.widths), "strides": list(self.strides), "in_channels": self.in_channels}


def conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=False),
        nn.Conv2d(cout, cout, 3, 1, 1), nn.ReLU(inplace=False),
    )


class Head(nn.Module):
    def __init__(self, channels, num_classes):
        super().__init__()
        self.block = conv_block(channels, channels, 1)
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, f):
        return self.classifier(self.block(f))


def _he_init(module, gen):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()


def head_key(head) -> str:
    return GLOBAL if head in (GLOBAL, None) else str(int(head))


class SomanModel(nn.Module):
    def __init__(self, num_classes, K=0, routing="ERM", ag_ids=(), arch=None, class_weights=None, seed=0):
        super().__init__()
        arch = arch or Architecture()
        if routing not in ROUTINGS:
            raise ConfigError("routing", f"expected one of {ROUTINGS}, got {routing!r}")
        ag_ids = [int(a) for a in ag_ids]
        if len(ag_ids) != K or len(set(ag_ids)) != K:
            raise ConfigError("ag_ids", f"need {K} distinct ids, got {ag_ids}")
        if K == 0 and routing != "ERM":
            raise ConfigError("routing", "a single-head model must use ERM routing")
        self.num_classes = int(num_classes)
        self.K = int(K)
        self.routing = routing
        self.ag_ids = ag_ids
        self.arch = arch
        self.lineage = []
        blocks, cin = [], arch.in_channels
        for w, s in zip(arch.widths, arch.strides):
            blocks.append(conv_block(cin, w, s))
            cin = w
        self.backbone = nn.ModuleList(blocks)
        self.heads = nn.ModuleDict({GLOBAL: Head(cin, num_classes)})
        for i in range(1, K + 1):
            self.heads[str(i)] = Head(cin, num_classes)
        cw = torch.ones(num_classes) if class_weights is None else torch.as_tensor(class_weights, dtype=torch.float32)
        self.register_buffer("class_weights", cw.clone())
        gen = torch.Generator().manual_seed(int(seed))
        _he_init(self, gen)

    # -- structure
    def head_ids(self):
        return [GLOBAL] + list(range(1, self.K + 1))

    def head(self, head) -> Head:
        key = head_key(head)
        if key not in self.heads:
            raise ConfigError("head", f"unknown head {head!r}; model has {self.head_ids()}")
        return self.heads[key]

    def metadata(self):
        return {
            "num_classes": self.num_classes, "K": self.K, "routing": self.routing,
            "ag_ids": list(self.ag_ids), "architecture": self.arch.to_dict(),
            "class_weights": [float(v) for v in self.class_weights],
            "lineage": list(self.lineage),
        }

    @classmethod
    def from_metadata(cls, meta):
        model = cls(meta["num_classes"], meta["K"], meta["routing"], meta["ag_ids"],
                    Architecture(**meta["architecture"]), meta["class_weights"])
        model.lineage = list(meta.get("lineage", []))
        return model

    def feature_shape(self, image_hw):
        h, w = image_hw
        ds = self.arch.downsample
        return (self.arch.feature_channels, -(-h // ds), -(-w // ds))

    # -- computation
    def features(self, x):
        for block in self.backbone:
            x = block(x)
        return x

    def head_logits(self, feats, head, size):
        out = self.head(head)(feats)
        return F.interpolate(out, size=size, mode="bilinear", align_corners=False)

    def logits(self, x, head=GLOBAL):
        return self.head_logits(self.features(x), head, x.shape[-2:])

    def generic_features(self, x):
        """Backbone plus the first block of the global head."""
        return self.heads[GLOBAL].block(self.features(x))

    def forward(self, x, head=GLOBAL):
        return torch.softmax(self.logits(x, head), dim=1)

    def param_snapshot(self):
        return {k: v.detach().clone() for k, v in self.state_dict().items()}


# ------------------------------------------------------------ numpy-facing API

def to_tensor(images, dtype=torch.float32):
    """(H,W,3) or (N,H,W,3) numpy images -> (N,3,H,W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def _param_dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def forward(model, images, head=GLOBAL, batch_size=16):
    """Probability maps as numpy: (C,H,W) for one image, (N,C,H,W) for a stack."""
    single = np.asarray(images).ndim == 3
    model.head(head)
    out = []
    arr = np.asarray(images)[None] if single else np.asarray(images)
    for s in range(0, len(arr), batch_size):
        x = to_tensor(arr[s:s + batch_size], _param_dtype(model))
        out.append(model(x, head).numpy())
    probs = np.concatenate(out)
    return probs[0] if single else probs


@torch.no_grad()
def forward_all_heads(model, images, batch_size=16):
    """Dict head -> (N,C,H,W) probabilities, sharing one backbone pass."""
    arr = np.asarray(images)
    res = {h: [] for h in model.head_ids()}
    for s in range(0, len(arr), batch_size):
        x = to_tensor(arr[s:s + batch_size], _param_dtype(model))
        f = model.features(x)
        for h in model.head_ids():
            res[h].append(torch.softmax(model.head_logits(f, h, x.shape[-2:]), 1).numpy())
    return {h: np.concatenate(v) for h, v in res.items()}


@torch.no_grad()
def forward_features(model, images, batch_size=16):
    single = np.asarray(images).ndim == 3
    arr = np.asarray(images)[None] if single else np.asarray(images)
    out = [model.generic_features(to_tensor(arr[s:s + batch_size], _param_dtype(model))).numpy()
           for s in range(0, len(arr), batch_size)]
    feats = np.concatenate(out)
    return feats[0] if single else feats


# ------------------------------------------------------------ losses

def weighted_ce(log_probs, target, weights, ignore_index):
    """Class-weighted cross-entropy averaged over counted pixels.

    Pixels labelled ``ignore_index`` contribute nothing; an all-ignored batch
    gives exactly 0.
    """
    valid = target != ignore_index
    safe = torch.where(valid, target, torch.zeros_like(target))
    picked = log_probs.gather(1, safe.unsqueeze(1)).squeeze(1)
    w = weights.to(log_probs.dtype)[safe] * valid.to(log_probs.dtype)
    denom = w.sum()
    if denom.item() == 0:
        return (picked * 0.0).sum()
    return -(w * picked).sum() / denom


def mean_entropy(logits):
    logp = torch.log_softmax(logits, dim=1)
    return -(logp.exp() * logp).sum(1).mean()


def routed_heads(model, draw):
    """Heads that receive a loss when augmentation group ``draw`` is active."""
    if model.routing == "ERM" or model.K == 0:
        return [GLOBAL]
    if model.routing == "DEpp":
        return [GLOBAL, int(draw)]
    return [GLOBAL] + [i for i in range(1, model.K + 1) if i != int(draw)]


def composite_loss(model, x, y, draw=None, return_terms=False):
    """Sum of class-weighted CE terms for the heads routed under ``draw``."""
    feats = model.features(x)
    terms = {}
    for h in routed_heads(model, draw):
        logits = model.head_logits(feats, h, x.shape[-2:])
        terms[h] = weighted_ce(torch.log_softmax(logits, 1), y, model.class_weights, model.num_classes)
    total = sum(terms.values())
    return (total, terms) if return_terms else total


def class_weights_from_labels(labels, num_classes):
    """Inverse square-root pixel frequency, normalised to mean 1 over present classes."""
    labels = np.asarray(labels)
    counts = np.bincount(labels[labels < num_classes].ravel(), minlength=num_classes).astype(np.float64)
    freq = counts / max(counts.sum(), 1)
    w = np.where(freq > 0, 1.0 / np.sqrt(np.maximum(freq, 1e-12)), 0.0)
    present = freq > 0
    if present.any():
        w[present] /= w[present].mean()
    return w.astype(np.float32)


# ------------------------------------------------------------ training

@dataclass
class TrainConfig:
    iters: int = 1500
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    seed: int = 0
    eval_every: int = 0

    def to_dict(self):
        return asdict(self)


def make_sgd(params, cfg: TrainConfig):
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def poly_lr(base, it, max_iter, power):
    return base * (1.0 - it / max(max_iter, 1)) ** power


class VendorTrainer:
    """Holds one optimizer for the backbone and one per head."""

    def __init__(self, model: SomanModel, ags=(), cfg: TrainConfig | None = None):
        self.model = model
        self.cfg = cfg or TrainConfig()
        self.ags = list(ags)
        if model.K and [a.id for a in self.ags] != model.ag_ids:
            raise ConfigError("ags", f"augmentation ids {[a.id for a in self.ags]} do not match heads {model.ag_ids}")
        self.opt_backbone = make_sgd(model.backbone.parameters(), self.cfg)
        self.opt_heads = {h: make_sgd(model.head(h).parameters(), self.cfg) for h in model.head_ids()}
        self.it = 0

    def _set_lr(self):
        lr = poly_lr(self.cfg.lr, self.it, self.cfg.iters, self.cfg.poly_power)
        for opt in [self.opt_backbone, *self.opt_heads.values()]:
            for g in opt.param_groups:
                g["lr"] = lr

    def draw(self, step_seed):
        """Index (1-based) of the augmentation group used this step, or None."""
        if not self.ags:
            return None
        rng = np.random.default_rng([step_seed % 2**63, 11])
        return int(rng.integers(1, len(self.ags) + 1))

    def step(self, images, labels, step_seed, draw=None):
        if len(images) == 0:
            raise ConfigError("batch", "empty batch")
        model = self.model
        if draw is None:
            draw = self.draw(step_seed)
        if draw is not None:
            ag = self.ags[draw - 1]
            images, labels = apply_ag_batch(ag, images, labels, derive_seed(step_seed, 1), model.num_classes)
        x = to_tensor(images, _param_dtype(model))
        y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
        model.train()
        self._set_lr()
        for opt in [self.opt_backbone, *self.opt_heads.values()]:
            opt.zero_grad(set_to_none=True)
        total, terms = composite_loss(model, x, y, draw, return_terms=True)
        total.backward()
        self.opt_backbone.step()
        for h in terms:
            self.opt_heads[h].step()
        self.it += 1
        return {"step": self.it, "draw": draw, "losses": {str(h): float(v.detach()) for h, v in terms.items()}}


def init_from_baseline(model: SomanModel, baseline: SomanModel):
    """Copy the baseline backbone into ``model`` and its head into every head."""
    model.backbone.load_state_dict(baseline.backbone.state_dict())
    src = baseline.heads[GLOBAL].state_dict()
    for h in model.head_ids():
        model.head(h).load_state_dict(src)
    return model


def vendor_train(model, source, iters, cfg: TrainConfig | None = None, ags=(), val=None, eval_fn=None,
                 on_step=None):
    """Run ``iters`` vendor steps over shuffled mini-batches of ``source``.

    ``source`` is a synthdata.Dataset with labels.  Returns the per-step loss
    records and any periodic validation results.
    """
    cfg = copy.copy(cfg or TrainConfig())
    if iters <= 0:
        raise ConfigError("iters", f"must be positive, got {iters}")
    if source.labels is None or len(source) == 0:
        raise ConfigError("source_train", "empty or unlabeled dataset")
    cfg.iters = iters
    trainer = VendorTrainer(model, ags, cfg)
    rng = np.random.default_rng([cfg.seed % 2**63, 5])
    order, pos = rng.permutation(len(source)), 0
    records, evals = [], []
    for it in range(iters):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(source)), 0
        idx = np.sort(order[pos:pos + cfg.batch_size])
        pos += cfg.batch_size
        rec = trainer.step(source.images[idx], source.labels[idx], derive_seed(cfg.seed, it))
        records.append(rec)
        if on_step is not None:
            on_step(trainer, rec)
        if cfg.eval_every and eval_fn is not None and (it + 1) % cfg.eval_every == 0:
            evals.append({"step": it + 1, **eval_fn(model)})
            log.info("step %d: %s", it + 1, evals[-1])
    model.eval()
    return records, evals


def loss_curves(records):
    curves = {}
    for r in records:
        for h, v in r["losses"].items():
            curves.setdefault(h, []).append((r["step"], v))
    return curves
