"""Conditional prior-enforcing autoencoder over segmentation probability maps.

The encoder downsamples a soft C-channel map to the backbone's feature
resolution, concatenates the generic features (backbone + first block of the
global head), fuses them with four parallel dilated convolutions (dilation
2/4/8/16, summed) and a 1x1 tanh bottleneck, then decodes back to C channels.
It is trained as a denoiser: inputs are the leave-one-out head's predictions on
images augmented with the very group that head never saw.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import apply_ag, apply_ag_batch
from .errors import ConfigError, ShapeError
from .soman import TrainConfig, make_sgd, poly_lr, to_tensor, weighted_ce
from .synthdata import derive_seed

DILATIONS = (2, 4, 8, 16)


def _conv(cin, cout, k, stride=1, act="prelu"):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2), nn.BatchNorm2d(cout)]
    layers.append(nn.PReLU(cout) if act == "prelu" else nn.ReLU())
    return nn.Sequential(*layers)


def _tconv(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 3, 2, 1, output_padding=1), nn.BatchNorm2d(cout), nn.PReLU(cout))


@dataclass(frozen=True)
class CpaeSpec:
    num_classes: int
    feature_channels: int
    downsample: int = 4
    width: int = 8

    @property
    def n_down(self):
        n = int(round(np.log2(self.downsample)))
        if 2 ** n != self.downsample or n < 1:
            raise ConfigError("downsample", f"must be a power of two >= 2, got {self.downsample}")
        return n

    def to_dict(self):
        return {"num_classes": self.num_classes, "feature_channels": self.feature_channels,
                "downsample": self.downsample, "width": self.width}


class CpaeModel(nn.Module):
    def __init__(self, spec: CpaeSpec, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.spec = spec
        w, c = spec.width, spec.num_classes
        enc = [_conv(c, w, 7)]
        ch = w
        for k in range(spec.n_down):
            nxt = w * 2 ** (k + 1)
            enc.append(_conv(ch, nxt, 3, 2))
            if k < spec.n_down - 1:
                enc.append(_conv(nxt, nxt, 7))
            ch = nxt
        self.encoder = nn.Sequential(*enc)
        fused_in = ch + spec.feature_channels
        bott = 2 * ch
        self.dilated = nn.ModuleList([nn.Conv2d(fused_in, bott, 3, 1, d, dilation=d) for d in DILATIONS])
        self.bottleneck = nn.Conv2d(bott, bott, 1)
        dec = [_conv(bott, bott, 3, act="relu"), _conv(bott, bott, 3), _conv(bott, ch, 7)]
        for _ in range(spec.n_down - 1):
            dec += [_tconv(ch, ch), _conv(ch, ch // 2, 7)]
            ch //= 2
        dec.append(nn.Conv2d(ch, c, 7, 1, 3))
        self.decoder = nn.Sequential(*dec)

    def logits(self, prob, feats):
        e = self.encoder(prob)
        if e.shape[-2:] != feats.shape[-2:]:
            raise ShapeError(f"encoded map {tuple(e.shape[-2:])} vs features {tuple(feats.shape[-2:])}")
        z = torch.cat([e, feats], dim=1)
        z = torch.tanh(self.bottleneck(sum(conv(z) for conv in self.dilated)))
        out = self.decoder(z)
        return F.interpolate(out, size=prob.shape[-2:], mode="bilinear", align_corners=False)

    def forward(self, prob, feats):
        return torch.softmax(self.logits(prob, feats), dim=1)

    def metadata(self):
        return {"spec": self.spec.to_dict()}

    @classmethod
    def from_metadata(cls, meta):
        return cls(CpaeSpec(**meta["spec"]))


def for_soman(soman, width=8, seed=0):
    return CpaeModel(CpaeSpec(soman.num_classes, soman.arch.feature_channels, soman.arch.downsample, width), seed)


def check_pairing(q: CpaeModel, soman):
    if (q.spec.feature_channels, q.spec.downsample, q.spec.num_classes) != (
            soman.arch.feature_channels, soman.arch.downsample, soman.num_classes):
        raise ShapeError(f"cPAE expects features {q.spec.feature_channels}ch/{q.spec.downsample}x for "
                         f"{q.spec.num_classes} classes; segmentation model provides "
                         f"{soman.arch.feature_channels}ch/{soman.arch.downsample}x for {soman.num_classes}")


@torch.no_grad()
def cpae_forward(q: CpaeModel, noisy, features):
    """Numpy in, numpy out. Accepts a single map (C,H,W) or a stack."""
    noisy = np.asarray(noisy)
    features = np.asarray(features)
    single = noisy.ndim == 3
    if single:
        noisy, features = noisy[None], features[None]
    if noisy.shape[1] != q.spec.num_classes or features.shape[1] != q.spec.feature_channels:
        raise ShapeError(f"got map {noisy.shape} / features {features.shape} for {q.spec}")
    q.eval()
    dtype = next(q.parameters()).dtype
    out = q(torch.from_numpy(noisy).to(dtype), torch.from_numpy(features).to(dtype)).numpy()
    return out[0] if single else out


def refine(q, prob, features):
    """Single pass through the autoencoder; never iterated."""
    return cpae_forward(q, prob, features)


def _require_lo(soman):
    if soman.routing != "LOpp":
        raise ConfigError("routing", f"noisy pairs need a leave-one-out model, got {soman.routing}")




@torch.no_grad()
def make_noisy_pair(soman, image, segmap, rng_seed, ags):
    """(noisy probs, generic features, clean labels, head index) for one sample."""
    _require_lo(soman)
    rng = np.random.default_rng([rng_seed % 2**63, 13])
    i = int(rng.integers(1, soman.K + 1))
    aug, _ = apply_ag(ags[i - 1], image, segmap, derive_seed(rng_seed, 1), num_classes=soman.num_classes)
    x = to_tensor(aug)
    soman.eval()
    f = soman.features(x)
    noisy = torch.softmax(soman.head_logits(f, i, x.shape[-2:]), 1)[0].numpy()
    feats = soman.heads["g"].block(f)[0].numpy()
    return noisy, feats, np.asarray(segmap).copy(), i


def cpae_train(q, soman, source_train, iters, cfg: TrainConfig | None = None, ags=(), on_step=None):
    """Denoising training on leave-one-out predictions; the segmentation model stays frozen."""
    _require_lo(soman)
    check_pairing(q, soman)
    cfg = copy.copy(cfg or TrainConfig())
    cfg.iters = iters
    if [a.id for a in ags] != soman.ag_ids:
        raise ConfigError("ags", "augmentation groups must match the model's heads")
    soman.eval()
    flags = [p.requires_grad for p in soman.parameters()]
    for p in soman.parameters():
        p.requires_grad_(False)
    opt = make_sgd(q.parameters(), cfg)
    rng = np.random.default_rng([cfg.seed % 2**63, 21])
    losses = []
    try:
        q.train()
        for it in range(iters):
            idx = np.sort(rng.choice(len(source_train), cfg.batch_size, replace=False))
            i = int(rng.integers(1, soman.K + 1))
            imgs, labs = apply_ag_batch(ags[i - 1], source_train.images[idx], source_train.labels[idx],
                                        derive_seed(cfg.seed, it), soman.num_classes)
            x = to_tensor(imgs)
            y = torch.from_numpy(np.asarray(labs, dtype=np.int64))
            with torch.no_grad():
                f = soman.features(x)
                noisy = torch.softmax(soman.head_logits(f, i, x.shape[-2:]), 1)
                feats = soman.heads["g"].block(f)
            for g in opt.param_groups:
                g["lr"] = poly_lr(cfg.lr, it, iters, cfg.poly_power)
            opt.zero_grad(set_to_none=True)
            out = q.logits(noisy, feats)
            loss = weighted_ce(torch.log_softmax(out, 1), y, soman.class_weights, soman.num_classes)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            if on_step is not None:
                on_step(it, losses[-1])
    finally:
        for p, flag in zip(soman.parameters(), flags):
            p.requires_grad_(flag)
        q.eval()
    return losses
