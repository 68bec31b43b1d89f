"""Inference utilities and dataset-level evaluation."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .cpae import check_pairing, refine
from .errors import ConfigError
from .metrics import aggregate, confusion, entropy_map, report_from_confusion
from .soman import GLOBAL, _param_dtype, to_tensor
from .synthdata import DEFAULT_GROUPS

DEFAULT_SCALES = (0.75, 1.0, 1.25)


def _resize(t, size):
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)


@torch.no_grad()
def multiscale_infer(model, head, images, scales=DEFAULT_SCALES, q=None, batch_size=16):
    """Average of per-scale probability maps, resized back and renormalised.

    With ``q`` each per-scale map goes through one cPAE pass first.
    """
    if not len(scales):
        raise ConfigError("scales", "need at least one scale")
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if q is not None:
        check_pairing(q, model)
    model.head(head)
    model.eval()
    dtype = _param_dtype(model)
    h, w = arr.shape[1:3]
    ds = model.arch.downsample
    out = []
    for s in range(0, len(arr), batch_size):
        x = to_tensor(arr[s:s + batch_size], dtype)
        acc = torch.zeros((len(x), model.num_classes, h, w), dtype=torch.float64)
        for sc in scales:
            if sc == 1.0:
                xs = x
            else:
                # keep sizes divisible by the downsampling factor so the cPAE pairs up
                size = (max(ds, int(round(h * sc / ds)) * ds), max(ds, int(round(w * sc / ds)) * ds))
                xs = _resize(x, size)
            f = model.features(xs)
            p = torch.softmax(model.head_logits(f, head, xs.shape[-2:]), 1)
            if q is not None:
                p = torch.from_numpy(refine(q, p.numpy(), model.heads[GLOBAL].block(f).numpy()))
            if p.shape[-2:] != (h, w):
                p = _resize(p, (h, w))
            acc += p.double()
        acc /= acc.sum(1, keepdim=True)
        out.append(acc.numpy())
    probs = np.concatenate(out)
    return probs[0] if single else probs


def evaluate_model(model, images, labels, head=GLOBAL, scales=(1.0,), q=None, groups=None, class_names=None,
                   batch_size=16):
    """MetricsReport over a labelled set; also records mean self-entropy."""
    c = model.num_classes
    cm = np.zeros((c, c + 1), dtype=np.int64)
    ent = []
    for s in range(0, len(images), batch_size):
        p = multiscale_infer(model, head, images[s:s + batch_size], scales, q)
        cm += confusion(p.argmax(1), labels[s:s + batch_size], c)
        ent.append(entropy_map(p).mean(axis=(-2, -1)))
    groups = DEFAULT_GROUPS if groups is None and c == 8 else groups
    return report_from_confusion(cm, groups, float(np.concatenate(ent).mean()), class_names)


def head_matrix(model, targets: dict, scales=(1.0,)):
    """{target name: {head: mIoU}} for every head of the model."""
    return {name: {str(h): evaluate_model(model, imgs, labs, h, scales).miou for h in model.head_ids()}
            for name, (imgs, labs) in targets.items()}


def prediction_miou(pred, labels, num_classes):
    return aggregate(zip(pred, labels), num_classes).miou
