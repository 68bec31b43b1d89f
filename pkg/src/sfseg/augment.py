"""Class-preserving, domain-varying augmentation groups.

Five strong groups (Fourier amplitude swap, random color stylization,
moment-matching style transfer, weather overlay, cartoonization) and four weak
candidates (box blur, small rotation, additive noise, bilateral smoothing).
Every transform maps an HxWx3 float image in [0, 1] to the same range.
Only WEAK_ROTATE touches the label raster.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ShapeError

EPS = 1e-6


class AGKind(str, Enum):
    FDA = "FDA"
    STAT_STYLE = "STAT_STYLE"
    RANDOM_STYLE = "RANDOM_STYLE"
    WEATHER = "WEATHER"
    CARTOON = "CARTOON"
    WEAK_BLUR = "WEAK_BLUR"
    WEAK_ROTATE = "WEAK_ROTATE"
    WEAK_NOISE = "WEAK_NOISE"
    WEAK_BILATERAL = "WEAK_BILATERAL"


@dataclass(frozen=True)
class AugmentationGroup:
    id: int
    name: str
    kind: AGKind
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", AGKind(self.kind))
        except ValueError:
            raise ConfigError("kind", f"unknown augmentation kind {self.kind!r}") from None

    @property
    def geometric(self) -> bool:
        return self.kind == AGKind.WEAK_ROTATE

    def to_dict(self):
        return {"id": self.id, "name": self.name, "kind": self.kind.value,
                "params": dict(self.params), "geometric": self.geometric}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("geometric", None)
        unknown = set(d) - {"id", "name", "kind", "params"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown augmentation field")
        return cls(id=int(d["id"]), name=d["name"], kind=d["kind"], params=dict(d.get("params", {})))


def default_candidates():
    """Strong groups A-E (ids 1-5) and weak candidates W1-W4 (ids 6-9)."""
    return [
        AugmentationGroup(1, "A", AGKind.FDA, {"beta": 0.09, "noise_ref_prob": 0.5}),
        AugmentationGroup(2, "B", AGKind.RANDOM_STYLE, {}),
        AugmentationGroup(3, "C", AGKind.STAT_STYLE, {"alpha": 0.3}),
        AugmentationGroup(4, "D", AGKind.WEATHER, {"max_severity": 3}),
        AugmentationGroup(5, "E", AGKind.CARTOON, {"levels": 6, "iterations": 3}),
        AugmentationGroup(6, "W1", AGKind.WEAK_BLUR, {"size": 5}),
        AugmentationGroup(7, "W2", AGKind.WEAK_ROTATE, {"max_angle": 15.0}),
        AugmentationGroup(8, "W3", AGKind.WEAK_NOISE, {"sigma": 0.03}),
        AugmentationGroup(9, "W4", AGKind.WEAK_BILATERAL, {"diameter": 5, "sigma_color": 0.1, "sigma_space": 2.0}),
    ]


def identity_group(ag_id: int = 0):
    """Stylization at zero strength; always a no-op."""
    return AugmentationGroup(ag_id, "identity", AGKind.STAT_STYLE, {"alpha": 0.0})


# ------------------------------------------------------------ reference bundle

@lru_cache(maxsize=None)
def _bundle():
    root = resources.files("sfseg") / "data" / "styles"
    manifest = json.loads((root / "manifest.json").read_text())
    images = []
    for entry in manifest["images"]:
        with resources.as_file(root / entry["file"]) as path:
            images.append(np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0)
    return tuple(images)


def style_references():
    return list(_bundle())


def _resize(img, shape):
    h, w = shape
    if img.shape[:2] == (h, w):
        return img
    out = cv2.resize(np.ascontiguousarray(img, dtype=np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
    return out


# ------------------------------------------------------------ transforms

def fda_band(shape, beta):
    """Boolean mask over a centered (fftshift-ed) spectrum.

    Side is floor(beta * min(H, W)) rounded down to an odd number so the band
    is symmetric under k -> -k and the output stays real.
    """
    h, w = shape[:2]
    b = int(np.floor(beta * min(h, w)))
    mask = np.zeros((h, w), dtype=bool)
    if b <= 0:
        return mask
    r = (b - 1) // 2
    ch, cw = h // 2, w // 2
    mask[ch - r:ch + r + 1, cw - r:cw + r + 1] = True
    return mask


def fda_transfer(content, reference, beta=0.09, clip=True):
    content = np.asarray(content, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if content.shape != reference.shape:
        raise ShapeError(f"content {content.shape} vs reference {reference.shape}")
    if beta < 0:
        raise ConfigError("beta", "must be non-negative")
    band = fda_band(content.shape, beta)
    if not band.any():
        out = content.copy()
    else:
        fc = np.fft.fftshift(np.fft.fft2(content, axes=(0, 1)), axes=(0, 1))
        fr = np.fft.fftshift(np.fft.fft2(reference, axes=(0, 1)), axes=(0, 1))
        amp = np.abs(fc)
        amp[band] = np.abs(fr)[band]
        mixed = amp * np.exp(1j * np.angle(fc))
        out = np.fft.ifft2(np.fft.ifftshift(mixed, axes=(0, 1)), axes=(0, 1)).real
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32) if clip else out


def stat_style_transfer(content, reference, alpha=0.3, clip=True):
    x = np.asarray(content, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    mu_c, sd_c = x.mean(axis=(0, 1)), x.std(axis=(0, 1))
    mu_r, sd_r = r.mean(axis=(0, 1)), r.std(axis=(0, 1))
    stylized = (x - mu_c) / np.maximum(sd_c, EPS) * sd_r + mu_r
    out = (1.0 - alpha) * x + alpha * stylized
    if clip:
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    return out


def _smooth_field(rng, shape, coarse=(4, 8), channels=3):
    h, w = shape
    grid = rng.uniform(0.0, 1.0, size=(coarse[0], coarse[1], channels)).astype(np.float32)
    return cv2.resize(grid, (w, h), interpolation=cv2.INTER_CUBIC).reshape(h, w, channels)


def random_mixing_matrix(rng, low=-0.3, high=1.3):
    """3x3 matrix with rows summing to 1 and entries in [low, high]."""
    rows = []
    while len(rows) < 3:
        a, b = rng.uniform(low, high, size=2)
        c = 1.0 - a - b
        if low <= c <= high:
            row = np.array([a, b, c])
            rows.append(rng.permutation(row))
    return np.array(rows)


def random_color_stylize(content, style_seed):
    rng = np.random.default_rng([style_seed % 2**63, 2])
    x = np.asarray(content, dtype=np.float64)
    m = random_mixing_matrix(rng)
    gam = rng.uniform(0.6, 1.6, size=3)
    mixed = np.clip(x @ m.T, 0.0, 1.0) ** gam
    tex = 0.8 + 0.4 * np.clip(_smooth_field(rng, x.shape[:2]), 0.0, 1.0)
    return np.clip(mixed * tex, 0.0, 1.0).astype(np.float32)


def _weather_field(kind, shape, rng):
    h, w = shape
    if kind == "SNOW":
        flakes = (rng.random((h, w)) < 0.06).astype(np.float32)
        angle = rng.uniform(-30, 30)
        length = int(rng.integers(3, 7))
        kernel = np.zeros((length * 2 + 1, length * 2 + 1), np.float32)
        cv2.line(kernel, (length, 0), (length, 2 * length), 1.0, 1)
        rot = cv2.getRotationMatrix2D((length, length), angle, 1.0)
        kernel = cv2.warpAffine(kernel, rot, kernel.shape[::-1])
        kernel /= max(kernel.sum(), EPS)
        streaks = cv2.filter2D(flakes, -1, kernel) * length
        haze = 0.35 + 0.3 * _smooth_field(rng, shape, (3, 6), 1)[..., 0]
        return np.clip(np.maximum(streaks, haze), 0.0, 1.0)
    if kind == "FROST":
        acc = np.zeros((h, w), np.float32)
        for scale in (1, 2, 4):
            n = rng.random((h // scale + 1, w // scale + 1)).astype(np.float32)
            acc += cv2.resize(n, (w, h), interpolation=cv2.INTER_NEAREST) / scale
        acc /= acc.max()
        crystals = (acc > 0.75).astype(np.float32)
        return np.clip(0.55 + 0.45 * crystals * acc, 0.0, 1.0)
    raise ConfigError("kind", f"unknown weather kind {kind!r}")


def weather_overlay(content, kind="SNOW", severity=1, seed=0):
    if not 1 <= int(severity) <= 5:
        raise ConfigError("severity", f"must be in [1, 5], got {severity}")
    rng = np.random.default_rng([seed % 2**63, 4, 0 if kind == "SNOW" else 1])
    x = np.asarray(content, dtype=np.float32)
    f = _weather_field(kind, x.shape[:2], rng)
    tint = np.array([0.92, 0.95, 1.0], np.float32) if kind == "SNOW" else np.array([0.85, 0.92, 1.0], np.float32)
    weight = 0.18 * int(severity)
    out = (1.0 - weight) * x + weight * f[..., None] * tint
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def guided_smooth(img, radius=2, eps=1e-2):
    """Self-guided box filter (edge-preserving), applied per channel."""
    size = 2 * radius + 1
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        p = img[..., ch]
        mean = ndimage.uniform_filter(p, size, mode="reflect")
        var = ndimage.uniform_filter(p * p, size, mode="reflect") - mean * mean
        a = var / (var + eps)
        b = mean - a * mean
        out[..., ch] = ndimage.uniform_filter(a, size, mode="reflect") * p + ndimage.uniform_filter(b, size, mode="reflect")
    return out


def cartoon_edges(img, threshold=0.5):
    gray = img.mean(axis=2)
    mag = np.hypot(ndimage.sobel(gray, axis=0), ndimage.sobel(gray, axis=1))
    return mag > threshold


def cartoonize(content, levels=6, iterations=3, edges=True, edge_threshold=0.5):
    """Edge-preserving smoothing, per-channel quantization, dark outlines."""
    if levels < 2:
        raise ConfigError("levels", "need at least 2 levels")
    x = np.asarray(content, dtype=np.float64)
    for _ in range(iterations):
        x = guided_smooth(x)
    x = np.clip(x, 0.0, 1.0)
    q = np.round(x * (levels - 1)) / (levels - 1)
    if edges:
        q[cartoon_edges(x, edge_threshold)] = 0.0
    return q.astype(np.float32)


def box_blur(content, size=5):
    return ndimage.uniform_filter(np.asarray(content, dtype=np.float32), size=(size, size, 1), mode="reflect")


def rotate_pair(image, segmap, angle, unknown):
    if angle == 0:
        return np.asarray(image, dtype=np.float32).copy(), np.asarray(segmap).copy()
    img = ndimage.rotate(image, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    lab = ndimage.rotate(segmap, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=unknown)
    return np.clip(img, 0.0, 1.0).astype(np.float32), lab.astype(segmap.dtype)


def bilateral(content, diameter=5, sigma_color=0.1, sigma_space=2.0):
    img = np.ascontiguousarray(content, dtype=np.float32)
    return np.clip(cv2.bilateralFilter(img, diameter, sigma_color, sigma_space), 0.0, 1.0)


# ------------------------------------------------------------ dispatch

def apply_ag(ag: AugmentationGroup, image, segmap, rng_seed, num_classes=None, force_angle=None):
    """Apply ``ag`` with all internal randomness derived from ``rng_seed``."""
    rng = np.random.default_rng([rng_seed % 2**63, 7, ag.id % 2**31])
    p = ag.params
    kind = ag.kind
    img = np.asarray(image, dtype=np.float32)
    if kind == AGKind.FDA:
        if rng.random() < p.get("noise_ref_prob", 0.5):
            ref = rng.random(img.shape).astype(np.float32)
        else:
            refs = _bundle()
            ref = _resize(refs[int(rng.integers(len(refs)))], img.shape[:2])
        return fda_transfer(img, ref, p.get("beta", 0.09)), segmap
    if kind == AGKind.STAT_STYLE:
        refs = _bundle()
        ref = refs[int(rng.integers(len(refs)))]
        return stat_style_transfer(img, ref, p.get("alpha", 0.3)), segmap
    if kind == AGKind.RANDOM_STYLE:
        return random_color_stylize(img, int(rng.integers(2**31))), segmap
    if kind == AGKind.WEATHER:
        wkind = "SNOW" if rng.random() < 0.5 else "FROST"
        severity = int(rng.integers(1, int(p.get("max_severity", 3)) + 1))
        return weather_overlay(img, wkind, severity, int(rng.integers(2**31))), segmap
    if kind == AGKind.CARTOON:
        return cartoonize(img, p.get("levels", 6), p.get("iterations", 3)), segmap
    if kind == AGKind.WEAK_BLUR:
        return box_blur(img, p.get("size", 5)), segmap
    if kind == AGKind.WEAK_ROTATE:
        max_angle = p.get("max_angle", 15.0)
        angle = float(rng.uniform(-max_angle, max_angle)) if force_angle is None else float(force_angle)
        unknown = num_classes if num_classes is not None else int(np.max(segmap)) + 1
        return rotate_pair(img, segmap, angle, unknown)
    if kind == AGKind.WEAK_NOISE:
        noisy = img + p.get("sigma", 0.03) * rng.standard_normal(img.shape).astype(np.float32)
        return np.clip(noisy, 0.0, 1.0), segmap
    if kind == AGKind.WEAK_BILATERAL:
        return bilateral(img, p.get("diameter", 5), p.get("sigma_color", 0.1), p.get("sigma_space", 2.0)), segmap
    raise ConfigError("kind", f"unsupported augmentation kind {kind!r}")


def apply_ag_batch(ag, images, labels, seed, num_classes):
    """Augment a stacked batch; sample k uses seed derived from (seed, k)."""
    from .synthdata import derive_seed
    out_i, out_l = [], []
    for k in range(len(images)):
        lab = labels[k] if labels is not None else np.zeros(images[k].shape[:2], np.int64)
        a, b = apply_ag(ag, images[k], lab, derive_seed(seed, k), num_classes=num_classes)
        out_i.append(a)
        out_l.append(b)
    return np.stack(out_i), (np.stack(out_l) if labels is not None else None)
