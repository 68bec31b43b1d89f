"""Regenerate the bundled style-reference images (deterministic)."""
import json
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

OUT = Path(__file__).resolve().parents[1] / "src" / "sfseg" / "data" / "styles"
H, W = 64, 128


def plasma(rng):
    acc = np.zeros((H, W, 3), np.float32)
    for s in (2, 4, 8, 16):
        g = rng.random((s, 2 * s, 3)).astype(np.float32)
        acc += cv2.resize(g, (W, H), interpolation=cv2.INTER_CUBIC) / s
    acc -= acc.min()
    return acc / acc.max()


def stripes(rng):
    yy, xx = np.mgrid[0:H, 0:W]
    theta = rng.uniform(0, np.pi)
    f = rng.uniform(0.05, 0.2)
    v = 0.5 + 0.5 * np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)))
    c0, c1 = rng.random(3), rng.random(3)
    return v[..., None] * c0 + (1 - v[..., None]) * c1


def patches(rng):
    pts = rng.uniform(0, 1, (12, 2)) * [H, W]
    cols = rng.random((12, 3))
    yy, xx = np.mgrid[0:H, 0:W]
    d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return cols[d.argmin(-1)]


def gradient(rng):
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    c = rng.random((3, 3))
    return np.clip(c[0] * yy[..., None] + c[1] * xx[..., None] + 0.3 * c[2], 0, 1)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    makers = [plasma, stripes, patches, gradient, plasma, stripes, patches, plasma]
    entries = []
    for k, make in enumerate(makers):
        rng = np.random.default_rng(1000 + k)
        img = make(rng)
        # vivid: push each channel to a distinct mean with high contrast
        mu = rng.uniform(0.1, 0.9, size=3)
        sd = img.std(axis=(0, 1)) + 1e-6
        img = np.clip((img - img.mean(axis=(0, 1))) / sd * 0.3 + mu, 0, 1)
        name = f"style_{k:02d}.png"
        Image.fromarray((img * 255).round().astype(np.uint8)).save(OUT / name)
        entries.append({"file": name, "generator": make.__name__, "seed": 1000 + k})
    (OUT / "manifest.json").write_text(json.dumps({"images": entries}, indent=1))


if __name__ == "__main__":
    main()
