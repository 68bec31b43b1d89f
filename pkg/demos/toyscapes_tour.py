"""Render a source scene, the shifted targets and every augmentation group side by side.

    python demos/toyscapes_tour.py --out tour.png
"""
import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from sfseg.augment import apply_ag, default_candidates
from sfseg.synthdata import DomainSpec, generate_sample, make_shifted_domain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="tour.png")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    spec = DomainSpec()
    img, lab = generate_sample(spec, args.seed)
    panels = [("source", img), ("labels", lab)]
    # same layout, new appearance: gamma blends the injected colours with the source ones
    for gamma in (1.0, 0.4, 0.0):
        shifted, _ = generate_sample(make_shifted_domain(spec, gamma, shift_seed=3), args.seed)
        panels.append((f"target gamma={gamma}", shifted))
    for ag in default_candidates():
        aug, _ = apply_ag(ag, img, lab, rng_seed=args.seed, num_classes=spec.num_classes)
        panels.append((f"{ag.name} ({ag.kind.value})", aug))

    cols = 4
    rows = int(np.ceil(len(panels) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 1.9 * rows))
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (title, im) in zip(axes.ravel(), panels):
        if im.ndim == 2:
            ax.imshow(im, cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
        else:
            ax.imshow(np.clip(im, 0, 1))
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=110)
    print("wrote", args.out)


if __name__ == "__main__":
    main()
