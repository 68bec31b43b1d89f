"""Step through the client side by hand on a finished run directory.

    sfseg --output-dir runs/default all
    python demos/adapt_walkthrough.py runs/default --out walkthrough.png

Loads the leave-one-out vendor model and its cPAE, picks the head with the
lowest self-entropy on the unlabeled target, extracts one round of
pseudo-labels and compares them with the held-back ground truth.
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from sfseg.adapt import extract_pseudo_labels, select_optimal_head
from sfseg.checkpoint import load_checkpoint, load_cpae_for
from sfseg.metrics import retained_miou
from sfseg.synthdata import CLASS_NAMES_8, load_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run", type=Path)
    ap.add_argument("--out", default="walkthrough.png")
    ap.add_argument("--n", type=int, default=100, help="target images to use")
    args = ap.parse_args()

    model, _ = load_checkpoint(args.run / "checkpoints" / "vendor_LOpp.pt", "soman")
    q, _ = load_cpae_for(args.run / "checkpoints" / "cpae.pt", model)
    images = load_dataset(args.run / "data" / "target_train", labels=False).images[:args.n]
    gt = np.load(args.run / "data" / "eval" / "target_train_labels.npy")[:args.n]

    head, ent = select_optimal_head(model, images, return_entropies=True)
    print("mean self-entropy per head:", {h: round(v, 4) for h, v in ent.items()}, "->", head)

    raw = extract_pseudo_labels(model, head, None, images)
    ref = extract_pseudo_labels(model, head, q, images)
    print(f"{'class':<10} {'t raw':>7} {'t cPAE':>7} {'kept':>6}")
    for c, name in enumerate(CLASS_NAMES_8[:model.num_classes]):
        kept = ref.retained_fraction()[c]
        print(f"{name:<10} {raw.thresholds.values[c]:7.3f} {ref.thresholds.values[c]:7.3f} {kept:6.3f}")
    c = model.num_classes
    print(f"pseudo-label mIoU on kept pixels: raw {retained_miou(raw.labels, gt, c):.4f}, "
          f"cPAE {retained_miou(ref.labels, gt, c):.4f}")

    k = 0
    fig, axes = plt.subplots(1, 4, figsize=(13, 2.2))
    shown = [images[k], gt[k], raw.labels[k], ref.labels[k]]
    for ax, im, title in zip(axes, shown, ["target image", "ground truth", "pseudo (raw)", "pseudo (cPAE)"]):
        if im.ndim == 2:
            # UNKNOWN shows as white
            im = np.ma.masked_equal(im, c)
            ax.imshow(im, cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
        else:
            ax.imshow(im)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(args.out, dpi=110)
    print("wrote", args.out)


if __name__ == "__main__":
    main()
