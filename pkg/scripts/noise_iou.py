"""Monte-Carlo mean IoU between clean and noisy boxes for a range of box-noise levels."""

import argparse

import numpy as np

from noisydet.data import Annotation, Dataset, ImageRecord
from noisydet.geometry import paired_iou
from noisydet.noise import NoiseSpec, inject_noise


def interior_boxes(n, seed, canvas=1000):
    # boxes far from the border so clipping never interferes
    rng = np.random.default_rng(seed)
    w, h = rng.uniform(20, 60, n), rng.uniform(20, 60, n)
    c = canvas / 2
    images = [ImageRecord(i, f"{i}.png", canvas, canvas) for i in range(n)]
    anns = [Annotation(i, i, 0, [c - w[i] / 2, c - h[i] / 2, c + w[i] / 2, c + h[i] / 2]) for i in range(n)]
    return Dataset(["object"], images, anns)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=float, nargs="+", default=[10, 20, 30, 40])
    ap.add_argument("-n", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = interior_boxes(args.n, args.seed)
    clean = np.stack([a.box for a in ds.annotations])
    for nb in args.levels:
        out = inject_noise(ds, NoiseSpec(0, nb, args.seed + 1))
        iou = paired_iou(np.stack([a.box for a in out.annotations]), clean)
        sem = iou.std() / np.sqrt(len(iou))
        print(f"N_b={nb:5.1f}%  mean IoU {iou.mean():.4f} +- {sem:.4f}")


if __name__ == "__main__":
    main()
