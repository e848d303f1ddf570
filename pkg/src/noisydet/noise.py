"""Synthetic annotation corruption with recorded provenance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Annotation, Dataset, load_annotations
from .geometry import clip_array, is_degenerate_array

MAX_RESAMPLE = 1000


@dataclass(frozen=True)
class NoiseSpec:
    label_noise: float = 0.0  # percent of annotations relabelled
    bbox_noise: float = 0.0  # percent of box width/height used as perturbation range
    seed: int = 0

    def __post_init__(self):
        for name in ("label_noise", "bbox_noise"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name} must lie in [0, 100], got {v}")
            object.__setattr__(self, name, float(v))


@dataclass(frozen=True)
class ProvenancedAnnotation:
    noisy: Annotation
    clean: Annotation
    label_flipped: bool
    box_perturbed: bool


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def inject_label_noise(ds: Dataset, percent: float, rng: np.random.Generator) -> Dataset:
    """Relabel exactly ``round(percent% * n)`` annotations with a different random class."""
    out = ds.copy()
    n = len(out.annotations)
    n_flip = _round_half_up(percent / 100.0 * n)
    if n_flip == 0:
        return out
    if ds.num_classes < 2:
        raise ValueError("label noise needs at least two classes")
    chosen = rng.choice(n, size=n_flip, replace=False)
    shifts = rng.integers(1, ds.num_classes, size=n_flip)
    for i, s in zip(chosen, shifts):
        a = out.annotations[i]
        a.label = int((a.label + s) % ds.num_classes)
    return out


def inject_bbox_noise(ds: Dataset, percent: float, rng: np.random.Generator) -> Dataset:
    """Shift each corner coordinate by an independent uniform draw.

    Horizontal coordinates move by ``U[-w p, +w p]`` and vertical ones by
    ``U[-h p, +h p]`` with ``p = percent / 100`` and ``w, h`` the box size.
    Results are clipped to the image; boxes that collapse below one pixel are
    redrawn.
    """
    out = ds.copy()
    if percent == 0:
        return out
    p = percent / 100.0
    sizes = {im.id: (im.width, im.height) for im in out.images}
    for a in out.annotations:
        w, h = a.box[2] - a.box[0], a.box[3] - a.box[1]
        scale = np.array([w, h, w, h]) * p
        width, height = sizes[a.image_id]
        for _ in range(MAX_RESAMPLE):
            cand = clip_array(a.box + rng.uniform(-1.0, 1.0, size=4) * scale, width, height)
            if not is_degenerate_array(cand):
                break
        else:
            raise RuntimeError(f"annotation {a.id}: could not draw a valid perturbed box")
        a.box = cand
    return out


def inject_noise(ds: Dataset, spec: NoiseSpec) -> Dataset:
    """Apply label then box noise; the returned dataset carries the clean annotations."""
    seq = np.random.SeedSequence(spec.seed)
    label_rng, box_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    noisy = inject_bbox_noise(inject_label_noise(ds, spec.label_noise, label_rng), spec.bbox_noise, box_rng)
    base = ds.clean if ds.clean is not None else {a.id: a for a in ds.annotations}
    noisy.clean = {k: v.copy() for k, v in base.items()}
    return noisy


def provenance(ds: Dataset) -> list[ProvenancedAnnotation]:
    if ds.clean is None:
        return []
    out = []
    for a in ds.annotations:
        c = ds.clean[a.id]
        out.append(ProvenancedAnnotation(a, c, a.label != c.label, not np.array_equal(a.box, c.box)))
    return out


def import_external_annotations(path, image_dir=None) -> Dataset:
    """Load a pre-corrupted annotation file. Clean provenance is never trusted."""
    ds = load_annotations(path, image_dir)
    ds.clean = None
    return ds
