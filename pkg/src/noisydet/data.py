"""Datasets: the synthetic-shapes generator and COCO-style annotation files.

Files use the COCO ``[x, y, width, height]`` box convention; everything in
memory uses corners. Conversion happens only in :func:`save_annotations` and
:func:`load_annotations`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box

SHAPES = ("circle", "square", "triangle", "cross")


class AnnotationFormatError(ValueError):
    pass


@dataclass
class Annotation:
    id: int
    image_id: int
    label: int  # foreground class index in [0, C)
    box: np.ndarray  # (4,) corners, image pixels

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)

    def copy(self) -> "Annotation":
        return Annotation(self.id, self.image_id, self.label, self.box.copy())


@dataclass
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int


@dataclass
class Dataset:
    categories: list[str]
    images: list[ImageRecord]
    annotations: list[Annotation]
    pixels: np.ndarray | None = None  # (N, H, W, 3) uint8, aligned with ``images``
    clean: dict[int, Annotation] | None = None  # annotation id -> clean annotation

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def __len__(self) -> int:
        return len(self.images)

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out

    def copy(self) -> "Dataset":
        return Dataset(
            list(self.categories),
            list(self.images),
            [a.copy() for a in self.annotations],
            self.pixels,
            None if self.clean is None else {k: v.copy() for k, v in self.clean.items()},
        )


# synthetic shapes -------------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_images: int = 400
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 20
    max_size: int = 48
    margin: int = 2  # minimum gap between object boxes
    classes: tuple[str, ...] = SHAPES
    distractors: int = 3
    max_tries: int = 200
    seed: int = 0


def _shape_mask(kind: str, x1: int, y1: int, w: int, h: int, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    u = (xs - x1) / w  # [0, 1] across the object box
    v = (ys - y1) / h
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if kind == "square":
        m = inside
    elif kind == "circle":
        m = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif kind == "triangle":
        m = inside & (np.abs(u - 0.5) <= 0.5 * v)
    elif kind == "cross":
        m = inside & ((np.abs(u - 0.5) <= 1 / 6) | (np.abs(v - 0.5) <= 1 / 6))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m


def _background(rng: np.random.Generator, size: int, distractors: int) -> np.ndarray:
    base = rng.uniform(70, 130, size=3)
    coarse = rng.normal(0, 12, size=(size // 16 + 1, size // 16 + 1, 3))
    smooth = np.kron(coarse, np.ones((16, 16, 1)))[:size, :size]
    img = base + smooth + rng.normal(0, 4, size=(size, size, 3))
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(distractors):
        # thin straight stripes: textured clutter, never a full shape
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(0, size)
        d = np.abs(np.cos(theta) * xs + np.sin(theta) * ys - offset)
        img[d < 0.8] = rng.uniform(50, 150, size=3)
    # keep every background channel inside [40, 160]; objects always have a channel >= 200
    return np.clip(img, 40, 160)


def _object_color(rng: np.random.Generator) -> np.ndarray:
    c = rng.uniform(0, 120, size=3)
    c[rng.integers(3)] = rng.uniform(200, 255)
    return c


def render_image(spec: SyntheticSpec, rng: np.random.Generator, with_objects: bool = True):
    """Render one image. Returns ``(pixels, boxes, labels)``.

    The background is drawn from ``rng`` first, so rendering twice from equal
    generator states with ``with_objects=False`` reproduces the bare backdrop.
    """
    size = spec.image_size
    img = _background(rng, size, spec.distractors)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[list[float]] = []
    labels: list[int] = []
    for _ in range(n):
        for _attempt in range(spec.max_tries):
            label = int(rng.integers(len(spec.classes)))
            w = int(rng.integers(spec.min_size, spec.max_size + 1))
            h = int(np.clip(round(w * rng.uniform(0.8, 1.25)), spec.min_size, spec.max_size))
            x1 = int(rng.integers(0, size - w + 1))
            y1 = int(rng.integers(0, size - h + 1))
            mask = _shape_mask(spec.classes[label], x1, y1, w, h, size)
            cols = np.flatnonzero(mask.any(axis=0))
            rows = np.flatnonzero(mask.any(axis=1))
            box = [float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)]
            m = spec.margin
            if all(
                box[0] >= o[2] + m or o[0] >= box[2] + m or box[1] >= o[3] + m or o[1] >= box[3] + m
                for o in boxes
            ):
                break
        else:
            raise RuntimeError("could not place non-overlapping objects; lower max_objects or sizes")
        color = _object_color(rng)
        if with_objects:
            img[mask] = color
        boxes.append(box)
        labels.append(label)
    pixels = np.round(img).astype(np.uint8)
    return pixels, np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(labels, dtype=np.int64)


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def synthesize_dataset(spec: SyntheticSpec) -> Dataset:
    if len(spec.classes) < 2:
        raise ValueError("need at least two shape classes")
    images, annotations, pixels = [], [], []
    for i in range(spec.num_images):
        img, boxes, labels = render_image(spec, image_rng(spec.seed, i))
        images.append(ImageRecord(i, f"{i:06d}.png", spec.image_size, spec.image_size))
        pixels.append(img)
        for b, c in zip(boxes, labels):
            annotations.append(Annotation(len(annotations), i, int(c), b))
    s = spec.image_size
    arr = np.stack(pixels) if pixels else np.zeros((0, s, s, 3), dtype=np.uint8)
    return Dataset(list(spec.classes), images, annotations, arr)


# annotation files -----------------------------------------------------------------


def _ann_to_json(a: Annotation, clean: Annotation | None) -> dict:
    rec = {
        "id": a.id,
        "image_id": a.image_id,
        "category_id": a.label + 1,
        "bbox": Box.from_array(a.box).to_xywh(),
    }
    if clean is not None:
        rec["clean_category_id"] = clean.label + 1
        rec["clean_bbox"] = Box.from_array(clean.box).to_xywh()
    return rec


def annotations_to_json(ds: Dataset, include_provenance: bool = True) -> dict:
    clean = ds.clean if include_provenance else None
    return {
        "images": [
            {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
            for im in ds.images
        ],
        "annotations": [_ann_to_json(a, None if clean is None else clean.get(a.id)) for a in ds.annotations],
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(ds.categories)],
    }


def save_annotations(ds: Dataset, path, include_provenance: bool = True) -> None:
    Path(path).write_text(json.dumps(annotations_to_json(ds, include_provenance), indent=1))


def _parse_bbox(raw, where: str) -> np.ndarray:
    try:
        x, y, w, h = (float(v) for v in raw)
    except (TypeError, ValueError):
        raise AnnotationFormatError(f"{where}: bbox must be four numbers, got {raw!r}") from None
    if not (w > 0 and h > 0) or not np.isfinite([x, y, w, h]).all():
        raise AnnotationFormatError(f"{where}: bbox width/height must be positive, got {raw!r}")
    return np.array([x, y, x + w, y + h])


def annotations_from_json(doc: dict) -> Dataset:
    try:
        cats = sorted(doc["categories"], key=lambda c: c["id"])
        images = [
            ImageRecord(int(im["id"]), str(im["file_name"]), int(im["width"]), int(im["height"]))
            for im in doc["images"]
        ]
        raw_anns = doc["annotations"]
    except (KeyError, TypeError) as exc:
        raise AnnotationFormatError(f"missing top-level field: {exc}") from None
    cat_index = {int(c["id"]): i for i, c in enumerate(cats)}
    image_ids = {im.id for im in images}
    anns: list[Annotation] = []
    clean: dict[int, Annotation] = {}
    for k, rec in enumerate(raw_anns):
        where = f"annotation #{k} (id={rec.get('id', '?') if isinstance(rec, dict) else '?'})"
        try:
            aid, iid, cid = int(rec["id"]), int(rec["image_id"]), int(rec["category_id"])
        except (KeyError, TypeError, ValueError):
            raise AnnotationFormatError(f"{where}: needs integer id, image_id, category_id") from None
        if iid not in image_ids:
            raise AnnotationFormatError(f"{where}: unknown image_id {iid}")
        if cid not in cat_index:
            raise AnnotationFormatError(f"{where}: unknown category_id {cid}")
        anns.append(Annotation(aid, iid, cat_index[cid], _parse_bbox(rec.get("bbox"), where)))
        if "clean_bbox" in rec:
            ccid = int(rec.get("clean_category_id", cid))
            if ccid not in cat_index:
                raise AnnotationFormatError(f"{where}: unknown clean_category_id {ccid}")
            clean[aid] = Annotation(aid, iid, cat_index[ccid], _parse_bbox(rec["clean_bbox"], where))
    return Dataset([str(c["name"]) for c in cats], images, anns, None, clean or None)


def load_annotations(path, image_dir=None) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"{path}: not valid JSON ({exc})") from None
    ds = annotations_from_json(doc)
    if image_dir is not None and ds.images:
        ds.pixels = np.stack(
            [np.asarray(Image.open(Path(image_dir) / im.file_name).convert("RGB")) for im in ds.images]
        )
    return ds


def save_images(ds: Dataset, image_dir) -> None:
    image_dir = Path(image_dir)
    image_dir.mkdir(parents=True, exist_ok=True)
    for im, px in zip(ds.images, ds.pixels):
        Image.fromarray(px).save(image_dir / im.file_name)
