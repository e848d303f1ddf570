"""Box algebra shared by every stage of the pipeline.

Boxes are corner coordinates ``(x1, y1, x2, y2)`` in input-image pixels.
Scalar helpers operate on :class:`Box`; the ``*_array`` variants operate on
``(..., 4)`` numpy arrays and are what the hot paths use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_SIDE = 1.0
# exp() clamp for decoded log-size offsets, as in most two-stage detectors
MAX_LOG_RATIO = float(np.log(1000.0 / 16.0))


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def is_valid(self) -> bool:
        return self.x2 > self.x1 and self.y2 > self.y1

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.width, self.height]


@dataclass(frozen=True)
class BoxOffset:
    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


def _require_valid(*boxes: Box) -> None:
    for b in boxes:
        if not b.is_valid:
            raise DegenerateBoxError(f"degenerate box {b}")


def iou(a: Box, b: Box) -> float:
    _require_valid(a, b)
    return float(iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two equally shaped ``(..., 4)`` arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = (
        (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
        + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
        - inter
    )
    return inter / np.where(union > 0, union, 1.0)


def encode_array(boxes: np.ndarray, refs: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    rw = refs[..., 2] - refs[..., 0]
    rh = refs[..., 3] - refs[..., 1]
    bw = boxes[..., 2] - boxes[..., 0]
    bh = boxes[..., 3] - boxes[..., 1]
    dx = (boxes[..., 0] + 0.5 * bw - (refs[..., 0] + 0.5 * rw)) / rw
    dy = (boxes[..., 1] + 0.5 * bh - (refs[..., 1] + 0.5 * rh)) / rh
    return np.stack([dx, dy, np.log(bw / rw), np.log(bh / rh)], axis=-1)


def decode_array(
    deltas: np.ndarray, refs: np.ndarray, image_size: tuple[int, int] | None = None
) -> np.ndarray:
    """Inverse of :func:`encode_array`; clips to ``(width, height)`` if given."""
    deltas = np.asarray(deltas, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    rw = refs[..., 2] - refs[..., 0]
    rh = refs[..., 3] - refs[..., 1]
    cx = refs[..., 0] + 0.5 * rw + deltas[..., 0] * rw
    cy = refs[..., 1] + 0.5 * rh + deltas[..., 1] * rh
    w = rw * np.exp(np.minimum(deltas[..., 2], MAX_LOG_RATIO))
    h = rh * np.exp(np.minimum(deltas[..., 3], MAX_LOG_RATIO))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if image_size is not None:
        out = clip_array(out, *image_size)
    return out


def encode_offset(b: Box, ref: Box) -> BoxOffset:
    _require_valid(b, ref)
    return BoxOffset(*encode_array(b.as_array(), ref.as_array()).tolist())


def decode_offset(t: BoxOffset, ref: Box, image_size: tuple[int, int] | None = None) -> Box:
    _require_valid(ref)
    return Box.from_array(decode_array(t.as_array(), ref.as_array(), image_size))


def clip_array(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.empty_like(boxes)
    out[..., 0::2] = np.clip(boxes[..., 0::2], 0.0, width)
    out[..., 1::2] = np.clip(boxes[..., 1::2], 0.0, height)
    return out


def is_degenerate_array(boxes: np.ndarray, min_side: float = MIN_SIDE) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return ((boxes[..., 2] - boxes[..., 0]) < min_side) | ((boxes[..., 3] - boxes[..., 1]) < min_side)


def clip_box(b: Box, width: int, height: int, min_side: float = MIN_SIDE) -> tuple[Box, bool]:
    """Clamp ``b`` to the image. The flag is True when a side falls below ``min_side``."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    out = clip_array(b.as_array(), width, height)
    return Box.from_array(out), bool(is_degenerate_array(out, min_side))
