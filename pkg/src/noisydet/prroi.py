"""Precise region pooling: exact bin averages of the bilinear feature field.

The bilinearly interpolated map is ``f(x, y) = sum_ij F[i, j] k(y - i) k(x - j)``
with the hat kernel ``k(u) = max(0, 1 - |u|)``. Coordinates outside the grid
clamp to the border, so ``f`` extends as a constant beyond the edge. Because the
field is separable, the integral of ``f`` over an axis-aligned bin factorizes
into per-axis weight matrices built from the antiderivative of ``k``. No
coordinate is ever rounded, so bin values are smooth in the box corners.

Two implementations share that closed form:

* numpy (:func:`precise_pool`, :func:`pool_grad_box`) with a hand-derived
  gradient; used as the reference and by the gradient checks;
* torch (:func:`prroi_pool`), used by the detector and differentiated by
  autograd with respect to both features and boxes.

Boxes passed here are in feature-map coordinates, where grid index ``j``
sits at image pixel ``(j + 0.5) * stride``; see :func:`image_to_feature`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_POOL_SIZE = 7


@dataclass
class FeatureMap:
    values: np.ndarray  # (channels, height, width)
    stride: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("feature map must be (channels, height, width)")
        if self.values.shape[1] < 2 or self.values.shape[2] < 2:
            raise ValueError("feature map needs height and width >= 2")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def image_to_feature(boxes, stride: float):
    """Map image-pixel corners to feature-grid coordinates."""
    return boxes / stride - 0.5


def _hat_antiderivative(v):
    # integral of the hat kernel from -1 to v, for v already clamped to [-1, 1]
    return np.where(v < 0, 0.5 * (v + 1.0) ** 2, 1.0 - 0.5 * (1.0 - v) ** 2)


def _axis_cumulative(u: np.ndarray, n: int) -> np.ndarray:
    """``A[..., j] = int_0^u phi_j``, up to a per-j constant, for the clamped basis."""
    u = np.asarray(u, dtype=np.float64)
    j = np.arange(n, dtype=np.float64)
    uc = np.clip(u, 0.0, n - 1.0)
    out = _hat_antiderivative(np.clip(uc[..., None] - j, -1.0, 1.0))
    out[..., 0] += np.minimum(u, 0.0)
    out[..., n - 1] += np.maximum(u, n - 1.0)
    return out


def _axis_basis(u: np.ndarray, n: int) -> np.ndarray:
    """Clamped hat basis ``phi_j(u)``, shape ``(..., n)``."""
    uc = np.clip(np.asarray(u, dtype=np.float64), 0.0, n - 1.0)
    return np.maximum(0.0, 1.0 - np.abs(uc[..., None] - np.arange(n)))


def bilinear_at(fmap: FeatureMap, x: float, y: float, c: int) -> float:
    """Field value at ``(x, y)``; out-of-range coordinates clamp to the border."""
    _, h, w = fmap.shape
    wy = _axis_basis(np.float64(y), h)
    wx = _axis_basis(np.float64(x), w)
    return float(wy @ fmap.values[c] @ wx)


def _bin_edges(lo: float, hi: float, pool_size: int) -> np.ndarray:
    return lo + (hi - lo) * np.arange(pool_size + 1) / pool_size


def _check_box(box, pool_size: int) -> np.ndarray:
    b = np.asarray(box.as_array() if hasattr(box, "as_array") else box, dtype=np.float64)
    if pool_size < 1:
        raise ValueError("pool size must be >= 1")
    if not (b[2] > b[0] and b[3] > b[1]):
        raise ValueError(f"zero-area bins for box {b.tolist()}")
    return b


def precise_pool(fmap: FeatureMap, box, pool_size: int = DEFAULT_POOL_SIZE) -> np.ndarray:
    """Exact mean of the bilinear field over each of ``pool_size**2`` bins.

    Returns an array of shape ``(channels, pool_size, pool_size)`` indexed
    ``[c, row, col]``.
    """
    x1, y1, x2, y2 = _check_box(box, pool_size)
    _, h, w = fmap.shape
    wx = np.diff(_axis_cumulative(_bin_edges(x1, x2, pool_size), w), axis=0)
    wy = np.diff(_axis_cumulative(_bin_edges(y1, y2, pool_size), h), axis=0)
    area = (x2 - x1) * (y2 - y1) / pool_size**2
    return np.einsum("ph,chw,qw->cpq", wy, fmap.values, wx) / area


def _edge_weight_grads(lo: float, hi: float, n: int, pool_size: int):
    """d(bin weights)/d(lo) and d(bin weights)/d(hi), each ``(pool_size, n)``."""
    edges = _bin_edges(lo, hi, pool_size)
    phi = _axis_basis(edges, n)
    frac = np.arange(pool_size + 1, dtype=np.float64)[:, None] / pool_size
    # edge k moves with d(edge)/d(lo) = 1 - k/P and d(edge)/d(hi) = k/P
    return np.diff(phi * (1.0 - frac), axis=0), np.diff(phi * frac, axis=0)


def pool_grad_box(
    fmap: FeatureMap, box, pool_size: int, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of ``sum(upstream * precise_pool(fmap, box))`` w.r.t. ``(x1, y1, x2, y2)``."""
    x1, y1, x2, y2 = _check_box(box, pool_size)
    _, h, w = fmap.shape
    F = fmap.values
    wx = np.diff(_axis_cumulative(_bin_edges(x1, x2, pool_size), w), axis=0)
    wy = np.diff(_axis_cumulative(_bin_edges(y1, y2, pool_size), h), axis=0)
    area = (x2 - x1) * (y2 - y1) / pool_size**2
    value = np.einsum("ph,chw,qw->cpq", wy, F, wx) / area
    dwx_lo, dwx_hi = _edge_weight_grads(x1, x2, w, pool_size)
    dwy_lo, dwy_hi = _edge_weight_grads(y1, y2, h, pool_size)
    # quotient rule on the 1/area normalisation
    dv_dx1 = np.einsum("ph,chw,qw->cpq", wy, F, dwx_lo) / area + value / (x2 - x1)
    dv_dx2 = np.einsum("ph,chw,qw->cpq", wy, F, dwx_hi) / area - value / (x2 - x1)
    dv_dy1 = np.einsum("ph,chw,qw->cpq", dwy_lo, F, wx) / area + value / (y2 - y1)
    dv_dy2 = np.einsum("ph,chw,qw->cpq", dwy_hi, F, wx) / area - value / (y2 - y1)
    upstream = np.asarray(upstream, dtype=np.float64)
    return np.array(
        [np.sum(upstream * d) for d in (dv_dx1, dv_dy1, dv_dx2, dv_dy2)], dtype=np.float64
    )


# torch --------------------------------------------------------------------------


def _axis_cumulative_t(u: torch.Tensor, n: int) -> torch.Tensor:
    j = torch.arange(n, dtype=u.dtype, device=u.device)
    uc = u.clamp(0.0, n - 1.0)
    v = (uc.unsqueeze(-1) - j).clamp(-1.0, 1.0)
    out = torch.where(v < 0, 0.5 * (v + 1.0) ** 2, 1.0 - 0.5 * (1.0 - v) ** 2)
    # strict comparisons: at u == 0 or n-1 the clamp above already carries the
    # unit derivative, and minimum/maximum would add half of another one
    below = torch.where(u < 0, u, torch.zeros_like(u)).unsqueeze(-1)
    above = torch.where(u > n - 1.0, u, torch.full_like(u, n - 1.0)).unsqueeze(-1)
    first = torch.zeros(n, dtype=u.dtype, device=u.device)
    first[0] = 1.0
    last = torch.zeros(n, dtype=u.dtype, device=u.device)
    last[n - 1] = 1.0
    return out + below * first + above * last


def prroi_pool(features: torch.Tensor, rois: torch.Tensor, pool_size: int = DEFAULT_POOL_SIZE) -> torch.Tensor:
    """Batched precise pooling.

    ``features`` is ``(N, C, H, W)``; ``rois`` is ``(R, 5)`` holding
    ``(batch_index, x1, y1, x2, y2)`` in feature coordinates. Returns
    ``(R, C, P, P)``. Differentiable in both ``features`` and the roi corners.
    """
    if rois.numel() == 0:
        n, c = features.shape[:2]
        return features.new_zeros((0, c, pool_size, pool_size))
    _, _, h, w = features.shape
    idx = rois[:, 0].long()
    x1, y1, x2, y2 = rois[:, 1], rois[:, 2], rois[:, 3], rois[:, 4]
    steps = torch.arange(pool_size + 1, dtype=rois.dtype, device=rois.device) / pool_size
    ex = x1[:, None] + (x2 - x1)[:, None] * steps
    ey = y1[:, None] + (y2 - y1)[:, None] * steps
    wx = torch.diff(_axis_cumulative_t(ex, w), dim=1)  # (R, P, W)
    wy = torch.diff(_axis_cumulative_t(ey, h), dim=1)  # (R, P, H)
    area = (x2 - x1) * (y2 - y1) / pool_size**2
    f = features.index_select(0, idx)  # (R, C, H, W)
    pooled = wy.unsqueeze(1) @ f @ wx.transpose(1, 2).unsqueeze(1)
    return pooled / area[:, None, None, None]
