"""Two-step annotation correction with a frozen two-head detector.

Step 1 moves each noisy box by one gradient step on
``L(b) = ||p1 - p2||^2 + lambda * (p1_bg + p2_bg)``, the heads' disagreement
plus their background scores at ``b``. A box both heads call background with
probability above 0.9 is dropped.

Step 2 builds a soft label from the heads' foreground predictions at the
corrected box and the noisy one-hot label, sharpens it with temperature
``T``, and nudges the box by ``rho`` times the heads' mean regression offset
for the soft label's top class.

The elementwise helpers accept numpy arrays (and, where noted, torch
tensors) with the class axis last.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import clip_array, decode_array, is_degenerate_array

BG = 0
REJECT_THRESHOLD = 0.9


@dataclass
class CorrectionConfig:
    lam: float = 0.1
    alpha: float = 100.0
    temperature: float = 0.4
    rho: float = 0.5
    cabbc: bool = True  # step 1 box update
    reject: bool = True
    soft_labels: bool = True  # step 2 label update
    sharpen: bool = True
    refine: bool = True  # step 2 box update
    dual_head: bool = True  # False: head 1 stands in for both heads
    objectness_only: bool = False  # drop the discrepancy term from step 1
    reject_threshold: float = REJECT_THRESHOLD

    @property
    def enabled(self) -> bool:
        return (
            (self.cabbc and self.alpha != 0)
            or self.reject
            or self.soft_labels
            or (self.refine and self.rho != 0)
        )


@dataclass
class CorrectionRecord:
    annotation_id: int
    image_id: int
    label: int  # noisy foreground label
    box: np.ndarray  # noisy box b
    box_star: np.ndarray  # after step 1, b*
    box_refined: np.ndarray | None  # after step 2, b**; None when rejected
    soft_label: np.ndarray | None  # y*; None when rejected
    rejected: bool
    diagnostics: dict = field(default_factory=dict)


# elementwise operations ------------------------------------------------------------------


def discrepancy(p1, p2):
    """Squared L2 distance between two class distributions (numpy or torch)."""
    if p1.shape[-1] != p2.shape[-1]:
        raise ValueError(f"length mismatch: {p1.shape[-1]} vs {p2.shape[-1]}")
    return ((p1 - p2) ** 2).sum(-1)


def cabbc_loss(p1, p2, lam: float = 0.1, objectness_only: bool = False):
    """Step-1 objective on ``(C+1)``-way distributions (numpy or torch)."""
    bg = p1[..., BG] + p2[..., BG]
    if objectness_only:
        return lam * bg
    return discrepancy(p1, p2) + lam * bg


def reject_false_positive(p1, p2, threshold: float = REJECT_THRESHOLD):
    return (np.asarray(p1)[..., BG] > threshold) & (np.asarray(p2)[..., BG] > threshold)


def foreground(p: np.ndarray) -> np.ndarray:
    """Drop the background entry of a ``(C+1)``-way distribution and renormalise."""
    fg = np.asarray(p, dtype=np.float64)[..., 1:]
    total = fg.sum(-1, keepdims=True)
    return fg / np.where(total > 0, total, 1.0)


def soft_label(p1, p2, y):
    return (np.asarray(p1) + np.asarray(p2) + np.asarray(y)) / 3.0


def sharpen(y_bar, temperature: float):
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    y_bar = np.asarray(y_bar, dtype=np.float64)
    # normalise in log space so small temperatures do not underflow
    logits = np.log(np.clip(y_bar, 1e-300, None)) / temperature
    logits = np.where(y_bar > 0, logits, -np.inf)
    logits -= logits.max(-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(-1, keepdims=True)


def entropy(p, axis: int = -1):
    p = np.asarray(p, dtype=np.float64)
    return -(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)).sum(axis)


def refine_box(box_star, t1, t2, y_star, rho: float = 0.5, image_size=None):
    """Shift ``b*`` by ``rho`` times the mean offset of both heads for ``argmax y*``.

    ``t1`` and ``t2`` are ``(C, 4)`` offset tables. Returns ``(box, fallback)``;
    ``fallback`` is True when the refined box degenerated and ``b*`` is kept.
    """
    box_star = np.asarray(box_star, dtype=np.float64)
    c = int(np.argmax(y_star))
    t = (np.asarray(t1, dtype=np.float64)[c] + np.asarray(t2, dtype=np.float64)[c]) / 2.0
    out = decode_array(rho * t, box_star, image_size)
    if is_degenerate_array(out):
        return box_star.copy(), True
    return out, False


# model-driven steps -------------------------------------------------------------------


def _rois(boxes: torch.Tensor, image_index: torch.Tensor) -> torch.Tensor:
    return torch.cat([image_index[:, None].to(boxes.dtype), boxes], dim=1)


def _head_pair(model, features, rois, dual_head: bool):
    p1, t1 = model.head_forward(features, rois, 1)
    if not dual_head:
        return p1, p1, t1, t1
    p2, t2 = model.head_forward(features, rois, 2)
    return p1, p2, t1, t2


def cabbc_gradient(model, features, boxes: torch.Tensor, image_index: torch.Tensor, cfg: CorrectionConfig):
    """Per-box loss and ``dL/db`` in image pixels, plus the head outputs at ``b``."""
    b = boxes.detach().clone().requires_grad_(True)
    p1, p2, _, _ = _head_pair(model, features.detach(), _rois(b, image_index), cfg.dual_head)
    loss = cabbc_loss(p1, p2, cfg.lam, cfg.objectness_only)
    # boxes do not interact, so the gradient of the sum is the per-box gradient
    (grad,) = torch.autograd.grad(loss.sum(), b)
    return loss.detach(), grad, p1.detach(), p2.detach()


def cabbc_update(model, features, boxes, image_index, image_size, cfg: CorrectionConfig):
    """One gradient step ``b* = clip(b - alpha dL/db)``; degenerate results keep ``b``.

    Returns ``(b*, diagnostics)`` where the diagnostics hold numpy arrays
    ``loss``, ``grad``, ``p1``, ``p2`` at ``b`` and a ``fallback`` mask.
    """
    boxes = torch.as_tensor(boxes, dtype=torch.float32)
    loss, grad, p1, p2 = cabbc_gradient(model, features, boxes, image_index, cfg)
    b = boxes.double().numpy()
    step = cfg.alpha * grad.double().numpy()
    new = clip_array(b - step, *image_size)
    bad = is_degenerate_array(new)
    new[bad] = b[bad]
    diag = {"loss": loss.double().numpy(), "grad": grad.double().numpy(), "p1": p1.double().numpy(),
            "p2": p2.double().numpy(), "fallback": bad}
    return new, diag


def correct_batch(
    model, images: np.ndarray, annotations: list[list], cfg: CorrectionConfig, features=None
) -> list[CorrectionRecord]:
    """Correct every annotation of a mini-batch with the model held fixed.

    ``annotations[i]`` lists the :class:`~noisydet.data.Annotation` objects of
    ``images[i]``. Records come back in input order. Model parameters are
    never modified. ``features`` may carry an already computed backbone map.
    """
    flat = [(i, a) for i, anns in enumerate(annotations) for a in anns]
    if not flat:
        return []
    was_training = model.training
    model.eval()
    height, width = images.shape[1:3]
    if features is None:
        with torch.no_grad():
            features = model.extract_features(model.preprocess(images))
    idx = torch.tensor([i for i, _ in flat])
    boxes = np.stack([a.box for _, a in flat])
    c = model.cfg.num_classes

    if cfg.cabbc and cfg.alpha != 0:
        box_star, diag = cabbc_update(model, features, boxes, idx, (width, height), cfg)
        p1_b, p2_b, loss_b = diag["p1"], diag["p2"], diag["loss"]
    else:
        box_star, diag = boxes.copy(), None

    with torch.no_grad():
        p1, p2, t1, t2 = _head_pair(
            model, features, _rois(torch.as_tensor(box_star, dtype=torch.float32), idx), cfg.dual_head
        )
    p1, p2 = p1.double().numpy(), p2.double().numpy()
    t1, t2 = t1.double().numpy(), t2.double().numpy()
    if diag is None:
        p1_b, p2_b = p1, p2
        loss_b = cabbc_loss(p1, p2, cfg.lam, cfg.objectness_only)
    loss_star = cabbc_loss(p1, p2, cfg.lam, cfg.objectness_only)

    rejected = reject_false_positive(p1, p2, cfg.reject_threshold) if cfg.reject else np.zeros(len(flat), bool)
    f1, f2 = foreground(p1), foreground(p2)
    onehot = np.eye(c)[[a.label for _, a in flat]]
    if cfg.soft_labels:
        y_bar = soft_label(f1, f2, onehot)
        y_star = sharpen(y_bar, cfg.temperature) if cfg.sharpen else y_bar
    else:
        y_star = onehot

    records = []
    for k, (i, a) in enumerate(flat):
        fallback_refine = False
        if rejected[k]:
            refined, ys = None, None
        elif cfg.refine and cfg.rho != 0:
            refined, fallback_refine = refine_box(box_star[k], t1[k], t2[k], y_star[k], cfg.rho, (width, height))
            ys = y_star[k]
        else:
            refined, ys = box_star[k].copy(), y_star[k]
        diagnostics = {
            "loss_before": float(loss_b[k]),
            "loss_after": float(loss_star[k]),
            "bg1": float(p1[k, BG]),
            "bg2": float(p2[k, BG]),
            "entropy_before": float((entropy(foreground(p1_b[k])) + entropy(foreground(p2_b[k]))) / 2),
            "entropy_after": float((entropy(f1[k]) + entropy(f2[k])) / 2),
            "discrepancy_before": float(discrepancy(p1_b[k], p2_b[k])),
            "step1_fallback": bool(diag is not None and diag["fallback"][k]),
            "step2_fallback": fallback_refine,
        }
        records.append(
            CorrectionRecord(a.id, a.image_id, a.label, a.box.copy(), box_star[k].copy(), refined, ys, bool(rejected[k]), diagnostics)
        )
    model.train(was_training)
    return records


AUDIT_FIELDS = (
    "annotation_id", "image_id", "label", "x1", "y1", "x2", "y2",
    "x1_star", "y1_star", "x2_star", "y2_star",
    "x1_refined", "y1_refined", "x2_refined", "y2_refined",
    "soft_argmax", "soft_max", "rejected",
)


def write_audit_log(records: list[CorrectionRecord], path) -> None:
    """One tab-separated line per box: geometry before/after, labels, rejection flag."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(AUDIT_FIELDS)
        for r in records:
            refined = ["", "", "", ""] if r.box_refined is None else [f"{v:.4f}" for v in r.box_refined]
            soft = ["", ""] if r.soft_label is None else [int(np.argmax(r.soft_label)), f"{np.max(r.soft_label):.4f}"]
            w.writerow(
                [r.annotation_id, r.image_id, r.label]
                + [f"{v:.4f}" for v in r.box]
                + [f"{v:.4f}" for v in r.box_star]
                + refined + soft + [int(r.rejected)]
            )
