"""Detection metrics (all-points interpolated AP) and correction diagnostics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import iou_matrix, paired_iou

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
INTERPOLATION = "all-points"


def match_detections(pred_boxes, pred_scores, gt_boxes, iou_thresh: float = 0.5, order=None) -> np.ndarray:
    """Greedy matching for one image and one class. Returns a TP flag per prediction.

    Predictions are visited by descending score (``order`` overrides that);
    each truth is matched at most once, to its highest-IoU unmatched partner.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    tp = np.zeros(len(pred_boxes), dtype=bool)
    if len(pred_boxes) == 0 or len(gt_boxes) == 0:
        return tp
    if order is None:
        order = np.argsort(-np.asarray(pred_scores), kind="stable")
    ious = iou_matrix(pred_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in order:
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            tp[i] = True
            taken[j] = True
    return tp


def average_precision(scores, tp, num_truths: int) -> float:
    """Area under the all-points interpolated precision/recall curve.

    ``scores`` and ``tp`` must already be in ranking order. Returns NaN when
    the class has no truths.
    """
    if num_truths == 0:
        return float("nan")
    recall, precision = pr_curve(tp, num_truths)
    return _area(recall, precision)


def pr_curve(tp, num_truths: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / max(num_truths, 1)
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    return recall, precision


def _area(recall: np.ndarray, precision: np.ndarray) -> float:
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def _rank(preds: list[dict], image_ids, cls: int):
    """Pooled predictions of one class, ordered by score then (image id, box) for ties."""
    rows = []
    for k, (p, iid) in enumerate(zip(preds, image_ids)):
        sel = np.flatnonzero(np.asarray(p["labels"]) == cls)
        for j in sel:
            b = np.asarray(p["boxes"][j], dtype=np.float64)
            rows.append((-float(p["scores"][j]), iid, *b.tolist(), k, int(j)))
    rows.sort()
    return rows


@dataclass
class EvalReport:
    per_class_ap: dict[str, dict[str, float]]  # threshold -> class -> AP
    map50: float
    map_range: float
    pr_curves: dict[str, dict[str, list]] = field(default_factory=dict)  # at IoU 0.5
    correction: dict | None = None
    interpolation: str = INTERPOLATION

    def to_json(self) -> dict:
        return {
            "interpolation": self.interpolation,
            "mAP@.5": self.map50,
            "mAP@[.5,.95]": self.map_range,
            "per_class_ap": self.per_class_ap,
            "correction": self.correction,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    def save_pr_curves(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "rank", "recall", "precision"])
            for name, curve in self.pr_curves.items():
                for k, (r, p) in enumerate(zip(curve["recall"], curve["precision"])):
                    w.writerow([name, k, repr(float(r)), repr(float(p))])


def class_aps(preds: list[dict], truths: list[dict], num_classes: int, iou_thresh: float, image_ids=None):
    """AP per class at one IoU threshold, plus each class's PR curve.

    ``preds[i]`` holds ``boxes``, ``scores``, ``labels``; ``truths[i]`` holds
    ``boxes`` and ``labels`` for the same image.
    """
    image_ids = list(range(len(preds))) if image_ids is None else list(image_ids)
    aps, curves = {}, {}
    for c in range(num_classes):
        gts = [np.asarray(t["boxes"]).reshape(-1, 4)[np.asarray(t["labels"]) == c] for t in truths]
        n = int(sum(len(g) for g in gts))
        rows = _rank(preds, image_ids, c)
        tp = np.zeros(len(rows), dtype=bool)
        taken = [np.zeros(len(g), dtype=bool) for g in gts]
        for r, row in enumerate(rows):
            k = row[-2]
            g = gts[k]
            if len(g) == 0:
                continue
            ov = iou_matrix(np.array(row[2:6])[None], g)[0]
            ov[taken[k]] = -1.0
            j = int(np.argmax(ov))
            if ov[j] >= iou_thresh:
                tp[r] = True
                taken[k][j] = True
        aps[c] = average_precision(-np.array([row[0] for row in rows]), tp, n)
        rec, prec = pr_curve(tp, n)
        curves[c] = {"recall": rec.tolist(), "precision": prec.tolist()}
    return aps, curves


def mean_ap(aps: dict[int, float]) -> float:
    vals = [v for v in aps.values() if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def map_range(preds, truths, num_classes: int, thresholds=COCO_THRESHOLDS) -> float:
    return float(np.mean([mean_ap(class_aps(preds, truths, num_classes, t)[0]) for t in thresholds]))


def evaluate_detections(preds, truths, class_names: list[str], image_ids=None) -> EvalReport:
    per_threshold = {}
    curves = {}
    for t in COCO_THRESHOLDS:
        aps, cv = class_aps(preds, truths, len(class_names), t, image_ids)
        per_threshold[f"{t:.2f}"] = {class_names[c]: aps[c] for c in aps}
        if t == 0.5:
            curves = {class_names[c]: cv[c] for c in cv}
    maps = [mean_ap({c: v for c, v in enumerate(per_threshold[f"{t:.2f}"].values())}) for t in COCO_THRESHOLDS]
    return EvalReport(per_threshold, maps[0], float(np.mean(maps)), curves)


def truths_from_dataset(ds) -> list[dict]:
    by_image = ds.annotations_by_image()
    out = []
    for im in ds.images:
        anns = by_image[im.id]
        out.append(
            {
                "boxes": np.array([a.box for a in anns], dtype=np.float64).reshape(-1, 4),
                "labels": np.array([a.label for a in anns], dtype=np.int64),
            }
        )
    return out


def correction_diagnostics(records, clean: dict | None) -> dict | None:
    """Mean IoU of noisy, step-1 and step-2 boxes against the clean boxes, and label statistics.

    ``clean`` maps annotation id to the clean annotation; without it the
    diagnostics are skipped and ``None`` is returned.
    """
    if clean is None:
        print("correction diagnostics skipped: no clean provenance")
        return None
    if not records:
        return {"count": 0}
    clean_boxes = np.stack([clean[r.annotation_id].box for r in records])
    noisy = np.stack([r.box for r in records])
    star = np.stack([r.box_star for r in records])
    kept = [k for k, r in enumerate(records) if not r.rejected]
    refined = np.stack([records[k].box_refined for k in kept]) if kept else np.zeros((0, 4))
    flipped = [k for k, r in enumerate(records) if r.label != clean[r.annotation_id].label]
    fixed = [
        k for k in flipped
        if not records[k].rejected and int(np.argmax(records[k].soft_label)) == clean[records[k].annotation_id].label
    ]
    correct_label = [
        k for k in kept if int(np.argmax(records[k].soft_label)) == clean[records[k].annotation_id].label
    ]
    return {
        "count": len(records),
        "iou_noisy": float(paired_iou(noisy, clean_boxes).mean()),
        "iou_star": float(paired_iou(star, clean_boxes).mean()),
        "iou_refined": float(paired_iou(refined, clean_boxes[kept]).mean()) if kept else float("nan"),
        "iou_noisy_kept": float(paired_iou(noisy[kept], clean_boxes[kept]).mean()) if kept else float("nan"),
        "label_flipped": len(flipped),
        "label_fix_rate": len(fixed) / len(flipped) if flipped else float("nan"),
        "soft_label_accuracy": len(correct_label) / len(kept) if kept else float("nan"),
        # every synthetic annotation covers a real object, so each rejection is a false one
        "false_rejection_rate": 1.0 - len(kept) / len(records),
        "entropy_before": float(np.mean([r.diagnostics.get("entropy_before", np.nan) for r in records])),
        "entropy_after": float(np.mean([r.diagnostics.get("entropy_after", np.nan) for r in records])),
    }
