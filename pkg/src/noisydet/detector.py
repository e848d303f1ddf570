"""A compact two-stage detector with two independently initialised heads.

Shared backbone (stride 8 by default) and region proposal network, then two detection
heads that each classify over ``C + 1`` classes (index 0 is background) and
regress one box offset per foreground class. Region features come from
:func:`noisydet.prroi.prroi_pool`, so head outputs are differentiable with
respect to the box corners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, box_iou, nms

from .prroi import DEFAULT_POOL_SIZE, image_to_feature, prroi_pool

HEAD_IDS = (1, 2)


@dataclass
class DetectorConfig:
    num_classes: int = 4
    channels: int = 64
    stride: int = 8
    anchor_size: float = 32.0
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    rpn_pre_nms: int = 300
    rpn_post_nms_train: int = 100
    rpn_post_nms_test: int = 50
    rpn_nms: float = 0.7
    rpn_beta: float = 1.0 / 9.0
    roi_batch: int = 32
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    pool_size: int = DEFAULT_POOL_SIZE
    hidden: int = 256
    offset_std: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)
    min_size: float = 2.0
    score_thresh: float = 0.05
    det_nms: float = 0.5
    max_detections: int = 100


# box helpers (torch) -------------------------------------------------------------


def encode(boxes: torch.Tensor, refs: torch.Tensor) -> torch.Tensor:
    rw = refs[:, 2] - refs[:, 0]
    rh = refs[:, 3] - refs[:, 1]
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    dx = (boxes[:, 0] + 0.5 * bw - refs[:, 0] - 0.5 * rw) / rw
    dy = (boxes[:, 1] + 0.5 * bh - refs[:, 1] - 0.5 * rh) / rh
    return torch.stack([dx, dy, torch.log(bw / rw), torch.log(bh / rh)], dim=1)


def decode(deltas: torch.Tensor, refs: torch.Tensor) -> torch.Tensor:
    """Apply ``(..., 4)`` offsets to ``(N, 4)`` reference boxes (broadcast over middle dims)."""
    shape = (-1,) + (1,) * (deltas.dim() - 2)
    rw = (refs[:, 2] - refs[:, 0]).reshape(shape)
    rh = (refs[:, 3] - refs[:, 1]).reshape(shape)
    cx = refs[:, 0].reshape(shape) + 0.5 * rw + deltas[..., 0] * rw
    cy = refs[:, 1].reshape(shape) + 0.5 * rh + deltas[..., 1] * rh
    w = rw * torch.exp(deltas[..., 2].clamp(max=4.135))
    h = rh * torch.exp(deltas[..., 3].clamp(max=4.135))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def clip(boxes: torch.Tensor, width: float, height: float) -> torch.Tensor:
    x = boxes[..., 0::2].clamp(0, width)
    y = boxes[..., 1::2].clamp(0, height)
    return torch.stack([x[..., 0], y[..., 0], x[..., 1], y[..., 1]], dim=-1)


# modules -----------------------------------------------------------------------------


def _conv(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(8, cout), nn.ReLU(inplace=True)
    )


class Backbone(nn.Module):
    def __init__(self, channels: int = 64, stride: int = 8):
        super().__init__()
        if stride not in (4, 8):
            raise ValueError(f"stride must be 4 or 8, got {stride}")
        half = channels // 2
        self.body = nn.Sequential(
            _conv(3, half, 2),
            _conv(half, half, 1),
            _conv(half, channels, 2),
            _conv(channels, channels, 2 if stride == 8 else 1),
            _conv(channels, channels, 1),
        )
        self.stride = stride

    def forward(self, x):
        return self.body(x)


class RPN(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, 1)
        self.cls = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, 4 * num_anchors, 1)

    def forward(self, f):
        h = F.relu(self.conv(f))
        n = f.shape[0]
        # (N, H*W*A) logits, (N, H*W*A, 4) deltas; anchor order is (y, x, a)
        logits = self.cls(h).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.reg(h).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return logits, deltas


class DetectionHead(nn.Module):
    """Classifier and per-class box regressor sharing two fully connected layers."""

    def __init__(self, in_features: int, hidden: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, 4 * num_classes)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for layer in (self.fc1, self.fc2):
            fan_in = layer.weight.shape[1]
            bound = (6.0 / fan_in) ** 0.5  # He-uniform for ReLU layers
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()
        with torch.no_grad():
            self.cls.weight.normal_(0.0, 0.01, generator=generator)
            self.cls.bias.zero_()
            self.reg.weight.normal_(0.0, 0.001, generator=generator)
            self.reg.bias.zero_()

    def forward(self, pooled):
        h = F.relu(self.fc1(pooled.flatten(1)))
        h = F.relu(self.fc2(h))
        return self.cls(h), self.reg(h).reshape(-1, self.num_classes, 4)


@dataclass
class RoiSample:
    rois: torch.Tensor  # (R, 5): image index + corners
    matched: np.ndarray  # (R,) index into the image's GT list, -1 for background


class TwoHeadDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.backbone = Backbone(cfg.channels, cfg.stride)
            self.rpn = RPN(cfg.channels, len(cfg.anchor_ratios))
        feat = cfg.channels * cfg.pool_size**2
        self.heads = nn.ModuleList(
            [DetectionHead(feat, cfg.hidden, cfg.num_classes) for _ in HEAD_IDS]
        )
        for head_id, head in zip(HEAD_IDS, self.heads):
            # distinct, reproducible initialisation per head
            head.reset_parameters(torch.Generator().manual_seed(seed * 1000 + head_id))
        self.register_buffer("offset_std", torch.tensor(cfg.offset_std, dtype=torch.float32))
        self._anchor_cache: dict[tuple[int, int], torch.Tensor] = {}

    @property
    def stride(self) -> int:
        return self.cfg.stride

    # features and proposals ----------------------------------------------------------

    @staticmethod
    def preprocess(images: np.ndarray) -> torch.Tensor:
        """``(N, H, W, 3)`` uint8 -> ``(N, 3, H, W)`` float in [-0.5, 0.5]."""
        x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
        return x / 255.0 - 0.5

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image size {w}x{h} is not divisible by stride {self.stride}")
        return self.backbone(images)

    def anchors(self, fh: int, fw: int) -> torch.Tensor:
        key = (fh, fw)
        if key not in self._anchor_cache:
            s = self.stride
            ys, xs = torch.meshgrid(torch.arange(fh), torch.arange(fw), indexing="ij")
            cx = (xs.reshape(-1, 1).float() + 0.5) * s
            cy = (ys.reshape(-1, 1).float() + 0.5) * s
            r = torch.tensor(self.cfg.anchor_ratios)
            aw = self.cfg.anchor_size / torch.sqrt(r)
            ah = self.cfg.anchor_size * torch.sqrt(r)
            a = torch.stack([cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], dim=-1)
            self._anchor_cache[key] = a.reshape(-1, 4)
        return self._anchor_cache[key]

    def propose_regions(self, features: torch.Tensor, image_size: tuple[int, int], post_nms: int | None = None):
        """Top proposals per image as a list of ``(boxes, scores)``, sorted by score."""
        width, height = image_size
        post = self.cfg.rpn_post_nms_test if post_nms is None else post_nms
        with torch.no_grad():
            logits, deltas = self.rpn(features)
            anchors = self.anchors(*features.shape[-2:])
            out = []
            for i in range(features.shape[0]):
                if post <= 0:
                    out.append((features.new_zeros((0, 4)), features.new_zeros(0)))
                    continue
                scores = torch.sigmoid(logits[i])
                boxes = clip(decode(deltas[i], anchors), width, height)
                wh = boxes[:, 2:] - boxes[:, :2]
                keep = (wh >= self.cfg.min_size).all(dim=1)
                boxes, scores = boxes[keep], scores[keep]
                order = torch.argsort(scores, descending=True, stable=True)[: self.cfg.rpn_pre_nms]
                boxes, scores = boxes[order], scores[order]
                keep = nms(boxes, scores, self.cfg.rpn_nms)[:post]
                out.append((boxes[keep], scores[keep]))
        return out

    def rpn_targets(self, features: torch.Tensor, gt_boxes: list[torch.Tensor], rng: np.random.Generator):
        """Sample anchors per image; returns ``(indices, labels, box targets)`` over the flat batch."""
        anchors = self.anchors(*features.shape[-2:])
        na = anchors.shape[0]
        idx_all, lab_all, tgt_all = [], [], []
        for i, gt in enumerate(gt_boxes):
            labels = np.full(na, -1, dtype=np.int64)
            matched = np.zeros(na, dtype=np.int64)
            if len(gt):
                iou = box_iou(anchors, gt)
                best, arg = iou.max(dim=1)
                best, arg = best.numpy(), arg.numpy()
                matched = arg
                labels[best < self.cfg.rpn_bg_iou] = 0
                labels[best >= self.cfg.rpn_fg_iou] = 1
                # every GT keeps its best anchors as positives
                gt_best = iou.max(dim=0).values
                rows, cols = torch.nonzero((iou == gt_best[None]) & (gt_best[None] > 0), as_tuple=True)
                labels[rows.numpy()] = 1
                matched[rows.numpy()] = cols.numpy()
            else:
                labels[:] = 0
            pos = np.flatnonzero(labels == 1)
            neg = np.flatnonzero(labels == 0)
            n_pos = min(len(pos), int(self.cfg.rpn_batch * self.cfg.rpn_pos_fraction))
            pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
            n_neg = min(len(neg), self.cfg.rpn_batch - len(pos))
            neg = rng.choice(neg, n_neg, replace=False)
            sel = np.concatenate([pos, neg]).astype(np.int64)
            lab = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
            tgt = torch.zeros(len(sel), 4)
            if len(pos):
                p = torch.from_numpy(pos.astype(np.int64))
                tgt[: len(pos)] = encode(gt[torch.from_numpy(matched[pos])], anchors[p])
            idx_all.append(torch.from_numpy(sel) + i * na)
            lab_all.append(torch.from_numpy(lab).float())
            tgt_all.append(tgt)
        return torch.cat(idx_all), torch.cat(lab_all), torch.cat(tgt_all)

    # region sampling and heads ---------------------------------------------------------------

    def sample_rois(self, proposals, gt_boxes: list[torch.Tensor], rng: np.random.Generator) -> RoiSample:
        """Draw a foreground/background RoI sample for one head.

        Each head calls this with its own generator, so the two heads train on
        different RoIs. GT boxes are added to the candidate pool.
        """
        cfg = self.cfg
        rois, matched = [], []
        max_fg = int(round(cfg.roi_batch * cfg.roi_fg_fraction))
        for i, ((props, _), gt) in enumerate(zip(proposals, gt_boxes)):
            cand = torch.cat([props, gt]) if len(gt) else props
            if len(gt):
                best, arg = box_iou(cand, gt).max(dim=1)
                best, arg = best.numpy(), arg.numpy()
            else:
                best, arg = np.zeros(len(cand)), np.zeros(len(cand), dtype=np.int64)
            fg = np.flatnonzero(best >= cfg.roi_fg_iou)
            bg = np.flatnonzero(best < cfg.roi_fg_iou)
            n_fg = min(len(fg), max_fg)
            fg = rng.choice(fg, n_fg, replace=False)
            n_bg = min(len(bg), cfg.roi_batch - n_fg)
            bg = rng.choice(bg, n_bg, replace=False)
            sel = np.concatenate([fg, bg]).astype(np.int64)
            m = np.concatenate([arg[fg], np.full(n_bg, -1)]).astype(np.int64)
            boxes = cand[torch.from_numpy(sel)]
            rois.append(torch.cat([torch.full((len(sel), 1), float(i)), boxes], dim=1))
            matched.append(m)
        return RoiSample(torch.cat(rois), np.concatenate(matched))

    def pool(self, features: torch.Tensor, rois: torch.Tensor) -> torch.Tensor:
        feat_rois = torch.cat([rois[:, :1], image_to_feature(rois[:, 1:], self.stride)], dim=1)
        return prroi_pool(features, feat_rois, self.cfg.pool_size)

    def head_logits(self, features: torch.Tensor, rois: torch.Tensor, head_id: int):
        """Raw outputs: class logits ``(R, C+1)`` and normalised offsets ``(R, C, 4)``."""
        return self.heads[head_id - 1](self.pool(features, rois))

    def head_forward(self, features: torch.Tensor, rois: torch.Tensor, head_id: int):
        """Class probabilities ``(R, C+1)`` and per-class box offsets ``(R, C, 4)``."""
        if rois.numel() and not bool(((rois[:, 3] > rois[:, 1]) & (rois[:, 4] > rois[:, 2])).all()):
            raise ValueError("degenerate RoI passed to head_forward")
        logits, raw = self.head_logits(features, rois, head_id)
        return torch.softmax(logits, dim=1), raw * self.offset_std

    # inference -----------------------------------------------------------------------------

    @torch.no_grad()
    def detect(self, images: np.ndarray, ensemble: bool = False) -> list[dict]:
        """Detections per image: ``boxes (K,4)``, ``scores (K,)``, ``labels (K,)`` as numpy."""
        x = self.preprocess(images)
        height, width = x.shape[-2:]
        feats = self.extract_features(x)
        proposals = self.propose_regions(feats, (width, height))
        rois = torch.cat(
            [torch.cat([torch.full((len(p), 1), float(i)), p], dim=1) for i, (p, _) in enumerate(proposals)]
        )
        if len(rois) == 0:
            empty = {"boxes": np.zeros((0, 4)), "scores": np.zeros(0), "labels": np.zeros(0, dtype=np.int64)}
            return [dict(empty) for _ in proposals]
        probs, offsets = self.head_forward(feats, rois, 1)
        if ensemble:
            p2, t2 = self.head_forward(feats, rois, 2)
            probs, offsets = (probs + p2) / 2, (offsets + t2) / 2
        boxes = clip(decode(offsets, rois[:, 1:]), width, height)  # (R, C, 4)
        c = self.cfg.num_classes
        results = []
        for i in range(len(proposals)):
            sel = rois[:, 0] == i
            b = boxes[sel].reshape(-1, 4)
            s = probs[sel][:, 1:].reshape(-1)
            lab = torch.arange(c).repeat(int(sel.sum()))
            wh = b[:, 2:] - b[:, :2]
            keep = (s > self.cfg.score_thresh) & (wh >= 1.0).all(dim=1)
            b, s, lab = b[keep], s[keep], lab[keep]
            keep = batched_nms(b, s, lab, self.cfg.det_nms)[: self.cfg.max_detections]
            results.append(
                {
                    "boxes": b[keep].double().numpy(),
                    "scores": s[keep].double().numpy(),
                    "labels": lab[keep].numpy(),
                }
            )
        return results


def predict_dataset(model: TwoHeadDetector, pixels: np.ndarray, ensemble: bool = False, batch_size: int = 16):
    model.eval()
    out = []
    for start in range(0, len(pixels), batch_size):
        out.extend(model.detect(pixels[start : start + batch_size], ensemble=ensemble))
    return out
