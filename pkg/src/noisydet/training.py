"""Warm-up followed by alternating annotation correction and SGD updates."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .correction import CorrectionConfig, correct_batch, discrepancy
from .data import Dataset
from .detector import HEAD_IDS, DetectorConfig, TwoHeadDetector, encode

EPS = 1e-12

METRIC_FIELDS = (
    "iteration", "phase", "lr", "loss", "rpn_cls", "rpn_loc",
    "cls1", "loc1", "cls2", "loc2", "divergence", "num_boxes", "rejected", "rpn_only",
)


@dataclass
class TrainConfig:
    total_iters: int = 2000
    warmup_iters: int | None = None  # default: 20% of total_iters
    batch_size: int = 8
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_at: float = 0.8  # fraction of total_iters
    lr_decay: float = 0.1
    beta: float = 1.0  # smooth-L1 threshold for the head box loss
    hflip: bool = True
    correct: bool = True  # False trains the vanilla baseline
    single_head: bool = False  # train head 1 only
    divergence_window: int = 1000
    seed: int = 0
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)

    @property
    def warmup(self) -> int:
        return int(round(0.2 * self.total_iters)) if self.warmup_iters is None else self.warmup_iters


def config_hash(obj) -> str:
    doc = json.dumps(asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj, sort_keys=True, default=str)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


# losses ------------------------------------------------------------------------


def soft_cls_loss(p, target, eps: float = EPS):
    """Cross entropy ``sum_i -target_i log p_i``; ``p`` is clamped below by ``eps``."""
    if isinstance(p, torch.Tensor):
        return -(target * torch.log(p.clamp(min=eps))).sum(-1)
    return -(np.asarray(target) * np.log(np.clip(p, eps, None))).sum(-1)


def soft_cls_loss_from_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Same quantity as :func:`soft_cls_loss` on ``softmax(logits)``, computed stably."""
    return -(target * F.log_softmax(logits, dim=-1)).sum(-1)


def smooth_l1_loc_loss(pred, target, beta: float = 1.0):
    """Elementwise smooth L1 summed over all entries."""
    if isinstance(pred, torch.Tensor):
        d = (pred - target).abs()
        return torch.where(d < beta, 0.5 * d**2 / beta, d - 0.5 * beta).sum()
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    return float(np.where(d < beta, 0.5 * d**2 / beta, d - 0.5 * beta).sum())


# trainer -------------------------------------------------------------------------


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


class Trainer:
    """Owns the model, optimiser, random streams and metric history of one run."""

    def __init__(self, cfg: TrainConfig, det_cfg: DetectorConfig, dataset: Dataset):
        if dataset.pixels is None:
            raise ValueError("training needs image pixels")
        self.cfg = cfg
        self.det_cfg = det_cfg
        self.dataset = dataset
        self.model = TwoHeadDetector(det_cfg, seed=cfg.seed)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
        )
        # RoI sampling streams derive from (seed, head_id); others use streams >= 100
        self.rngs = {
            "roi1": _rng(cfg.seed, 1),
            "roi2": _rng(cfg.seed, 2),
            "data": _rng(cfg.seed, 100),
            "rpn": _rng(cfg.seed, 101),
            "flip": _rng(cfg.seed, 102),
        }
        self.iteration = 0
        self.history: list[dict] = []
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self._by_image = dataset.annotations_by_image()

    @property
    def heads(self) -> tuple[int, ...]:
        return (1,) if self.cfg.single_head else HEAD_IDS

    def lr_at(self, iteration: int) -> float:
        if iteration >= int(self.cfg.lr_decay_at * self.cfg.total_iters):
            return self.cfg.lr * self.cfg.lr_decay
        return self.cfg.lr

    def next_batch(self) -> np.ndarray:
        n = len(self.dataset)
        out = []
        while len(out) < self.cfg.batch_size:
            if self._cursor >= len(self._order):
                self._order = self.rngs["data"].permutation(n)
                self._cursor = 0
            take = min(self.cfg.batch_size - len(out), len(self._order) - self._cursor)
            out.extend(self._order[self._cursor : self._cursor + take].tolist())
            self._cursor += take
        return np.array(out, dtype=np.int64)

    def _load_batch(self, indices: np.ndarray):
        images = self.dataset.pixels[indices].copy()
        width = images.shape[2]
        anns = []
        flips = self.rngs["flip"].random(len(indices)) < 0.5 if self.cfg.hflip else np.zeros(len(indices), bool)
        for k, i in enumerate(indices):
            items = [a.copy() for a in self._by_image[self.dataset.images[i].id]]
            if flips[k]:
                images[k] = images[k, :, ::-1]
                for a in items:
                    a.box = np.array([width - a.box[2], a.box[1], width - a.box[0], a.box[3]])
            anns.append(items)
        return images, anns

    def _divergence(self, feats: torch.Tensor, anns) -> float:
        flat = [(i, a.box) for i, items in enumerate(anns) for a in items]
        if not flat:
            return float("nan")
        with torch.no_grad():
            rois = torch.tensor([[i, *b] for i, b in flat], dtype=torch.float32)
            p1, _ = self.model.head_forward(feats, rois, 1)
            p2, _ = self.model.head_forward(feats, rois, 2)
            return float(discrepancy(p1.double(), p2.double()).mean())

    def train_step(self, indices: np.ndarray | None = None, correct: bool | None = None) -> dict:
        """One mini-batch: optional correction with frozen parameters, then one SGD step."""
        cfg, model = self.cfg, self.model
        if indices is None:
            indices = self.next_batch()
        if correct is None:
            correct = cfg.correct and self.iteration >= cfg.warmup
        phase = "warmup" if self.iteration < cfg.warmup else "train"
        images, anns = self._load_batch(indices)
        with torch.no_grad():
            frozen = model.extract_features(model.preprocess(images))
        divergence = self._divergence(frozen, anns)
        c = model.cfg.num_classes

        n_boxes = sum(len(a) for a in anns)
        n_rejected = 0
        targets = []  # per image: (boxes tensor, label distributions tensor over C)
        if correct:
            cc = cfg.correction
            if cfg.single_head and cc.dual_head:
                cc = CorrectionConfig(**{**asdict(cc), "dual_head": False})
            records = correct_batch(model, images, anns, cc, features=frozen)
            by_image = [[] for _ in anns]
            pos = 0
            for i, items in enumerate(anns):
                for _ in items:
                    by_image[i].append(records[pos])
                    pos += 1
            for recs in by_image:
                kept = [r for r in recs if not r.rejected]
                n_rejected += len(recs) - len(kept)
                boxes = np.array([r.box_refined for r in kept], dtype=np.float32).reshape(-1, 4)
                dists = np.array([r.soft_label for r in kept], dtype=np.float32).reshape(-1, c)
                targets.append((torch.from_numpy(boxes), torch.from_numpy(dists)))
        else:
            for items in anns:
                boxes = np.array([a.box for a in items], dtype=np.float32).reshape(-1, 4)
                dists = np.eye(c, dtype=np.float32)[[a.label for a in items]].reshape(-1, c)
                targets.append((torch.from_numpy(boxes), torch.from_numpy(dists)))
        rpn_only = correct and n_boxes > 0 and n_rejected == n_boxes

        model.train()
        x = model.preprocess(images)
        height, width = x.shape[-2:]
        feats = model.extract_features(x)
        gt_boxes = [t[0] for t in targets]

        logits, deltas = model.rpn(feats)
        idx, lab, tgt = model.rpn_targets(feats, gt_boxes, self.rngs["rpn"])
        rpn_cls = F.binary_cross_entropy_with_logits(logits.reshape(-1)[idx], lab)
        pos = lab > 0
        rpn_loc = smooth_l1_loc_loss(deltas.reshape(-1, 4)[idx][pos], tgt[pos], model.cfg.rpn_beta) / max(len(idx), 1)
        losses = {"rpn_cls": rpn_cls, "rpn_loc": rpn_loc}

        if not rpn_only:
            proposals = model.propose_regions(feats, (width, height), model.cfg.rpn_post_nms_train)
            for h in self.heads:
                sample = model.sample_rois(proposals, gt_boxes, self.rngs[f"roi{h}"])
                cls_logits, raw = model.head_logits(feats, sample.rois, h)
                target = torch.zeros(len(sample.rois), c + 1)
                target[:, 0] = 1.0
                fg = np.flatnonzero(sample.matched >= 0)
                if len(fg):
                    img = sample.rois[fg, 0].long()
                    m = sample.matched[fg]
                    dist = torch.stack([targets[int(i)][1][j] for i, j in zip(img, m)])
                    gtb = torch.stack([targets[int(i)][0][j] for i, j in zip(img, m)])
                    target[fg] = torch.cat([torch.zeros(len(fg), 1), dist], dim=1)
                    cls_idx = torch.argmax(dist, dim=1)
                    reg_t = encode(gtb, sample.rois[fg, 1:]) / model.offset_std
                    reg_p = raw[torch.from_numpy(fg), cls_idx]
                    loc = smooth_l1_loc_loss(reg_p, reg_t, cfg.beta) / len(sample.rois)
                else:
                    loc = raw.sum() * 0.0
                losses[f"cls{h}"] = soft_cls_loss_from_logits(cls_logits, target).mean()
                losses[f"loc{h}"] = loc

        total = sum(losses.values())
        lr = self.lr_at(self.iteration)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        row = {k: 0.0 for k in METRIC_FIELDS}
        row.update({k: float(v.detach()) for k, v in losses.items()})
        row.update(
            iteration=self.iteration, phase=phase, lr=lr, loss=float(total.detach()),
            divergence=divergence, num_boxes=n_boxes, rejected=n_rejected, rpn_only=int(rpn_only),
        )
        self.history.append(row)
        self.iteration += 1
        return row

    def warmup(self, epochs: int) -> None:
        """Plain training on the noisy annotations for ``epochs`` passes over the data."""
        steps = epochs * int(np.ceil(len(self.dataset) / self.cfg.batch_size))
        for _ in range(steps):
            self.train_step(correct=False)

    def run(self, checkpoint_dir=None, checkpoint_every: int = 0, log_every: int = 0) -> list[dict]:
        while self.iteration < self.cfg.total_iters:
            row = self.train_step()
            if log_every and self.iteration % log_every == 0:
                print(
                    f"it {row['iteration']:5d} {row['phase']:7s} loss {row['loss']:.3f} "
                    f"div {row['divergence']:.4f} rej {row['rejected']}/{row['num_boxes']}",
                    flush=True,
                )
            if checkpoint_dir and checkpoint_every and self.iteration % checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"checkpoint_{self.iteration:06d}.pt")
        return self.history

    # persistence ---------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "iteration": self.iteration,
            "rngs": {k: r.bit_generator.state for k, r in self.rngs.items()},
            "order": self._order.copy(),
            "cursor": self._cursor,
            "history": [dict(r) for r in self.history],
            "classes": list(self.dataset.categories),
            "train_config": asdict(self.cfg),
            "detector_config": asdict(self.det_cfg),
            "config_hash": config_hash({"train": asdict(self.cfg), "detector": asdict(self.det_cfg)}),
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.iteration = int(state["iteration"])
        for k, s in state["rngs"].items():
            self.rngs[k].bit_generator.state = s
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._cursor = int(state["cursor"])
        self.history = [dict(r) for r in state["history"]]

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)

    @classmethod
    def from_checkpoint(cls, path, dataset: Dataset) -> "Trainer":
        state = load_checkpoint(path)
        tc = dict(state["train_config"])
        tc["correction"] = CorrectionConfig(**tc["correction"])
        dc = state["detector_config"]
        dc = DetectorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in dc.items()})
        trainer = cls(TrainConfig(**tc), dc, dataset)
        trainer.load_state_dict(state)
        return trainer


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(path) -> tuple[TwoHeadDetector, dict]:
    state = load_checkpoint(path)
    dc = state["detector_config"]
    dc = DetectorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in dc.items()})
    model = TwoHeadDetector(dc)
    model.load_state_dict(state["model"])
    model.eval()
    return model, state


def run(cfg: TrainConfig, det_cfg: DetectorConfig, dataset: Dataset, **kwargs) -> Trainer:
    trainer = Trainer(cfg, det_cfg, dataset)
    trainer.run(**kwargs)
    return trainer


def windowed_divergence(history: list[dict], window: int, start: int = 0) -> np.ndarray:
    """Mean divergence over consecutive ``window``-iteration blocks from ``start``."""
    d = np.array([r["divergence"] for r in history if r["iteration"] >= start], dtype=np.float64)
    d = d[np.isfinite(d)]
    if len(d) == 0:
        return d
    n = int(np.ceil(len(d) / window))
    return np.array([d[i * window : (i + 1) * window].mean() for i in range(n)])


def write_metrics(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_metrics(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({k: (v if k == "phase" else float(v)) for k, v in r.items()})
    return out
