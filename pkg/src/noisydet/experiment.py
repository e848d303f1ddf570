"""Experiment configs, named training variants and an end-to-end runner.

A run directory holds ``config.json`` (the resolved config and its hash),
``metrics.csv``, ``checkpoint.pt``, ``report.json``, ``pr_curves.csv`` and,
when clean provenance exists, ``correction.json`` plus ``audit.tsv``.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .correction import CorrectionConfig, correct_batch, write_audit_log
from .data import Dataset, SyntheticSpec, load_annotations, synthesize_dataset
from .detector import DetectorConfig, TwoHeadDetector, predict_dataset
from .evaluation import EvalReport, correction_diagnostics, evaluate_detections, truths_from_dataset
from .noise import NoiseSpec, inject_noise
from .training import TrainConfig, Trainer, config_hash, write_metrics

OUTPUT_ROOT_ENV = "NOISYDET_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

VARIANTS = ("vanilla", "cabbc_only", "objectness_only", "single_head", "dual_head", "full")

# toy benchmark budget: about five minutes per run on one CPU core
TOY_ITERS = 1500
TOY_LR = 0.01


@dataclass
class DataConfig:
    train_images: int = 400
    test_images: int = 100
    image_size: int = 128
    object_sizes: tuple[int, int] = (20, 48)
    max_objects: int = 4
    train_seed: int = 1
    test_seed: int = 2
    # COCO-style files replace the synthetic generator when given
    train_annotations: str | None = None
    train_image_dir: str | None = None
    test_annotations: str | None = None
    test_image_dir: str | None = None


@dataclass
class ExperimentConfig:
    name: str = "run"
    variant: str = "full"
    ensemble: bool = False  # average both heads at test time
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    output_dir: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("name")
        return config_hash(d)

    def run_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / self.name


# config parsing -----------------------------------------------------------------------


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ValueError(f"{where}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kwargs[k] = _build(t, v, f"{where}.{k}")
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        elif t is float and isinstance(v, int) and not isinstance(v, bool):
            kwargs[k] = float(v)  # so 40 and 40.0 hash alike
        else:
            kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "config")


def load_config(path) -> ExperimentConfig:
    """Read a YAML or JSON experiment config (JSON is valid YAML)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    doc = {"config": cfg.to_dict(), "config_hash": cfg.hash()}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


# variants ------------------------------------------------------------------------------


def variant_train_config(train: TrainConfig, variant: str) -> TrainConfig:
    """Training config for a named ablation, keeping the hyper-parameters of ``train``."""
    cc = train.correction
    if variant == "vanilla":
        return replace(train, correct=False, single_head=False)
    if variant == "full":
        return replace(train, correct=True, single_head=False)
    if variant == "cabbc_only":
        return replace(train, correct=True, single_head=False,
                       correction=replace(cc, cabbc=True, soft_labels=False, refine=False, objectness_only=False))
    if variant == "objectness_only":
        return replace(train, correct=True, single_head=False,
                       correction=replace(cc, cabbc=True, soft_labels=False, refine=False, objectness_only=True))
    if variant == "dual_head":
        return replace(train, correct=True, single_head=False, correction=replace(cc, cabbc=False))
    if variant == "single_head":
        return replace(train, correct=True, single_head=True, correction=replace(cc, cabbc=False, dual_head=False))
    raise ValueError(f"unknown variant {variant!r}")


# datasets --------------------------------------------------------------------------------


def _synthetic(data: DataConfig, n: int, seed: int, num_classes: int) -> Dataset:
    spec = SyntheticSpec(
        num_images=n, image_size=data.image_size, min_size=data.object_sizes[0],
        max_size=data.object_sizes[1], max_objects=data.max_objects, seed=seed,
    )
    if len(spec.classes) != num_classes:
        raise ValueError(f"detector has {num_classes} classes but the generator draws {len(spec.classes)}")
    return synthesize_dataset(spec)


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Noisy training set (with clean provenance when synthesised) and clean test set."""
    d, c = cfg.data, cfg.detector.num_classes
    if d.train_annotations:
        train = load_annotations(d.train_annotations, d.train_image_dir)
        if cfg.noise.label_noise or cfg.noise.bbox_noise:
            train = inject_noise(train, cfg.noise)
    else:
        train = inject_noise(_synthetic(d, d.train_images, d.train_seed, c), cfg.noise)
    if d.test_annotations:
        test = load_annotations(d.test_annotations, d.test_image_dir)
    else:
        test = _synthetic(d, d.test_images, d.test_seed, c)
    return train, test


# running ----------------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: EvalReport
    ensemble_report: EvalReport
    correction: dict | None
    history: list[dict]
    run_dir: Path | None = None

    @property
    def map50(self) -> float:
        return (self.ensemble_report if self.config.ensemble else self.report).map50

    def summary(self) -> dict:
        return {
            "variant": self.config.variant,
            "mAP@.5": self.report.map50,
            "mAP@[.5,.95]": self.report.map_range,
            "ensemble_mAP@.5": self.ensemble_report.map50,
            "ensemble_mAP@[.5,.95]": self.ensemble_report.map_range,
            "correction": self.correction,
        }


def correct_dataset(model: TwoHeadDetector, ds: Dataset, cc: CorrectionConfig, batch_size: int = 16):
    """Run both correction steps over a whole dataset with the model held fixed."""
    by_image = ds.annotations_by_image()
    records = []
    for start in range(0, len(ds), batch_size):
        ims = ds.images[start : start + batch_size]
        records += correct_batch(model, ds.pixels[start : start + len(ims)], [by_image[im.id] for im in ims], cc)
    return records


def evaluate_model(model: TwoHeadDetector, test: Dataset, ensemble: bool) -> EvalReport:
    preds = predict_dataset(model, test.pixels, ensemble=ensemble)
    return evaluate_detections(preds, truths_from_dataset(test), test.categories)


def run_experiment(cfg: ExperimentConfig, write: bool = True, log_every: int = 0) -> ExperimentResult:
    train_ds, test_ds = build_datasets(cfg)
    tcfg = variant_train_config(cfg.train, cfg.variant)
    trainer = Trainer(tcfg, cfg.detector, train_ds)
    trainer.run(log_every=log_every)
    model = trainer.model
    report = evaluate_model(model, test_ds, ensemble=False)
    ens = evaluate_model(model, test_ds, ensemble=True)

    diag, records = None, []
    if train_ds.clean is not None:
        # correction quality of the trained model on its own training annotations
        cc = tcfg.correction if tcfg.correct else replace(tcfg.correction, soft_labels=False, refine=False)
        if tcfg.single_head:
            cc = replace(cc, dual_head=False)
        records = correct_dataset(model, train_ds, cc)
        diag = correction_diagnostics(records, train_ds.clean)

    result = ExperimentResult(cfg, report, ens, diag, trainer.history)
    if write:
        out = cfg.run_dir()
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")
        write_metrics(trainer.history, out / "metrics.csv")
        trainer.save(out / "checkpoint.pt")
        report.save(out / "report.json")
        ens.save(out / "report_ensemble.json")
        report.save_pr_curves(out / "pr_curves.csv")
        if diag is not None:
            (out / "correction.json").write_text(json.dumps(diag, indent=1, sort_keys=True))
            write_audit_log(records, out / "audit.tsv")
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=1, sort_keys=True, default=float))
        result.run_dir = out
    return result


def alpha_for_noise(bbox_noise: float) -> float:
    """Box step size scaled with the injected box noise: 0 -> 0, 20 -> 100, 40 -> 200."""
    return 5.0 * bbox_noise


def toy_config(variant: str, label_noise: float, bbox_noise: float, seed: int = 0,
               iters: int = TOY_ITERS, lr: float = TOY_LR, **correction) -> ExperimentConfig:
    """Synthetic-shapes benchmark config used by the acceptance suite and the scripts."""
    cc = CorrectionConfig(alpha=alpha_for_noise(bbox_noise), **correction)
    cfg = ExperimentConfig(
        name=f"{variant}_nl{label_noise:g}_nb{bbox_noise:g}_s{seed}",
        variant=variant,
        noise=NoiseSpec(label_noise, bbox_noise, 0),
        train=TrainConfig(total_iters=iters, lr=lr, correction=cc),
    )
    return seeded(cfg, seed)


def seeded(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same experiment with training, noise and data seeds all shifted by ``seed``."""
    return replace(
        cfg,
        noise=replace(cfg.noise, seed=cfg.noise.seed + seed),
        train=replace(cfg.train, seed=cfg.train.seed + seed),
        data=replace(cfg.data, train_seed=cfg.data.train_seed + 100 * seed, test_seed=cfg.data.test_seed + 100 * seed),
    )


def mean_over(results: list[ExperimentResult], key) -> float:
    return float(np.mean([key(r) for r in results]))
