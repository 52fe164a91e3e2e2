"""Train-and-evaluate helpers and the four-variant ablation matrix."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .metrics import MetricReport, evaluate
from .model import ModelConfig, init_params
from .synth import SegSample
from .tensor import ParamStore
from .text_encoder import Vocabulary
from .trainer import TrainResult, train

VARIANTS = ("full", "no_language_loss", "no_multi_scale", "no_language_guidance")
TABLE_FIELDS = ("variant", "mIoU", "pixel_accuracy", "mean_class_iou")


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    """``cfg`` with one mechanism removed."""
    if variant == "full":
        return cfg
    if variant == "no_language_loss":
        return replace(cfg, lambda_triplet=0.0)
    if variant == "no_multi_scale":
        return replace(cfg, levels=1, lambda_multi_scale=0.0)
    if variant == "no_language_guidance":
        return replace(cfg, use_language=False, lambda_triplet=0.0)
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class Fitted:
    params: ParamStore
    model: ModelConfig
    result: TrainResult


def fit(cfg: RunConfig, train_set: Sequence[SegSample], vocab: Vocabulary, out_dir=None) -> Fitted:
    cfg.validate()
    model = cfg.model_config(len(vocab)).validate()
    params = init_params(model, cfg.param_seed)
    result = train(cfg.train_config(), train_set, params, model, vocab, out_dir=out_dir)
    return Fitted(params, model, result)


@dataclass
class AblationRun:
    variant: str
    seed: int
    report: MetricReport
    fitted: Fitted


def run_ablation(cfg: RunConfig, train_set: Sequence[SegSample], test_set: Sequence[SegSample],
                 vocab: Vocabulary, variants: Sequence[str] = VARIANTS, seeds: Sequence[int] | None = None,
                 out_dir=None) -> list[AblationRun]:
    """Train every variant for every seed from identical data and score the
    held-out split."""
    seeds = [cfg.seed] if seeds is None else list(seeds)
    runs = []
    for variant in variants:
        for seed in seeds:
            vcfg = replace(variant_config(cfg, variant), seed=seed)
            sub = None if out_dir is None else Path(out_dir) / f"{variant}_seed{seed}"
            fitted = fit(vcfg, train_set, vocab, sub)
            runs.append(AblationRun(variant, seed, evaluate(fitted.params, fitted.model, test_set, vocab), fitted))
    return runs


def ablation_table(runs: Sequence[AblationRun]) -> list[dict]:
    """One row per variant, metrics averaged over seeds, in first-seen order."""
    order = list(dict.fromkeys(r.variant for r in runs))
    rows = []
    for v in order:
        reps = [r.report for r in runs if r.variant == v]
        rows.append({
            "variant": v,
            "mIoU": float(np.mean([r.miou for r in reps])),
            "pixel_accuracy": float(np.mean([r.pixel_accuracy for r in reps])),
            "mean_class_iou": float(np.mean([r.mean_class_iou for r in reps])),
        })
    return rows


def write_table(path, rows: Sequence[dict], fields: Sequence[str] = TABLE_FIELDS) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path
