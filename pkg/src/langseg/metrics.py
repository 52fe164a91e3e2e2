"""Confusion-matrix metrics (mIoU, pixel accuracy, class-wise IoU) and
dataset evaluation split by scenario."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .decoder import hard_mask
from .errors import ContractError, DataError
from .model import ModelConfig, forward
from .synth import SegSample
from .tensor import ParamStore
from .text_encoder import Vocabulary, tokenize_batch


class ConfusionMatrix:
    """``counts[g, p]`` = number of pixels with ground truth g predicted as p."""

    def __init__(self, classes: int):
        if classes < 1:
            raise ContractError(f"need at least one class, got {classes}")
        self.classes = classes
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            bad = np.argwhere((arr < 0) | (arr >= self.classes))
            if bad.size:
                where = tuple(int(i) for i in bad[0])
                raise DataError(f"{name} class id {arr[where]} at {where} outside 0..{self.classes - 1}")
        flat = gt.astype(np.int64).ravel() * self.classes + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=self.classes ** 2).reshape(self.classes, self.classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise DataError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricReport:
    miou: float
    pixel_accuracy: float
    class_iou: list[float | None]
    pixels: int
    ignored: list[int]
    scenarios: dict[str, "MetricReport"] = field(default_factory=dict)

    @property
    def mean_class_iou(self) -> float:
        """Unweighted mean over present classes (the single class-wise IoU column)."""
        return self.miou

    def to_json(self) -> dict:
        return {
            "mIoU": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "class_iou": self.class_iou,
            "mean_class_iou": self.mean_class_iou,
            "pixels": self.pixels,
            "ignored_classes": self.ignored,
            "scenarios": {k: v.to_json() for k, v in self.scenarios.items()},
        }


def class_iou_fractions(cm: ConfusionMatrix) -> list[Fraction | None]:
    """Exact per-class IoU; None for classes absent from ground truth."""
    out: list[Fraction | None] = []
    rows, cols = cm.counts.sum(axis=1), cm.counts.sum(axis=0)
    for c in range(cm.classes):
        if rows[c] == 0:
            out.append(None)
            continue
        inter = int(cm.counts[c, c])
        out.append(Fraction(inter, int(rows[c] + cols[c]) - inter))
    return out


def metrics(cm: ConfusionMatrix) -> MetricReport:
    if cm.total == 0:
        raise ContractError("confusion matrix is empty")
    fracs = class_iou_fractions(cm)
    present = [f for f in fracs if f is not None]
    miou = float(sum(present, Fraction(0)) / len(present))
    pa = float(Fraction(int(np.trace(cm.counts)), cm.total))
    return MetricReport(
        miou=miou,
        pixel_accuracy=pa,
        class_iou=[None if f is None else float(f) for f in fracs],
        pixels=cm.total,
        ignored=[c for c, f in enumerate(fracs) if f is None],
    )


def predict_hard_masks(params: ParamStore, model_cfg: ModelConfig, samples: Sequence[SegSample],
                       vocab: Vocabulary, batch_size: int = 16) -> list[np.ndarray]:
    frozen = params.frozen()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        ids = tokenize_batch([s.prompt for s in chunk], vocab, model_cfg.max_len)
        probs = forward(frozen, model_cfg, images, ids).probs
        out.extend(hard_mask(probs))
    return out


def evaluate_masks(preds: Sequence[np.ndarray], samples: Sequence[SegSample], classes: int) -> MetricReport:
    overall = ConfusionMatrix(classes)
    per: dict[str, ConfusionMatrix] = {}
    for pred, s in zip(preds, samples):
        overall.accumulate(pred, s.mask)
        per.setdefault(s.scenario, ConfusionMatrix(classes)).accumulate(pred, s.mask)
    report = metrics(overall)
    report.scenarios = {k: metrics(per[k]) for k in sorted(per)}
    return report


def evaluate(params: ParamStore, model_cfg: ModelConfig, samples: Sequence[SegSample], vocab: Vocabulary,
             scenarios: Sequence[str] | None = None, batch_size: int = 16) -> MetricReport:
    """Argmax predictions scored overall and per scenario tag."""
    chosen = [s for s in samples if scenarios is None or s.scenario in scenarios]
    if not chosen:
        raise ContractError(f"no samples match scenario filter {scenarios}")
    preds = predict_hard_masks(params, model_cfg, chosen, vocab, batch_size)
    return evaluate_masks(preds, chosen, model_cfg.classes)
