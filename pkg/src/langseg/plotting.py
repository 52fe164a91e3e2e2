"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import CSV_FIELDS, LossBreakdown  # noqa: E402
from .metrics import MetricReport  # noqa: E402
from .synth import NUM_CLASSES, SegSample  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def loss_curves(log: Sequence[tuple[int, LossBreakdown]], path) -> Path:
    steps = [s for s, _ in log]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name in CSV_FIELDS:
        ax.plot(steps, [getattr(b, name) for _, b in log], label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training losses")
    return _save(fig, path)


def metric_bars(rows: Sequence[dict], path, label_key: str = "variant", title: str = "") -> Path:
    """Grouped bars of mIoU / PA / mean class IoU, one group per row."""
    keys = ("mIoU", "pixel_accuracy", "mean_class_iou")
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4.5, 1.6 * len(rows)), 3.6))
    for i, k in enumerate(keys):
        ax.bar(x + (i - 1) * 0.26, [r[k] for r in rows], width=0.26, label=k)
    ax.set_xticks(x, [r[label_key] for r in rows], rotation=15, fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def scenario_rows(report: MetricReport) -> list[dict]:
    return [{"scenario": name, "mIoU": r.miou, "pixel_accuracy": r.pixel_accuracy,
             "mean_class_iou": r.mean_class_iou} for name, r in report.scenarios.items()]


def scenario_bars(report: MetricReport, path) -> Path:
    return metric_bars(scenario_rows(report), path, "scenario", "per-scenario scores")


def mask_examples(samples: Sequence[SegSample], preds: Sequence[np.ndarray], path, count: int = 4) -> Path:
    """Image, ground truth and prediction side by side."""
    count = max(1, min(count, len(samples)))
    fig, axes = plt.subplots(count, 3, figsize=(6.6, 2.2 * count), squeeze=False)
    for row, (s, p) in enumerate(zip(samples[:count], preds[:count])):
        axes[row, 0].imshow(np.moveaxis(s.image, 0, -1), interpolation="nearest")
        axes[row, 1].imshow(s.mask, cmap="tab20", vmin=0, vmax=NUM_CLASSES, interpolation="nearest")
        axes[row, 2].imshow(p, cmap="tab20", vmin=0, vmax=NUM_CLASSES, interpolation="nearest")
        axes[row, 0].set_ylabel(s.scenario, fontsize=8)
        for ax in axes[row]:
            ax.set_xticks([])
            ax.set_yticks([])
    for ax, title in zip(axes[0], ("image", "ground truth", "prediction")):
        ax.set_title(title, fontsize=9)
    return _save(fig, path)
