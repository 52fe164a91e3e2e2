"""Training objectives: mask likelihood, pixel cross-entropy, image-text
triplet alignment, per-level deep supervision, and their weighted sum."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

NORM_FLOOR = 1e-12
CSV_FIELDS = ("gen", "triplet", "seg", "multi_scale", "total")


@dataclass(frozen=True)
class LossWeights:
    gen: float = 0.5
    triplet: float = 1.0
    seg: float = 1.0
    multi_scale: float = 0.25
    margin: float = 0.5
    eps: float = 1e-7

    def validate(self) -> "LossWeights":
        for name in ("gen", "triplet", "seg", "multi_scale"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be a finite non-negative number, got {v}")
        if not self.margin > 0:
            raise ConfigError(f"triplet margin must be positive, got {self.margin}")
        if not 0 < self.eps < 1e-3:
            raise ConfigError(f"probability floor must lie in (0, 1e-3), got {self.eps}")
        return self

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return self.gen, self.triplet, self.seg, self.multi_scale


@dataclass(frozen=True)
class LossBreakdown:
    gen: float
    triplet: float
    seg: float
    multi_scale: float
    total: float

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in CSV_FIELDS]

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _check_labels(probs: Tensor, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.shape != probs.shape[:-3] + probs.shape[-2:]:
        raise DimensionError(f"mask shape {gt.shape} does not match prediction {probs.shape}")
    classes = probs.shape[-3]
    bad = np.argwhere((gt < 0) | (gt >= classes))
    if bad.size:
        where = tuple(int(i) for i in bad[0])
        raise DataError(f"class id {gt[where]} at pixel {where} outside 0..{classes - 1}")
    return gt.astype(np.int64)


def _mean_nll(probs: Tensor, gt, eps: float) -> Tensor:
    gt = _check_labels(probs, gt)
    picked = T.gather_classes(probs, gt)
    return -T.log(T.clip_min(picked, eps)).mean()


def seg_ce(probs: Tensor, gt, eps: float = 1e-7) -> Tensor:
    """Pixel-averaged cross-entropy, -mean(log max(p[gt], eps))."""
    return _mean_nll(probs, gt, eps)


def gen_nll(probs: Tensor, gt, eps: float = 1e-7) -> Tensor:
    """Negative log-likelihood of the ground-truth mask under a per-pixel
    factorized P(M | I, L). Numerically the same estimator as seg_ce."""
    return _mean_nll(probs, gt, eps)


def cosine_distance(u: Tensor, v: Tensor) -> Tensor:
    """1 - cos(u, v) along the last axis; 1 when either norm is below 1e-12."""
    if u.shape != v.shape:
        raise DimensionError(f"cosine distance needs equal shapes, got {u.shape} and {v.shape}")
    dot = (u * v).sum(axis=-1)
    nu2, nv2 = (u * u).sum(axis=-1), (v * v).sum(axis=-1)
    ok = ((np.sqrt(nu2.data) >= NORM_FLOOR) & (np.sqrt(nv2.data) >= NORM_FLOOR)).astype(np.float64)
    denom = T.sqrt(nu2 * nv2 * ok + (1.0 - ok))
    return 1.0 - dot / denom * ok


def triplet_from_distances(d_pos, d_neg, margin: float) -> Tensor:
    return T.relu(T.constant(d_pos) - d_neg + margin)


def triplet(pos_image: Tensor, pos_text: Tensor, neg_image: Tensor, neg_text: Tensor,
            margin: float = 0.5) -> Tensor:
    """max(0, d(pos pair) - d(neg pair) + margin), averaged over a leading batch axis."""
    loss = triplet_from_distances(cosine_distance(pos_image, pos_text),
                                  cosine_distance(neg_image, neg_text), margin)
    return loss.mean() if loss.ndim else loss


def in_batch_triplet(image_embed: Tensor, text_embed: Tensor, margin: float = 0.5) -> Tensor:
    """Negatives pair each image with the next sample's text (cyclic)."""
    n = image_embed.shape[0]
    nxt = np.roll(np.arange(n), -1)
    return triplet(image_embed, text_embed, image_embed, T.take_rows(text_embed, nxt), margin)


def downsample_mask(gt: np.ndarray, level: int) -> np.ndarray:
    step = 2 ** level
    return np.asarray(gt)[..., ::step, ::step]


def multi_scale_loss(level_probs: Sequence[Tensor], gt, eps: float = 1e-7) -> Tensor:
    """Mean over levels of seg_ce against the nearest-downsampled mask."""
    if not level_probs:
        raise DimensionError("multi_scale_loss needs at least one level")
    total = None
    for k, p in enumerate(level_probs):
        term = seg_ce(p, downsample_mask(gt, k), eps)
        total = term if total is None else total + term
    return total * (1.0 / len(level_probs))


def total_loss(components: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """λ-weighted sum of the four components plus a float breakdown."""
    weights.validate()
    total = None
    for name, lam in zip(("gen", "triplet", "seg", "multi_scale"), weights.lambdas):
        term = T.constant(components[name]) * lam
        total = term if total is None else total + term
    values = {k: T.constant(components[k]).item() for k in ("gen", "triplet", "seg", "multi_scale")}
    return total, LossBreakdown(total=total.item(), **values)


def weights_from_dict(d: dict) -> LossWeights:
    known = {f.name for f in fields(LossWeights)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
    return LossWeights(**d).validate()
