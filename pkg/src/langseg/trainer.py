"""Adam training loop with augmentation, loss schedules and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ArtifactMismatchError, ConfigError, FormatError, NumericError
from .losses import CSV_FIELDS, LossBreakdown, LossWeights, total_loss
from .model import ModelConfig, forward, loss_terms
from .synth import SegSample
from .tensor import ParamStore, backward, read_tensor, write_tensor
from .text_encoder import Vocabulary, tokenize_batch

log = logging.getLogger(__name__)

SCHEDULES = ("joint", "alternating")
# alternating schedule: (gen, triplet, seg, multi_scale) switched on per phase
PHASES = ((True, False, False, True), (False, True, False, False), (False, False, True, False))
LOG_HEADER = ("step",) + CSV_FIELDS


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    crop: bool = True
    jitter: bool = True
    crop_fraction: float = 7 / 8
    jitter_range: tuple[float, float] = (0.8, 1.2)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 7
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    schedule: str = "joint"
    checkpoint_every: int = 0
    clip_norm: float = 10.0

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2 for in-batch negatives, got {self.batch_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.checkpoint_every < 0 or self.clip_norm <= 0:
            raise ConfigError("checkpoint_every must be >= 0 and clip_norm positive")
        a = self.augment
        if not 0 < a.crop_fraction <= 1 or not 0 < a.jitter_range[0] <= a.jitter_range[1]:
            raise ConfigError("crop_fraction must lie in (0, 1] and jitter_range be an increasing positive pair")
        self.loss.validate()
        return self


# ---------------------------------------------------------------- augmentation

def hflip(sample: SegSample) -> SegSample:
    return replace(sample, image=sample.image[:, :, ::-1].copy(), mask=sample.mask[:, ::-1].copy())


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def augment(sample: SegSample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> SegSample:
    """Random horizontal flip, crop-and-resize-back, and per-channel jitter.

    Random numbers are always drawn in the same order whatever the toggles,
    so the stream stays aligned across configurations.
    """
    _, h, w = sample.image.shape
    do_flip = rng.random() < 0.5
    ch, cw = max(1, round(h * cfg.crop_fraction)), max(1, round(w * cfg.crop_fraction))
    y0, x0 = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
    scales = rng.uniform(cfg.jitter_range[0], cfg.jitter_range[1], size=3)

    out = hflip(sample) if cfg.flip and do_flip else sample
    image, mask = out.image, out.mask
    if cfg.crop and (ch, cw) != (h, w):
        image = T.bilinear_resize(T.Tensor(image[:, y0:y0 + ch, x0:x0 + cw]), h, w).data
        mask = mask[y0:y0 + ch, x0:x0 + cw][_nearest_index(ch, h)[:, None], _nearest_index(cw, w)[None, :]]
    if cfg.jitter:
        image = np.clip(image * scales[:, None, None], 0.0, 1.0)
    return replace(out, image=image, mask=mask)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "AdamState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()}, 0)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for _, g in sorted(params.grads.items()))))
    if norm > max_norm:
        scale = max_norm / norm
        for g in params.grads.values():
            g *= scale
    return norm


def adam_step(params: ParamStore, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for name in params.names():
        if not np.all(np.isfinite(params.grads[name])):
            raise NumericError(f"non-finite gradient in parameter {name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, value in params.items():
        g = params.grads[name]
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        params.set_value(name, value.data - lr * (m / c1) / (np.sqrt(v / c2) + eps))
    params.zero_grad()


# ---------------------------------------------------------------- batching

def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for 0-based ``step``: per-epoch seeded permutations, concatenated."""
    out = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset:offset + take].tolist())
        pos += take
    return np.asarray(out, dtype=np.int64)


def collate(samples: Sequence[SegSample], vocab: Vocabulary, max_len: int):
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    ids = tokenize_batch([s.prompt for s in samples], vocab, max_len)
    return images, ids, masks


def scheduled_weights(weights: LossWeights, schedule: str, step: int) -> LossWeights:
    if schedule == "joint":
        return weights
    on = PHASES[step % len(PHASES)]
    lam = [lam if keep else 0.0 for lam, keep in zip(weights.lambdas, on)]
    return replace(weights, gen=lam[0], triplet=lam[1], seg=lam[2], multi_scale=lam[3])


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"LSCK v1\n"


@dataclass
class Checkpoint:
    params: ParamStore
    adam: AdamState
    step: int
    config_hash: str
    model: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        names = self.params.names()
        header = {"step": self.step, "config_hash": self.config_hash, "adam_t": self.adam.t,
                  "model": self.model, "names": names}
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for n in names:
            write_tensor(buf, self.params[n].data)
            write_tensor(buf, self.adam.m[n])
            write_tensor(buf, self.adam.v[n])
        path = Path(path)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path, expect_hash: str | None = None) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing checkpoint: {path}")
        with open(path, "rb") as fh:
            if fh.readline() != CKPT_MAGIC:
                raise FormatError(f"{path}: not a checkpoint file")
            try:
                header = json.loads(fh.readline().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise FormatError(f"{path}: corrupt checkpoint header") from None
            params, m, v = ParamStore(), {}, {}
            for n in header["names"]:
                params.add(n, read_tensor(fh))
                m[n], v[n] = read_tensor(fh), read_tensor(fh)
        if expect_hash is not None and header["config_hash"] != expect_hash:
            raise ArtifactMismatchError(
                f"{path}: checkpoint config hash {header['config_hash']} != expected {expect_hash}")
        return cls(params, AdamState(m, v, header["adam_t"]), header["step"], header["config_hash"],
                   header.get("model", {}))


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    params: ParamStore
    adam: AdamState
    step: int
    log: list[tuple[int, LossBreakdown]]

    def checkpoint(self, model_cfg: ModelConfig) -> Checkpoint:
        return Checkpoint(self.params, self.adam, self.step, model_cfg.digest(), asdict(model_cfg))


def write_log(path, rows: Sequence[tuple[int, LossBreakdown]], append: bool = False) -> None:
    path = Path(path)
    fresh = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)
        for step, b in rows:
            writer.writerow([step] + [repr(x) for x in b.as_row()])


def train(cfg: TrainConfig, dataset: Sequence[SegSample], params: ParamStore, model_cfg: ModelConfig,
          vocab: Vocabulary, *, adam: AdamState | None = None, start_step: int = 0, steps: int | None = None,
          out_dir=None, on_step: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Run ``steps`` optimization steps (default ``cfg.steps - start_step``).

    Batch order and augmentation depend only on ``(cfg.seed, step)``, so a
    run resumed from a checkpoint replays exactly the uninterrupted run.
    When ``out_dir`` is given, ``train_log.csv`` and ``ckpt_<step>.bin`` are
    written there.
    """
    cfg.validate()
    if not dataset:
        raise ConfigError("training dataset is empty")
    adam = adam or AdamState.zeros_like(params)
    end = cfg.steps if steps is None else start_step + steps
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_log(out / "train_log.csv", [], append=start_step > 0)
    history: list[tuple[int, LossBreakdown]] = []
    for step in range(start_step, end):
        idx = batch_indices(len(dataset), cfg.batch_size, step, cfg.seed)
        aug_rng = np.random.default_rng([cfg.seed, step, 1])
        batch = [augment(dataset[i], aug_rng, cfg.augment) for i in idx]
        images, ids, masks = collate(batch, vocab, model_cfg.max_len)

        terms = loss_terms(forward(params, model_cfg, images, ids), masks, cfg.loss)
        _, breakdown = total_loss(terms, cfg.loss)
        if not np.isfinite(breakdown.total):
            raise NumericError(f"non-finite loss at step {step + 1}: {breakdown.as_dict()}")
        objective, _ = total_loss(terms, scheduled_weights(cfg.loss, cfg.schedule, step))

        params.zero_grad()
        backward(objective, params)
        clip_grad_norm(params, cfg.clip_norm)
        adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

        history.append((step + 1, breakdown))
        if out is not None:
            write_log(out / "train_log.csv", [(step + 1, breakdown)], append=True)
        if on_step is not None:
            on_step(step + 1, breakdown)
        if (step + 1) % 100 == 0:
            log.info("step %d total %.4f seg %.4f", step + 1, breakdown.total, breakdown.seg)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 != end:
            TrainResult(params, adam, step + 1, history).checkpoint(model_cfg).save(out / f"ckpt_{step + 1}.bin")
    result = TrainResult(params, adam, end, history)
    if out is not None:
        result.checkpoint(model_cfg).save(out / f"ckpt_{end}.bin")
    return result
