"""Run configuration: a flat ``config.json`` plus command-line overlays."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .text_encoder import Vocabulary, default_vocabulary
from .trainer import AugmentConfig, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str | None = None
    test_dataset: str | None = None
    holdout_fraction: float = 0.2
    vocab: str | None = None
    out_dir: str = "runs/default"
    # model
    height: int = 64
    width: int = 64
    levels: int = 3
    classes: int = 13
    features: int = 32
    text_dim: int = 64
    max_len: int = 32
    use_language: bool = True
    init_seed: int | None = None
    # optimization
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 7
    schedule: str = "joint"
    checkpoint_every: int = 0
    clip_norm: float = 10.0
    # losses
    lambda_gen: float = 0.5
    lambda_triplet: float = 1.0
    lambda_seg: float = 1.0
    lambda_multi_scale: float = 0.25
    margin: float = 0.5
    eps: float = 1e-7
    # augmentation
    augment_flip: bool = True
    augment_crop: bool = True
    augment_jitter: bool = True
    crop_fraction: float = 7 / 8

    # ------------------------------------------------------------ builders

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_gen, self.lambda_triplet, self.lambda_seg, self.lambda_multi_scale,
                           self.margin, self.eps)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, steps=self.steps, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, seed=self.seed, loss=self.loss_weights(),
            augment=AugmentConfig(self.augment_flip, self.augment_crop, self.augment_jitter, self.crop_fraction),
            schedule=self.schedule, checkpoint_every=self.checkpoint_every, clip_norm=self.clip_norm)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.load(self.vocab) if self.vocab else default_vocabulary()

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        size = len(self.vocabulary()) if vocab_size is None else vocab_size
        return ModelConfig(self.height, self.width, self.levels, self.features, self.text_dim, self.classes,
                           size, self.max_len, self.use_language)

    @property
    def param_seed(self) -> int:
        return self.seed if self.init_seed is None else self.init_seed

    def validate(self) -> "RunConfig":
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError(f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}")
        self.train_config().validate()
        # vocabulary size is checked when the vocabulary file is read
        self.model_config(vocab_size=2).validate()
        return self

    def to_json(self) -> dict:
        return asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = FIELD_TYPES[key]
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"{key} may not be null")
    base = kind.split("|")[0].strip()
    try:
        if base == "bool":
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if base == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} as {base}") from None


def from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    unknown = sorted(set(data) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return replace(base or RunConfig(), **{k: _coerce(k, v) for k, v in data.items()})


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read ``config.json`` and apply ``overrides``; relative data paths
    resolve against the config file's directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key in ("dataset", "test_dataset", "vocab", "out_dir"):
        if isinstance(data.get(key), str) and not Path(data[key]).is_absolute():
            data[key] = str(path.parent / data[key])
    cfg = from_dict(data)
    return from_dict(overrides, cfg) if overrides else cfg


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return path
