"""Full segmentation model: parameter layout, initialization and the batched
forward pass that feeds every loss term."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .decoder import class_logits, decode, init_decoder_params
from .errors import ConfigError
from .image_encoder import check_divisible, encode_image, glorot_uniform, init_image_params
from .losses import LossBreakdown, LossWeights, gen_nll, in_batch_triplet, multi_scale_loss, seg_ce, total_loss
from .tensor import ParamStore, Tensor
from .text_encoder import DEFAULT_MAX_LEN, encode_text, init_text_params


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    levels: int = 3
    features: int = 32
    text_dim: int = 64
    classes: int = 13
    vocab_size: int = 15
    max_len: int = DEFAULT_MAX_LEN
    use_language: bool = True

    def validate(self) -> "ModelConfig":
        for name in ("height", "width", "levels", "features", "text_dim", "classes", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ConfigError("vocabulary needs at least the PAD and UNK entries")
        try:
            check_divisible(self.height, self.width, self.levels)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def digest(self) -> str:
        """Stable hash of the architecture, stored in checkpoints."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Glorot-uniform weights and zero biases from a seeded generator."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ParamStore()
    init_image_params(params, cfg.levels, cfg.features, rng)
    init_text_params(params, cfg.vocab_size, cfg.text_dim, rng)
    init_decoder_params(params, cfg.levels, cfg.features, cfg.text_dim, cfg.classes, rng)
    for k in range(cfg.levels):
        w = glorot_uniform(rng, (cfg.classes, cfg.features, 1, 1), cfg.features, cfg.classes)
        params.add(f"decoder.aux{k}.weight", w)
        params.add(f"decoder.aux{k}.bias", np.zeros(cfg.classes))
    params.add("align.image_proj.weight", glorot_uniform(rng, (cfg.features, cfg.text_dim), cfg.features, cfg.text_dim))
    params.add("align.image_proj.bias", np.zeros(cfg.text_dim))
    return params


class ModelOutput(NamedTuple):
    probs: Tensor                 # [N, C, H, W]
    level_probs: list[Tensor]     # level k: [N, C, H/2^k, W/2^k]
    image_embed: Tensor           # [N, D]
    text_embed: Tensor            # [N, D]


def forward(params: ParamStore, cfg: ModelConfig, images: np.ndarray, ids: np.ndarray) -> ModelOutput:
    """Batched forward pass over ``images [N,3,H,W]`` and token ids ``[N,T]``."""
    pyramid = encode_image(np.asarray(images, dtype=np.float64), params, cfg.levels)
    text = encode_text(ids, params)
    fusion_text = text if cfg.use_language else Tensor(np.zeros(text.shape))
    probs, fused = decode(pyramid, fusion_text, params)
    level_probs = [T.softmax_channels(class_logits(f, params, f"decoder.aux{k}")) for k, f in enumerate(fused)]
    pooled = pyramid[0].mean(axis=(-2, -1))                                   # [N, F]
    image_embed = pooled @ params["align.image_proj.weight"] + params["align.image_proj.bias"]
    return ModelOutput(probs, level_probs, image_embed, fusion_text)


def loss_terms(out: ModelOutput, masks: np.ndarray, weights: LossWeights) -> dict[str, Tensor]:
    return {
        "gen": gen_nll(out.probs, masks, weights.eps),
        "triplet": in_batch_triplet(out.image_embed, out.text_embed, weights.margin),
        "seg": seg_ce(out.probs, masks, weights.eps),
        "multi_scale": multi_scale_loss(out.level_probs, masks, weights.eps),
    }


def batch_loss(params: ParamStore, cfg: ModelConfig, images, ids, masks,
               weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    out = forward(params, cfg, images, ids)
    return total_loss(loss_terms(out, masks, weights), weights)
