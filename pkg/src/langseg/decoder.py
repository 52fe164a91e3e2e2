"""Language-broadcast fusion, learnable scale aggregation and the class head."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .image_encoder import encode_image, glorot_uniform
from .pnm import write_pgm
from .tensor import ParamStore, Tensor
from .text_encoder import encode_text


def init_decoder_params(params: ParamStore, levels: int, features: int, text_dim: int, classes: int,
                        rng: np.random.Generator) -> None:
    for k in range(levels):
        cin = features + text_dim
        params.add(f"decoder.fuse{k}.weight", glorot_uniform(rng, (features, cin, 1, 1), cin, features))
        params.add(f"decoder.fuse{k}.bias", np.zeros(features))
    params.add("decoder.scale_logits", np.zeros(levels))
    params.add("decoder.head.weight", glorot_uniform(rng, (classes, features, 1, 1), features, classes))
    params.add("decoder.head.bias", np.zeros(classes))


def fuse_level(feat: Tensor, text: Tensor, params: ParamStore, level: int) -> Tensor:
    """relu(conv1x1(concat(feat, broadcast(text)))) for one pyramid level.

    The 1x1 conv over the concatenation is evaluated as two products, one
    over the feature channels and one over the (spatially constant) text
    channels; this is the same linear map without materializing the
    broadcast text planes.
    """
    weight = params[f"decoder.fuse{level}.weight"]
    bias = params[f"decoder.fuse{level}.bias"]
    n_feat, n_text = feat.shape[-3], text.shape[-1]
    if weight.shape[1] != n_feat + n_text:
        raise DimensionError(
            f"fuse{level}: weight expects {weight.shape[1]} input channels, got {n_feat} features + {n_text} text")
    w_feat = T.index(weight, (slice(None), slice(0, n_feat)))
    w_text = T.index(weight, (slice(None), slice(n_feat, None), 0, 0))
    x = T.conv2d(feat, w_feat, stride=1, padding=0)
    t = T.reshape(text, (1, n_text)) if text.ndim == 1 else text
    t = t @ T.transpose(w_text)                          # [N, F]
    t = T.reshape(t, (-1, 1, 1)) if feat.ndim == 3 else T.reshape(t, (t.shape[0], -1, 1, 1))
    return T.relu(x + t + T.reshape(bias, (-1, 1, 1)))


def effective_scale_weights(scale_logits) -> np.ndarray:
    return T.softmax(T.constant(scale_logits), axis=-1).data


def combine_scales(fused: Sequence[Tensor], scale_logits: Tensor) -> Tensor:
    """Resize every level to level 0's size and mix with softmax(scale_logits)."""
    if not fused:
        raise ContractError("combine_scales needs at least one level")
    if scale_logits.shape != (len(fused),):
        raise ContractError(f"{len(fused)} levels but scale weights of shape {scale_logits.shape}")
    w = T.softmax(scale_logits, axis=-1)
    h, wd = fused[0].shape[-2:]
    out = None
    for k, level in enumerate(fused):
        term = T.index(w, k) * T.bilinear_resize(level, h, wd)
        out = term if out is None else out + term
    return out


def class_logits(x: Tensor, params: ParamStore, name: str = "decoder.head") -> Tensor:
    return T.conv2d(x, params[f"{name}.weight"], 1, 0) + T.reshape(params[f"{name}.bias"], (-1, 1, 1))


def decode(pyramid: Sequence[Tensor], text: Tensor, params: ParamStore) -> tuple[Tensor, list[Tensor]]:
    """Fuse each level with ``text``, aggregate, and return (mask probs, fused levels)."""
    fused = [fuse_level(f, text, params, k) for k, f in enumerate(pyramid)]
    combined = combine_scales(fused, params["decoder.scale_logits"])
    return T.softmax_channels(class_logits(combined, params)), fused


def predict_mask(image, ids, params: ParamStore, levels: int, use_language: bool = True) -> Tensor:
    """Per-pixel class distribution ``[C, H, W]`` (or ``[N, C, H, W]`` for batches)."""
    pyramid = encode_image(image, params, levels)
    text = encode_text(ids, params)
    if not use_language:
        text = T.Tensor(np.zeros(text.shape))
    probs, _ = decode(pyramid, text, params)
    return probs


def hard_mask(probs) -> np.ndarray:
    """Argmax over the channel axis; ties resolve to the lower class id."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(p, axis=-3).astype(np.int64)


def export_mask(path, probs) -> Path:
    mask = hard_mask(probs)
    if mask.ndim != 2:
        raise DimensionError(f"export_mask needs a single [C,H,W] distribution, got {np.shape(probs)}")
    return write_pgm(path, mask)
