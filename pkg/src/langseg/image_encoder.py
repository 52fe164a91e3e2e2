"""Strided convolution stack producing a K-level feature pyramid."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import ParamStore, Tensor

IN_CHANNELS = 3


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_image_params(params: ParamStore, levels: int, features: int, rng: np.random.Generator) -> None:
    for k in range(levels):
        cin = IN_CHANNELS if k == 0 else features
        w = glorot_uniform(rng, (features, cin, 3, 3), cin * 9, features * 9)
        params.add(f"image_encoder.level{k}.weight", w)
        params.add(f"image_encoder.level{k}.bias", np.zeros(features))


def check_divisible(height: int, width: int, levels: int) -> None:
    step = 2 ** (levels - 1)
    if levels < 1 or height % step or width % step:
        raise DimensionError(f"image {height}x{width} not divisible by 2^(K-1) = {step} for K={levels}")


def encode_image(image, params: ParamStore, levels: int) -> list[Tensor]:
    """Pyramid of ``levels`` maps; level k is ``[F, H/2^k, W/2^k]``.

    Accepts ``[3, H, W]`` or a batch ``[N, 3, H, W]``.
    """
    x = T.constant(image)
    if x.ndim not in (3, 4) or x.shape[-3] != IN_CHANNELS:
        raise DimensionError(f"expected [3,H,W] or [N,3,H,W] image, got {x.shape}")
    check_divisible(x.shape[-2], x.shape[-1], levels)
    pyramid = []
    for k in range(levels):
        w = params[f"image_encoder.level{k}.weight"]
        b = params[f"image_encoder.level{k}.bias"]
        x = T.conv2d(x, w, stride=1 if k == 0 else 2, padding=1)
        x = T.relu(x + T.reshape(b, (-1, 1, 1)))
        pyramid.append(x)
    return pyramid
