"""Binary PGM (P5) and PPM (P6) readers/writers, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _header_tokens(buf: bytes, path) -> tuple[list[bytes], int]:
    """Magic, width, height, maxval plus the offset of the raster."""
    tokens: list[bytes] = []
    i, n = 0, len(buf)
    while len(tokens) < 4:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError(f"{path}: truncated PNM header")
        tokens.append(buf[start:i])
    if i >= n or not buf[i:i + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after PNM header")
    return tokens, i + 1


def read_pnm(path) -> np.ndarray:
    """Return uint8 ``[H, W]`` for P5 or ``[H, W, 3]`` for P6."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    (magic, w, h, maxval), offset = _header_tokens(buf, path)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    try:
        width, height, maxv = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PNM header") from None
    if maxv != 255 or width < 1 or height < 1:
        raise FormatError(f"{path}: only 8-bit rasters with positive size are supported (maxval {maxv})")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = buf[offset:offset + need]
    if len(raster) != need:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr[:, :, 0].copy() if channels == 1 else arr.copy()


def write_pgm(path, values) -> Path:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs a 2-d array, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise FormatError(f"PGM values must lie in 0..255, got range [{arr.min()}, {arr.max()}]")
    path = Path(path)
    h, w = arr.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.astype(np.uint8).tobytes())
    return path


def write_ppm(path, image) -> Path:
    """Write a float ``[3, H, W]`` image in [0, 1] as 8-bit P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"PPM needs a [3,H,W] image, got shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    _, h, w = img.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a P6 color image")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a P5 grayscale image")
    return arr.astype(np.int64)
