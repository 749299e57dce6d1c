"""Small image utilities: bilinear resize and 8-bit file IO."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped (the align_corners=False convention)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize over the last two axes."""
    h, w = img.shape[-2:]
    if (h, w) == (height, width):
        return img.astype(np.float64, copy=True)
    r0, r1, fr = _axis_weights(h, height)
    c0, c1, fc = _axis_weights(w, width)
    rows = img[..., r0, :] * (1 - fr)[:, None] + img[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(arr: np.ndarray, path) -> None:
    """Write a ``[h, w]`` grayscale or ``[c, h, w]`` RGB array in [0, 1].

    The format follows the suffix (``.png``, ``.pgm``, ``.ppm``).
    """
    data = to_uint8(arr)
    if data.ndim == 3:
        if data.shape[0] == 1:
            data = data[0]
        else:
            data = np.transpose(data, (1, 2, 0))
    path = Path(path)
    fmt = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported image suffix {path.suffix!r}")
    Image.fromarray(data).save(path, format=fmt)


def read_image(path, channels: int = 3) -> np.ndarray:
    """Read an image file into a float ``[c, h, w]`` array in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        data = np.asarray(im, dtype=np.float64) / 255.0
    if data.ndim == 2:
        return data[None]
    return np.ascontiguousarray(np.transpose(data, (2, 0, 1)))
