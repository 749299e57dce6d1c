"""Saliency maps: Grad-CAM on the convolutional branch, attention rollout on the ViT branch."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .imaging import resize_bilinear, save_image
from .model import FairViT, VariantError

SOURCES = ("grad_cam", "attention_rollout")


@dataclass
class Heatmap:
    values: np.ndarray  # [h, w] in [0, 1]
    source: str
    sample_id: str = ""
    raw: np.ndarray | None = None  # pre-upsampling, pre-normalization map


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes uniform 0.5."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(m.shape, 0.5)
    return (m - lo) / (hi - lo)


def grad_cam(model: FairViT, image: np.ndarray, sample_id: str = "") -> Heatmap:
    """Grad-CAM for the regression output, taken at the last convolutional stage."""
    if not model.cfg.has_cnn:
        raise VariantError(f"variant {model.cfg.variant!r} has no convolutional branch")
    x = Tensor._wrap(np.ascontiguousarray(image[None], dtype=np.float64))
    with ad.Tape() as tape:
        bundle = model.extract_features(x, training=False)
        score = model.predict_score(bundle.f)
        grads = tape.backward(score)
    acts = bundle.cnn_activations.data[0]
    g = tape.grad(grads, bundle.cnn_activations)
    dacts = np.zeros_like(acts) if g is None else g.data[0]
    weights = dacts.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, acts, axes=1), 0.0)
    h, w = image.shape[-2:]
    return Heatmap(normalize_map(resize_bilinear(raw, h, w)), "grad_cam", sample_id, raw)


def _layer_maps(attn_maps) -> list[np.ndarray]:
    out = []
    for a in attn_maps:
        arr = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ShapeError(f"attention maps must hold one sample, got batch {arr.shape[0]}")
            arr = arr[0]
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise ShapeError(f"attention map must be [heads, tokens, tokens], got {arr.shape}")
        out.append(arr)
    if not out:
        raise ShapeError("attention rollout needs at least one layer")
    tokens = {a.shape[1] for a in out}
    if len(tokens) != 1:
        raise ShapeError(f"token counts differ across layers: {sorted(tokens)}")
    return out


def rollout_matrices(attn_maps) -> list[np.ndarray]:
    """Cumulative rollout after each layer: ``R_l = A_l' @ R_{l-1}``.

    ``A_l'`` is the head-averaged attention with the residual mixed in as
    ``0.5 * A + 0.5 * I`` and rows renormalized.
    """
    maps = _layer_maps(attn_maps)
    t = maps[0].shape[1]
    eye = np.eye(t)
    rollout = eye
    out = []
    for a in maps:
        mixed = 0.5 * a.mean(axis=0) + 0.5 * eye
        mixed = mixed / mixed.sum(axis=-1, keepdims=True)
        rollout = mixed @ rollout
        out.append(rollout)
    return out


def attention_rollout(attn_maps: Sequence, image_size: int | None = None, sample_id: str = "") -> Heatmap:
    rollout = rollout_matrices(attn_maps)[-1]
    cls_row = rollout[0, 1:]
    grid = int(round(np.sqrt(cls_row.size)))
    if grid * grid != cls_row.size:
        raise ShapeError(f"{cls_row.size} patch tokens do not form a square grid")
    raw = cls_row.reshape(grid, grid)
    up = raw if image_size is None else resize_bilinear(raw, image_size, image_size)
    return Heatmap(normalize_map(up), "attention_rollout", sample_id, raw)


def explain_rollout(model: FairViT, image: np.ndarray, sample_id: str = "") -> Heatmap:
    if not model.cfg.has_vit:
        raise VariantError(f"variant {model.cfg.variant!r} has no transformer branch")
    bundle = model.extract_features(Tensor._wrap(np.ascontiguousarray(image[None], dtype=np.float64)))
    return attention_rollout(bundle.attn_maps, image.shape[-1], sample_id)


def spatial_entropy(values: np.ndarray) -> float:
    """Shannon entropy of a non-negative map treated as a distribution over pixels."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, None).ravel()
    total = v.sum()
    if total <= 0:
        return float(np.log(v.size))
    p = v[v > 0] / total
    return float(-(p * np.log(p)).sum())


def _colorize(m: np.ndarray) -> np.ndarray:
    # blue (low) to red (high)
    return np.stack([m, np.zeros_like(m), 1.0 - m])


def overlay(hm: Heatmap, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    img = image if image.shape[0] == 3 else np.repeat(image[:1], 3, axis=0)
    if img.shape[-2:] != hm.values.shape:
        raise ShapeError(f"heatmap {hm.values.shape} does not match image {image.shape}")
    return (1.0 - alpha) * img + alpha * _colorize(hm.values)


def export_heatmap(hm: Heatmap, image: np.ndarray, out_dir, ext: str = "png") -> tuple[Path, Path]:
    """Write ``{id}.{source}.{ext}`` (grayscale map) and ``{id}.{source}_overlay.{ext}``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gray = out_dir / f"{hm.sample_id}.{hm.source}.{ext}"
    save_image(hm.values, gray)
    over_ext = "ppm" if ext == "pgm" else ext
    over = out_dir / f"{hm.sample_id}.{hm.source}_overlay.{over_ext}"
    save_image(overlay(hm, image), over)
    return gray, over
