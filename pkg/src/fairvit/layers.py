"""Neural-network layers and losses on top of the autodiff tape.

Layers are plain functions of ``(input, params...)``. Anything that needs
randomness (dropout) takes an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, apply_primitive, register_primitive


class ConfigError(ValueError):
    """Layer hyper-parameters are invalid."""


# ---------------------------------------------------------------------------
# extra primitives


def _relu_fwd(a):
    mask = a > 0
    return np.where(mask, a, 0.0), mask


def _relu_bwd(mask, g):
    return (np.where(mask, g, 0.0),)


def _grl_fwd(a, lam):
    return a.copy(), lam


def _grl_bwd(lam, g):
    return ((-lam) * g,)


def _softmax_fwd(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return out, out


def _softmax_bwd(out, g):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    return out, out


def _log_softmax_bwd(out, g):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _concat_fwd(*arrays, axis):
    ref = arrays[0]
    axis = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(
            arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {arr.shape} differ off axis {axis}")
    sizes = [arr.shape[axis] for arr in arrays]
    return np.concatenate(arrays, axis=axis), (axis, sizes)


def _concat_bwd(ctx, g):
    axis, sizes = ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))


def _slice_fwd(a, index):
    return np.ascontiguousarray(a[index]), (a.shape, index)


def _slice_bwd(ctx, g):
    shape, index = ctx
    ga = np.zeros(shape)
    ga[index] = g
    return (ga,)


def _conv_windows(xp, kh, kw, stride, oh, ow):
    for i in range(kh):
        for j in range(kw):
            yield i, j, (slice(None), slice(None),
                         slice(i, i + stride * (oh - 1) + 1, stride),
                         slice(j, j + stride * (ow - 1) + 1, stride))


def _conv2d_fwd(x, w, b, stride, padding):
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernels {w.shape}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernels {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (padding {padding})")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((bsz, cin, kh, kw, oh, ow))
    for i, j, sl in _conv_windows(xp, kh, kw, stride, oh, ow):
        cols[:, :, i, j] = xp[sl]
    cols = cols.reshape(bsz, cin * kh * kw, oh * ow)
    w2 = w.reshape(cout, -1)
    out = np.matmul(w2, cols) + b[None, :, None]
    ctx = (cols, w2, x.shape, w.shape, xp.shape, stride, padding, oh, ow)
    return out.reshape(bsz, cout, oh, ow), ctx


def _conv2d_bwd(ctx, g):
    cols, w2, xshape, wshape, xpshape, stride, padding, oh, ow = ctx
    bsz, cin, h, wd = xshape
    cout, _, kh, kw = wshape
    g2 = g.reshape(bsz, cout, oh * ow)
    gw = np.einsum("bok,bck->oc", g2, cols).reshape(wshape)
    gb = g2.sum(axis=(0, 2))
    gcols = np.matmul(w2.T, g2).reshape(bsz, cin, kh, kw, oh, ow)
    gxp = np.zeros(xpshape)
    for i, j, sl in _conv_windows(gxp, kh, kw, stride, oh, ow):
        gxp[sl] += gcols[:, :, i, j]
    gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
    return np.ascontiguousarray(gx), gw, gb


register_primitive("relu", _relu_fwd, _relu_bwd)
register_primitive("grl", _grl_fwd, _grl_bwd)
register_primitive("softmax", _softmax_fwd, _softmax_bwd)
register_primitive("log_softmax", _log_softmax_fwd, _log_softmax_bwd)
register_primitive("concat", _concat_fwd, _concat_bwd)
register_primitive("slice", _slice_fwd, _slice_bwd)
register_primitive("conv2d", _conv2d_fwd, _conv2d_bwd)


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", x)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shift stabilized."""
    return apply_primitive("softmax", x)


def log_softmax(x: Tensor) -> Tensor:
    return apply_primitive("log_softmax", x)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    return apply_primitive("concat", *tensors, axis=axis)


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing, e.g. ``take(x, (slice(None), 0))``."""
    return apply_primitive("slice", x, index=index)


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class GrlConfig:
    lam: float = 0.5

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"GRL lambda must be >= 0, got {self.lam}")


def grl(x: Tensor, cfg: GrlConfig | float) -> Tensor:
    """Gradient reversal: identity forward, ``-lam * grad`` backward."""
    lam = cfg.lam if isinstance(cfg, GrlConfig) else GrlConfig(float(cfg)).lam
    return apply_primitive("grl", x, lam=lam)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} do not conform")
    return ad.add(ad.matmul(x, w), b)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-d cross-correlation on ``[batch, c, h, w]`` inputs."""
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernels, got {x.shape} and {kernels.shape}")
    return apply_primitive("conv2d", x, kernels, bias, stride=int(stride), padding=int(padding))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected [batch, c, h, w], got {x.shape}")
    return ad.mean(x, axis=(2, 3))


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = ad.broadcast(ad.mean(x, axis=-1, keepdims=True), x.shape)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.mul(xc, xc), axis=-1, keepdims=True)
    inv = ad.broadcast(ad.power(ad.add(var, Tensor(eps)), -0.5), x.shape)
    return ad.add(ad.mul(ad.mul(xc, inv), gain), shift)


def multi_head_attention(x: Tensor, params: dict[str, Tensor], heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention.

    ``params`` holds ``qkv_w [d, 3d]``, ``qkv_b [3d]``, ``out_w [d, d]``,
    ``out_b [d]``. Returns the projected output and the attention weights
    ``[batch, heads, tokens, tokens]``.
    """
    bsz, tokens, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    qkv = linear(x, params["qkv_w"], params["qkv_b"])
    qkv = ad.transpose(ad.reshape(qkv, (bsz, tokens, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (take(qkv, i) for i in range(3))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), Tensor(1.0 / np.sqrt(dh)))
    attn = softmax(scores)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (bsz, tokens, d))
    return linear(ctx, params["out_w"], params["out_b"]), attn


def patch_embed(img: Tensor, patch: int, params: dict[str, Tensor]) -> Tensor:
    """Split into non-overlapping patches, project, prepend the class token, add positions.

    ``params``: ``w [c*patch*patch, d]``, ``b [d]``, ``cls [d]``, ``pos [1+n, d]``.
    """
    bsz, c, h, w = img.shape
    if patch < 1 or h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    d = params["b"].shape[0]
    x = ad.reshape(img, (bsz, c, gh, patch, gw, patch))
    x = ad.reshape(ad.transpose(x, (0, 2, 4, 1, 3, 5)), (bsz, gh * gw, c * patch * patch))
    x = linear(x, params["w"], params["b"])
    cls = ad.broadcast(ad.reshape(params["cls"], (1, 1, d)), (bsz, 1, d))
    return ad.add(concat([cls, x], axis=1), params["pos"])


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor._wrap(mask))


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape or pred.ndim != 1 or pred.shape[0] < 1:
        raise ShapeError(f"mse_loss: pred {pred.shape} and target {target.shape} must be equal-length vectors")
    diff = ad.sub(target, pred)
    return ad.mean(ad.mul(diff, diff))


def one_hot(labels, classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return Tensor._wrap(out)


def cross_entropy_loss(logits: Tensor, onehot: Tensor) -> Tensor:
    if logits.shape != onehot.shape or logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape} vs one-hot {onehot.shape}")
    z = onehot.data
    if not (np.all((z == 0) | (z == 1)) and np.all(z.sum(axis=1) == 1)):
        raise ValueError("cross_entropy_loss: every target row must contain exactly one 1")
    picked = ad.sum(ad.mul(log_softmax(logits), onehot), axis=1)
    return ad.mul(ad.mean(picked), Tensor(-1.0))
