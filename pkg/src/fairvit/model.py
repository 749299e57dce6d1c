"""Hybrid CNN/ViT feature extractor with predictor and adversary heads.

The extractor runs a small convolutional branch (local texture) and a small
vision-transformer branch (global structure) in parallel and concatenates
their pooled outputs. Two MLP heads sit on the fused feature: a score
regressor and, for the ``fair_hybrid`` variant, an attribute classifier that
sees the feature through a gradient reversal layer.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import ShapeError, Tensor
from .layers import ConfigError

VARIANTS = ("cnn_only", "vit_only", "hybrid", "fair_hybrid")


class VariantError(RuntimeError):
    """Operation not available for the model variant."""


@dataclass
class ModelConfig:
    variant: str = "fair_hybrid"
    image_size: int = 32
    channels: int = 3
    cnn_channels: tuple[int, ...] = (8, 16, 32)
    d_cnn: int = 32
    patch: int = 8
    d_vit: int = 32
    vit_depth: int = 2
    heads: int = 2
    vit_mlp_ratio: int = 2
    head_hidden: int = 64
    hidden_layer_count: int = 2
    dropout: float = 0.5
    n_attr_classes: int = 2
    grl_lambda: float = 0.5

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)

    @property
    def has_cnn(self) -> bool:
        return self.variant in ("cnn_only", "hybrid", "fair_hybrid")

    @property
    def has_vit(self) -> bool:
        return self.variant in ("vit_only", "hybrid", "fair_hybrid")

    @property
    def has_adversary(self) -> bool:
        return self.variant == "fair_hybrid"

    @property
    def fused_dim(self) -> int:
        return (self.d_cnn if self.has_cnn else 0) + (self.d_vit if self.has_vit else 0)

    @property
    def tokens(self) -> int:
        return 1 + (self.image_size // self.patch) ** 2

    def validate(self) -> None:
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.image_size < 1 or self.channels < 1:
            problems.append("image_size and channels must be >= 1")
        if self.d_cnn < 1 or self.d_vit < 1:
            problems.append("d_cnn and d_vit must be >= 1")
        if not self.cnn_channels or self.cnn_channels[-1] != self.d_cnn:
            problems.append(f"last cnn_channels entry must equal d_cnn ({self.d_cnn}), got {self.cnn_channels}")
        if self.has_vit:
            if self.patch < 1 or self.image_size % self.patch:
                problems.append(f"image_size {self.image_size} not divisible by patch {self.patch}")
            if self.heads < 1 or self.d_vit % self.heads:
                problems.append(f"d_vit {self.d_vit} not divisible by heads {self.heads}")
            if self.vit_depth < 1:
                problems.append("vit_depth must be >= 1")
        if self.head_hidden < 1 or self.hidden_layer_count < 1:
            problems.append("head_hidden and hidden_layer_count must be >= 1")
        if not 0 <= self.dropout < 1:
            problems.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.n_attr_classes < 2:
            problems.append("n_attr_classes must be >= 2")
        if not self.grl_lambda >= 0:
            problems.append(f"grl_lambda must be >= 0, got {self.grl_lambda}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class ParameterSet:
    """Learnable tensors split into extractor / predictor / adversary groups."""

    theta_F: dict[str, Tensor] = field(default_factory=dict)
    theta_P: dict[str, Tensor] = field(default_factory=dict)
    theta_A: dict[str, Tensor] = field(default_factory=dict)

    def items(self):
        yield from self.theta_F.items()
        yield from self.theta_P.items()
        yield from self.theta_A.items()

    def names(self) -> list[str]:
        return [name for name, _ in self.items()]

    def __getitem__(self, name: str) -> Tensor:
        for part in (self.theta_F, self.theta_P, self.theta_A):
            if name in part:
                return part[name]
        raise KeyError(name)

    def partition_of(self, name: str) -> str:
        for key in ("theta_F", "theta_P", "theta_A"):
            if name in getattr(self, key):
                return key
        raise KeyError(name)

    def copy(self) -> "ParameterSet":
        clone = lambda part: {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in part.items()}
        return ParameterSet(clone(self.theta_F), clone(self.theta_P), clone(self.theta_A))


@dataclass
class FeatureBundle:
    f: Tensor
    f_cnn: Optional[Tensor] = None
    f_vit: Optional[Tensor] = None
    attn_maps: list[Tensor] = field(default_factory=list)
    cnn_activations: Optional[Tensor] = None


def _partition(name: str) -> str:
    if name.startswith(("cnn.", "vit.")):
        return "theta_F"
    if name.startswith("pred."):
        return "theta_P"
    if name.startswith("adv."):
        return "theta_A"
    raise KeyError(name)


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) list; order fixes the seeded initialization."""
    specs = []
    if cfg.has_cnn:
        cin = cfg.channels
        for i, cout in enumerate(cfg.cnn_channels):
            specs.append((f"cnn.conv{i}.w", (cout, cin, 3, 3), "he"))
            specs.append((f"cnn.conv{i}.b", (cout,), "zeros"))
            cin = cout
    if cfg.has_vit:
        d = cfg.d_vit
        hid = d * cfg.vit_mlp_ratio
        specs += [
            ("vit.patch.w", (cfg.channels * cfg.patch ** 2, d), "lecun"),
            ("vit.patch.b", (d,), "zeros"),
            ("vit.cls", (d,), "embed"),
            ("vit.pos", (cfg.tokens, d), "embed"),
        ]
        for i in range(cfg.vit_depth):
            p = f"vit.block{i}."
            specs += [
                (p + "ln1.g", (d,), "ones"), (p + "ln1.b", (d,), "zeros"),
                (p + "attn.qkv_w", (d, 3 * d), "lecun"), (p + "attn.qkv_b", (3 * d,), "zeros"),
                (p + "attn.out_w", (d, d), "lecun"), (p + "attn.out_b", (d,), "zeros"),
                (p + "ln2.g", (d,), "ones"), (p + "ln2.b", (d,), "zeros"),
                (p + "mlp.fc1_w", (d, hid), "he"), (p + "mlp.fc1_b", (hid,), "zeros"),
                (p + "mlp.fc2_w", (hid, d), "lecun"), (p + "mlp.fc2_b", (d,), "zeros"),
            ]
        specs += [("vit.ln.g", (d,), "ones"), ("vit.ln.b", (d,), "zeros")]
    heads = [("pred", 1)]
    if cfg.has_adversary:
        heads.append(("adv", cfg.n_attr_classes))
    for prefix, out_dim in heads:
        width = cfg.fused_dim
        for i in range(cfg.hidden_layer_count):
            specs.append((f"{prefix}.fc{i}.w", (width, cfg.head_hidden), "he"))
            specs.append((f"{prefix}.fc{i}.b", (cfg.head_hidden,), "zeros"))
            width = cfg.head_hidden
        specs.append((f"{prefix}.out.w", (width, out_dim), "lecun"))
        specs.append((f"{prefix}.out.b", (out_dim,), "zeros"))
    return specs


def _init(shape, kind, rng):
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "embed":
        return rng.normal(0.0, 0.02, shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    bound = np.sqrt((6.0 if kind == "he" else 3.0) / fan_in)
    return rng.uniform(-bound, bound, shape)


class FairViT:
    """Model handle: config plus the three parameter groups."""

    def __init__(self, cfg: ModelConfig, params: ParameterSet):
        self.cfg = cfg
        self.params = params

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # -- branches ---------------------------------------------------------

    def _cnn(self, images: Tensor) -> tuple[Tensor, Tensor]:
        x = images
        for i in range(len(self.cfg.cnn_channels)):
            stride = 1 if i == 0 else 2
            x = L.relu(L.conv2d(x, self.p(f"cnn.conv{i}.w"), self.p(f"cnn.conv{i}.b"), stride=stride, padding=1))
        return L.global_avg_pool(x), x

    def _vit(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        cfg = self.cfg
        pe = {k: self.p(f"vit.{k}") for k in ("cls", "pos")}
        pe.update(w=self.p("vit.patch.w"), b=self.p("vit.patch.b"))
        x = L.patch_embed(images, cfg.patch, pe)
        maps = []
        for i in range(cfg.vit_depth):
            p = f"vit.block{i}."
            h = L.layer_norm(x, self.p(p + "ln1.g"), self.p(p + "ln1.b"))
            attn_params = {k: self.p(p + "attn." + k) for k in ("qkv_w", "qkv_b", "out_w", "out_b")}
            h, attn = L.multi_head_attention(h, attn_params, cfg.heads)
            maps.append(attn)
            x = ad.add(x, h)
            h = L.layer_norm(x, self.p(p + "ln2.g"), self.p(p + "ln2.b"))
            h = L.relu(L.linear(h, self.p(p + "mlp.fc1_w"), self.p(p + "mlp.fc1_b")))
            x = ad.add(x, L.linear(h, self.p(p + "mlp.fc2_w"), self.p(p + "mlp.fc2_b")))
        x = L.layer_norm(x, self.p("vit.ln.g"), self.p("vit.ln.b"))
        return L.take(x, (slice(None), 0)), maps

    # -- public ops ---------------------------------------------------------

    def extract_features(self, images: Tensor, training: bool = False) -> FeatureBundle:
        cfg = self.cfg
        want = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != want:
            raise ShapeError(f"extract_features: expected [batch, {', '.join(map(str, want))}], got {images.shape}")
        bundle = FeatureBundle(f=None)  # type: ignore[arg-type]
        parts = []
        if cfg.has_cnn:
            bundle.f_cnn, bundle.cnn_activations = self._cnn(images)
            parts.append(bundle.f_cnn)
        if cfg.has_vit:
            bundle.f_vit, bundle.attn_maps = self._vit(images)
            parts.append(bundle.f_vit)
        bundle.f = parts[0] if len(parts) == 1 else L.concat(parts, axis=1)
        return bundle

    def _mlp(self, prefix: str, x: Tensor, training: bool, rng) -> Tensor:
        for i in range(self.cfg.hidden_layer_count):
            x = L.relu(L.linear(x, self.p(f"{prefix}.fc{i}.w"), self.p(f"{prefix}.fc{i}.b")))
            x = L.dropout(x, self.cfg.dropout, training, rng)
        return L.linear(x, self.p(f"{prefix}.out.w"), self.p(f"{prefix}.out.b"))

    def _check_width(self, f: Tensor) -> None:
        if f.ndim != 2 or f.shape[1] != self.cfg.fused_dim:
            raise ShapeError(f"expected features [batch, {self.cfg.fused_dim}], got {f.shape}")

    def predict_score(self, f: Tensor, training: bool = False, rng=None) -> Tensor:
        self._check_width(f)
        out = self._mlp("pred", f, training, rng)
        return ad.reshape(out, (f.shape[0],))

    def adversary_logits(self, f: Tensor, training: bool = False, rng=None, lam: float | None = None) -> Tensor:
        """Attribute logits for ``f`` seen through the gradient reversal layer.

        ``lam`` overrides the configured reversal strength; ``lam=None`` uses
        ``cfg.grl_lambda``.
        """
        if not self.cfg.has_adversary:
            raise VariantError(f"variant {self.cfg.variant!r} has no adversary head")
        self._check_width(f)
        h = L.grl(f, self.cfg.grl_lambda if lam is None else lam)
        return self._mlp("adv", h, training, rng)

    def adversary_logits_plain(self, f: Tensor, training: bool = False, rng=None) -> Tensor:
        """Adversary head without the reversal (used by the two-pass literal training mode)."""
        if not self.cfg.has_adversary:
            raise VariantError(f"variant {self.cfg.variant!r} has no adversary head")
        self._check_width(f)
        return self._mlp("adv", f, training, rng)

    def predict(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Eval-mode scores for an image array; no tape is recorded."""
        out = []
        for start in range(0, len(images), batch_size):
            feats = self.extract_features(Tensor._wrap(np.ascontiguousarray(images[start:start + batch_size])))
            out.append(self.predict_score(feats.f).data)
        return np.concatenate(out) if out else np.zeros(0)

    def features(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        out = []
        for start in range(0, len(images), batch_size):
            out.append(self.extract_features(Tensor._wrap(np.ascontiguousarray(images[start:start + batch_size]))).f.data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.fused_dim))


def build_model(cfg: ModelConfig, seed: int = 0) -> FairViT:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, shape, kind in _param_shapes(cfg):
        getattr(params, _partition(name))[name] = Tensor(_init(shape, kind, rng), requires_grad=True, name=name)
    return FairViT(cfg, params)


# ---------------------------------------------------------------------------
# config text and checkpoints

MAGIC = b"FVGAN"
FORMAT_VERSION = 1


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(values: dict) -> str:
    """Canonical ``key=value`` lines, keys sorted."""
    return "".join(f"{k}={_format_value(values[k])}\n" for k in sorted(values))


def text_to_dict(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_field(cls, name: str, raw: str):
    """Convert a text value to the declared type of dataclass field ``name``."""
    ftypes = {f.name: f.type for f in fields(cls)}
    if name not in ftypes:
        raise ConfigError(f"unknown key {name!r} for {cls.__name__}")
    default = getattr(cls(), name) if _has_defaults(cls) else None
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(type(default[0])(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw!r} for {name}") from exc


def _has_defaults(cls) -> bool:
    try:
        cls()
        return True
    except TypeError:
        return False


def model_config_from_dict(values: dict[str, str]) -> ModelConfig:
    cfg = ModelConfig(**{k: parse_field(ModelConfig, k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


def save_checkpoint(path, cfg: ModelConfig, params: ParameterSet, extra_config: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Binary checkpoint.

    Layout (little-endian): ``b"FVGAN"``, u16 version, u32 config length,
    config text (sorted ``key=value`` lines, model keys prefixed ``model.``),
    u32 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
    u64 dims, float64 data.
    """
    values = {f"model.{k}": v for k, v in asdict(cfg).items()}
    values.update(extra_config or {})
    text = config_to_text(values).encode()
    tensors = [(name, t.data) for name, t in params.items()]
    tensors += sorted((extra_tensors or {}).items())
    buf = bytearray(MAGIC)
    buf += struct.pack("<HI", FORMAT_VERSION, len(text)) + text
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        nb = name.encode()
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    try:
        return _parse_checkpoint(raw, path)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from None


def _parse_checkpoint(raw: bytes, path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, tlen = struct.unpack_from("<HI", raw, 5)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 11
    text = raw[pos:pos + tlen].decode()
    pos += tlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return text_to_dict(text), tensors


def load_checkpoint(path) -> tuple[FairViT, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild the model; returns (model, non-model config values, non-parameter tensors)."""
    values, tensors = read_checkpoint(path)
    model_values = {k[6:]: v for k, v in values.items() if k.startswith("model.")}
    cfg = model_config_from_dict(model_values)
    params = ParameterSet()
    expected = {name for name, _, _ in _param_shapes(cfg)}
    for name, shape, _ in _param_shapes(cfg):
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, config expects {shape}")
        getattr(params, _partition(name))[name] = Tensor(tensors[name], requires_grad=True, name=name)
    rest = {k: v for k, v in tensors.items() if k not in expected}
    other = {k: v for k, v in values.items() if not k.startswith("model.")}
    return FairViT(cfg, params), other, rest
