"""Accuracy and fairness metrics, plus the attribute-leakage probe."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .optim import Adam


class MetricError(ValueError):
    pass


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise MetricError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise MetricError("metrics need at least one sample")
    return p, t


def pearson(pred, target) -> float:
    """Sample Pearson correlation; raises on constant input instead of returning 0."""
    p, t = _pair(pred, target)
    if p.size < 2:
        raise MetricError("pearson needs at least two samples")
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(dp @ dp), np.sqrt(dt @ dt)
    if sp == 0 or st == 0:
        raise MetricError("pearson correlation is undefined for a constant vector")
    return float(np.clip((dp @ dt) / (sp * st), -1.0, 1.0))


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(t - p)))


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def performance_gap(pred, target, attrs, classes: int = 2) -> tuple[dict[int, float], float]:
    """Per-group MAE and the spread between groups (``|MAE_0 - MAE_1|`` for two groups)."""
    p, t = _pair(pred, target)
    z = np.asarray(attrs).ravel()
    if z.shape != p.shape:
        raise MetricError("attribute vector length differs from predictions")
    group_mae = {}
    for g in range(classes):
        mask = z == g
        if not mask.any():
            raise MetricError(f"attribute group {g} has no samples")
        group_mae[g] = mae(p[mask], t[mask])
    values = list(group_mae.values())
    return group_mae, float(max(values) - min(values))


def bias_reduction(gap_baseline: float, gap_fair: float) -> float:
    """Percent reduction of the performance gap relative to the baseline."""
    if not gap_baseline > 0:
        raise MetricError("bias reduction is undefined for a zero baseline gap")
    return 100.0 * (gap_baseline - gap_fair) / gap_baseline


# ---------------------------------------------------------------------------
# leakage probe


@dataclass
class ProbeConfig:
    hidden: int = 32
    epochs: int = 200
    lr: float = 0.01
    seed: int = 0
    train_fraction: float = 0.7


def stratified_holdout(attrs: np.ndarray, fraction: float, rng: np.random.Generator, classes: int):
    train, test = [], []
    for g in range(classes):
        members = rng.permutation(np.flatnonzero(attrs == g))
        k = int(round(fraction * members.size))
        if k < 1 or k >= members.size:
            raise MetricError(f"probe split is degenerate for group {g} ({members.size} samples)")
        train.extend(members[:k])
        test.extend(members[k:])
    return np.sort(train), np.sort(test)


def probe_accuracy(features, attrs, cfg: ProbeConfig | None = None, classes: int = 2) -> float:
    """Held-out accuracy of a freshly trained MLP predicting the attribute from frozen features.

    Features are standardized with training-part statistics, then a
    one-hidden-layer ReLU network is fit by full-batch Adam on cross-entropy.
    """
    cfg = cfg or ProbeConfig()
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    z = np.asarray(attrs, dtype=np.int64).ravel()
    if x.ndim != 2 or x.shape[0] != z.size:
        raise MetricError(f"features {x.shape} do not match {z.size} attributes")
    if z.size < 2 * classes:
        raise MetricError(f"probe needs at least {2 * classes} samples, got {z.size}")
    rng = np.random.default_rng(cfg.seed)
    tr, te = stratified_holdout(z, cfg.train_fraction, rng, classes)
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mu) / sd

    d = x.shape[1]
    b1, b2 = np.sqrt(6.0 / d), np.sqrt(3.0 / cfg.hidden)
    params = {
        "w1": Tensor(rng.uniform(-b1, b1, (d, cfg.hidden)), requires_grad=True),
        "b1": Tensor(np.zeros(cfg.hidden), requires_grad=True),
        "w2": Tensor(rng.uniform(-b2, b2, (cfg.hidden, classes)), requires_grad=True),
        "b2": Tensor(np.zeros(classes), requires_grad=True),
    }
    opt = Adam(cfg.lr)
    xt = Tensor._wrap(xs[tr])
    target = L.one_hot(z[tr], classes)

    def forward(inp):
        h = L.relu(L.linear(inp, params["w1"], params["b1"]))
        return L.linear(h, params["w2"], params["b2"])

    for _ in range(cfg.epochs):
        with ad.Tape() as tape:
            loss = L.cross_entropy_loss(forward(xt), target)
            grads = tape.backward(loss)
        opt.step(params, {k: tape.grad(grads, v).data for k, v in params.items()})
    pred = np.argmax(forward(Tensor._wrap(xs[te])).data, axis=1)
    return float(np.mean(pred == z[te]))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    pc: float
    mae: float
    rmse: float
    group_mae: dict[int, float]
    performance_gap: float
    probe_accuracy: Optional[float] = None
    inline_adversary_accuracy: Optional[float] = None
    group_counts: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_mae"] = {str(k): v for k, v in self.group_mae.items()}
        d["group_counts"] = {str(k): v for k, v in self.group_counts.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        required = ("pc", "mae", "rmse", "group_mae", "performance_gap", "probe_accuracy")
        for key in required:
            if key not in d:
                raise MetricError(f"metrics file lacks key {key!r}")
        return cls(
            pc=d["pc"], mae=d["mae"], rmse=d["rmse"],
            group_mae={int(k): v for k, v in d["group_mae"].items()},
            performance_gap=d["performance_gap"],
            probe_accuracy=d["probe_accuracy"],
            inline_adversary_accuracy=d.get("inline_adversary_accuracy"),
            group_counts={int(k): v for k, v in d.get("group_counts", {}).items()},
        )


def compute_report(pred, target, attrs, features=None, probe_cfg: ProbeConfig | None = None,
                   inline_adversary_accuracy: float | None = None, classes: int = 2) -> MetricsReport:
    group_mae, gap = performance_gap(pred, target, attrs, classes)
    z = np.asarray(attrs)
    return MetricsReport(
        pc=pearson(pred, target),
        mae=mae(pred, target),
        rmse=rmse(pred, target),
        group_mae=group_mae,
        performance_gap=gap,
        probe_accuracy=None if features is None else probe_accuracy(features, attrs, probe_cfg, classes),
        inline_adversary_accuracy=inline_adversary_accuracy,
        group_counts={g: int(np.sum(z == g)) for g in range(classes)},
    )
