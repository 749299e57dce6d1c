"""Joint training of extractor, predictor and adversary.

Each step runs one forward pass and backpropagates ``L_pred + L_adv``. The
adversary sees the features through the gradient reversal layer, so a
single backward pass yields

* ``dL_pred/dtheta_P`` for the predictor,
* ``dL_adv/dtheta_A`` for the adversary,
* ``dL_pred/dtheta_F - lambda * dL_adv/dtheta_F`` for the extractor.

``literal=True`` instead runs two reversal-free backward passes and combines
them by hand, mirroring the three separate updates of the training loop
as usually written down.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .data import Dataset, augment_batch
from .layers import ConfigError
from .metrics import MetricError, mae, pearson, rmse
from .model import FairViT, load_checkpoint, parse_field, save_checkpoint
from .optim import SGD, Adam

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, step: int, what: str, value: float):
        super().__init__(f"non-finite {what} ({value}) at epoch {epoch}, step {step}")
        self.epoch, self.step, self.what, self.value = epoch, step, what, value


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 25
    lam: float = 0.5
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    literal: bool = False

    def validate(self) -> None:
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if not self.lam >= 0:
            problems.append(f"lam must be >= 0, got {self.lam}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            problems.append("adam betas must lie in [0, 1) and eps must be > 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.lr)
        return Adam(self.lr, (self.beta1, self.beta2), self.eps)


def train_config_from_dict(values: dict[str, str]) -> TrainConfig:
    cfg = TrainConfig(**{k: parse_field(TrainConfig, k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


@dataclass
class EpochLog:
    epoch: int
    loss_pred: float
    loss_adv: Optional[float]
    val_pc: Optional[float]
    val_mae: float
    val_rmse: float
    adv_train_accuracy: Optional[float]
    steps: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class StepResult:
    loss_pred: float
    loss_adv: Optional[float]
    adv_correct: int = 0


def _adversarial(model: FairViT) -> bool:
    return model.cfg.has_adversary


def compute_gradients(model, images: np.ndarray, scores: np.ndarray, attrs: np.ndarray,
                      lam: float, rng=None, training: bool = True, literal: bool = False):
    """Per-parameter gradients for one batch plus the step losses.

    Returns ``(grads, StepResult)`` where ``grads`` maps every parameter
    name to an ndarray (zeros where the loss does not reach it).
    """
    x = Tensor._wrap(np.ascontiguousarray(images))
    y = Tensor._wrap(np.asarray(scores, dtype=np.float64))
    adversarial = _adversarial(model)
    params = model.params
    with ad.Tape() as tape:
        feats = model.extract_features(x, training=training)
        l_pred = L.mse_loss(model.predict_score(feats.f, training=training, rng=rng), y)
        l_adv = logits = None
        if adversarial:
            onehot = L.one_hot(attrs, model.cfg.n_attr_classes)
            if literal:
                logits = model.adversary_logits_plain(feats.f, training=training, rng=rng)
            else:
                logits = model.adversary_logits(feats.f, training=training, rng=rng, lam=lam)
            l_adv = L.cross_entropy_loss(logits, onehot)

        def collect(root):
            g = tape.backward(root)
            out = {}
            for name, p in params.items():
                t = tape.grad(g, p)
                out[name] = np.zeros_like(p.data) if t is None else t.data
            return out

        if not adversarial:
            grads = collect(l_pred)
        elif not literal:
            grads = collect(ad.add(l_pred, l_adv))
        else:
            g_pred, g_adv = collect(l_pred), collect(l_adv)
            grads = {}
            for name in g_pred:
                part = params.partition_of(name)
                if part == "theta_P":
                    grads[name] = g_pred[name]
                elif part == "theta_A":
                    grads[name] = g_adv[name]
                else:
                    grads[name] = g_pred[name] - lam * g_adv[name]
    correct = 0
    if logits is not None:
        correct = int(np.sum(np.argmax(logits.data, axis=1) == np.asarray(attrs)))
    return grads, StepResult(l_pred.item(), None if l_adv is None else l_adv.item(), correct)


def train_step(model, images, scores, attrs, cfg: TrainConfig, optimizer, rng,
               epoch: int = 0, step: int = 0) -> StepResult:
    """One forward/backward pass and one optimizer update (parameters change in place)."""
    grads, res = compute_gradients(model, images, scores, attrs, cfg.lam, rng,
                                   training=True, literal=cfg.literal)
    for what, value in (("L_pred", res.loss_pred), ("L_adv", res.loss_adv)):
        if value is not None and not math.isfinite(value):
            raise TrainingAborted(epoch, step, what, value)
    optimizer.step(dict(model.params.items()), grads)
    return res


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Predictions:
    ids: list[str]
    y: np.ndarray
    pred: np.ndarray
    attrs: np.ndarray
    features: Optional[np.ndarray] = None

    def to_csv(self, path) -> None:
        lines = ["id,y,pred,attr"]
        lines += [f"{i},{y!r},{p!r},{z}" for i, y, p, z in
                  zip(self.ids, self.y.tolist(), self.pred.tolist(), self.attrs.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")


def evaluate(model: FairViT, ds: Dataset, with_features: bool = False, batch_size: int = 128) -> Predictions:
    """Eval-mode predictions (no dropout, no augmentation)."""
    preds, feats = [], []
    for start in range(0, len(ds), batch_size):
        x = Tensor._wrap(np.ascontiguousarray(ds.images[start:start + batch_size]))
        bundle = model.extract_features(x, training=False)
        preds.append(model.predict_score(bundle.f).data)
        feats.append(bundle.f.data)
    return Predictions(
        list(ds.ids), ds.scores.copy(), np.concatenate(preds), ds.attrs.copy(),
        np.concatenate(feats) if with_features else None,
    )


def adversary_accuracy(model: FairViT, features: np.ndarray, attrs: np.ndarray) -> Optional[float]:
    """Accuracy of the model's own adversary head on given features (eval mode)."""
    if not model.cfg.has_adversary:
        return None
    logits = model.adversary_logits(Tensor._wrap(features))
    return float(np.mean(np.argmax(logits.data, axis=1) == attrs))


def _safe_pc(pred, y) -> Optional[float]:
    try:
        return pearson(pred, y)
    except MetricError:
        return None


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: FairViT
    logs: list[EpochLog]
    checkpoints: list[Path]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _train_state_values(cfg: TrainConfig, epoch_done: int, optimizer) -> dict:
    values = {f"train.{k}": v for k, v in asdict(cfg).items()}
    values["state.epoch"] = epoch_done
    values["state.adam_t"] = optimizer.step_count()
    return values


def train(model: FairViT, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          run_dir=None, resume=None, stop_after: int | None = None) -> TrainResult:
    """Epoch loop with seeded shuffling, per-epoch validation and checkpointing.

    ``resume`` names a checkpoint written by this function; training
    continues from the epoch after the one it records. ``stop_after`` ends
    the loop early after that many total epochs (used to simulate
    interruption).
    """
    cfg.validate()
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    optimizer = cfg.make_optimizer()
    start_epoch = 0
    if resume is not None:
        loaded, values, tensors = load_checkpoint(resume)
        if loaded.cfg != model.cfg:
            raise ConfigError(f"{resume}: checkpoint model config differs from the model being trained")
        for name, p in model.params.items():
            p.data[...] = loaded.params[name].data
        start_epoch = int(values["state.epoch"])
        optimizer.load_state(tensors, int(values.get("state.adam_t", 0)))

    run_dir = Path(run_dir) if run_dir is not None else None
    log_path = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "epochs.jsonl"
        if resume is None:
            log_path.write_text("")
        else:
            kept = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["epoch"] < start_epoch] \
                if log_path.exists() else []
            log_path.write_text("".join(ln + "\n" for ln in kept))

    logs: list[EpochLog] = []
    checkpoints: list[Path] = []
    n = len(train_ds)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, last):
        rng = epoch_rng(cfg.seed, epoch)
        order = rng.permutation(n)
        sum_pred = sum_adv = 0.0
        correct = steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            images = train_ds.images[idx]
            if cfg.augment:
                images = augment_batch(images, rng)
            res = train_step(model, images, train_ds.scores[idx], train_ds.attrs[idx], cfg, optimizer, rng,
                             epoch=epoch, step=step)
            sum_pred += res.loss_pred * len(idx)
            if res.loss_adv is not None:
                sum_adv += res.loss_adv * len(idx)
            correct += res.adv_correct
            steps += 1
        val = evaluate(model, val_ds)
        adversarial = model.cfg.has_adversary
        log = EpochLog(
            epoch=epoch,
            loss_pred=sum_pred / n,
            loss_adv=sum_adv / n if adversarial else None,
            val_pc=_safe_pc(val.pred, val.y),
            val_mae=mae(val.pred, val.y),
            val_rmse=rmse(val.pred, val.y),
            adv_train_accuracy=correct / n if adversarial else None,
            steps=steps,
        )
        logs.append(log)
        logger.info("epoch %d: %s", epoch, log.to_json())
        if run_dir is not None:
            with log_path.open("a") as fh:
                fh.write(log.to_json() + "\n")
            ckpt = run_dir / "checkpoints" / f"epoch_{epoch:03d}.fvgan"
            save_checkpoint(ckpt, model.cfg, model.params, _train_state_values(cfg, epoch + 1, optimizer),
                            optimizer.state_tensors())
            checkpoints.append(ckpt)
    if run_dir is not None and last == cfg.epochs:
        final = run_dir / "final.fvgan"
        save_checkpoint(final, model.cfg, model.params, _train_state_values(cfg, cfg.epochs, optimizer),
                        optimizer.state_tensors())
        checkpoints.append(final)
    return TrainResult(model, logs, checkpoints)


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
