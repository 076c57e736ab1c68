"""Adam, cross-entropy, the training loop and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import engine as E
from .backbone import Model
from .engine import Tensor
from .engine.tensor import make_result
from .hsi import PatchSet
from .metrics import ConfusionMatrix

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 16
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int = 0  # 0 disables early stopping

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def init_adam_state(params: Sequence[Tensor]) -> List[AdamSlot]:
    return [AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params]


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: List[AdamSlot], cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(state) or len(grads) != len(params):
        raise ValueError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state)} state slots")
    b1, b2 = cfg.betas
    for p, g, s in zip(params, grads, state):
        if s.m.shape != p.data.shape:
            raise ValueError(f"adam_step: state shape {s.m.shape} does not match parameter {p.data.shape}")
        g = np.zeros_like(p.data) if g is None else g
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        s.t += 1
        s.m *= b1
        s.m += (1.0 - b1) * g
        s.v *= b2
        s.v += (1.0 - b2) * g * g
        m_hat = s.m / (1.0 - b1 ** s.t)
        v_hat = s.v / (1.0 - b2 ** s.t)
        p.data -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` (0-based class indices) under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    b, k = logits.shape
    if targets.shape != (b,):
        raise ValueError(f"cross_entropy: {targets.shape} targets for {b} logits rows")
    if b and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"cross_entropy: targets must lie in [0, {k}), got range "
                         f"[{targets.min()}, {targets.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, targets].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / b),)

    return make_result(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def batches(n: int, size: int, order: Optional[np.ndarray] = None):
    order = np.arange(n) if order is None else order
    for lo in range(0, n, size):
        yield order[lo:lo + size]


def predict_logits(model: Model, patches: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with E.no_grad():
        for idx in batches(len(patches), batch_size):
            out.append(model(Tensor(patches[idx]), training=False).data)
    if not out:
        return np.zeros((0, model.cfg.num_classes), dtype=np.float32)
    return np.concatenate(out)


def predict(model: Model, patches: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """0-based class predictions; ties go to the lower class index."""
    return predict_logits(model, patches, batch_size).argmax(axis=1)


def evaluate(model: Model, data: PatchSet, batch_size: int = 64) -> ConfusionMatrix:
    pred = predict(model, data.patches, batch_size)
    return ConfusionMatrix.from_pairs(data.labels - 1, pred, model.cfg.num_classes)


def _loss_acc(model: Model, data: PatchSet, batch_size: int) -> Tuple[float, float]:
    if len(data) == 0:
        return float("nan"), float("nan")
    logits = predict_logits(model, data.patches, batch_size)
    loss = cross_entropy(Tensor(logits.astype(np.float64)), data.labels - 1).item()
    return loss, float((logits.argmax(axis=1) == data.labels - 1).mean())


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.train_loss:.6f},{self.train_acc:.6f},"
                f"{self.val_loss:.6f},{self.val_acc:.6f}")


@dataclass
class TrainResult:
    model: Model
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


def write_curves(records: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(r.csv_row() + "\n")


def _snapshot(model: Model):
    return {name: arr.copy() for name, arr in model.state_items()}


def train(model: Model, train_set: PatchSet, val_set: PatchSet, cfg: TrainConfig,
          curves_csv=None) -> TrainResult:
    """Mini-batch Adam on cross-entropy; keeps the best-validation weights.

    The batch order is drawn from ``cfg.seed`` so the run is reproducible.
    Validation is ranked by accuracy, then by lower loss; with no validation
    samples the final epoch is kept.
    """
    if len(train_set) == 0:
        raise ValueError("train: empty training set")
    params = model.parameters()
    state = init_adam_state(params)
    rng = np.random.default_rng(cfg.seed)
    targets = train_set.labels - 1
    result = TrainResult(model)
    best_key, best_state, stale = None, None, 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        loss_sum, correct = 0.0, 0
        for idx in batches(len(train_set), cfg.batch_size, order):
            model.zero_grad()
            logits = model(Tensor(train_set.patches[idx]), training=True)
            loss = cross_entropy(logits, targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
            E.backward(loss)
            adam_step(params, [p.grad for p in params], state, cfg)
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == targets[idx]).sum())
        val_loss, val_acc = _loss_acc(model, val_set, max(cfg.batch_size, 64))
        rec = EpochRecord(epoch, loss_sum / len(train_set), correct / len(train_set), val_loss, val_acc)
        result.records.append(rec)
        log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch, rec.train_loss,
                 rec.train_acc, val_loss, val_acc)
        if curves_csv is not None:
            write_curves(result.records, curves_csv)

        if len(val_set) == 0:
            best_state, result.best_epoch = None, epoch
            continue
        key = (val_acc, -val_loss)
        if best_key is None or key > best_key:
            best_key, best_state, result.best_epoch, stale = key, _snapshot(model), epoch, 0
        else:
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                log.info("early stop after epoch %d (best %d)", epoch, result.best_epoch)
                break

    if best_state is not None:
        model.load_state(best_state)
    return result
