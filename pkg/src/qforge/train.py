"""Training loop (Adam, early stopping), losses and task metrics."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import MinMax, WindowSet, f1_score
from .errors import ContractError, DataError, ShapeError, TrainingError
from .tensor import Tensor, no_grad

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "wall_time_s")


@dataclass
class TrainSpec:
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    loss: str = "mse"
    seed: int = 0
    clip_norm: Optional[float] = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if not 0 < self.patience < self.max_epochs:
            raise ContractError(f"patience {self.patience} must lie in (0, max_epochs={self.max_epochs})")
        if self.loss not in ("mse", "cross_entropy"):
            raise ContractError(f"unknown loss {self.loss!r}")


@dataclass
class FitResult:
    best_val_loss: float
    best_epoch: int
    history: list = field(default_factory=list)
    model: object = None
    metrics: dict = field(default_factory=dict)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for row in self.history:
                w.writerow([row[c] for c in LOG_COLUMNS])


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- losses ------------------------------------------------------------------
def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return T.mean(diff * diff)


def cross_entropy_loss(logits: Tensor, target) -> Tensor:
    target = np.asarray(target).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or len(target) != logits.shape[0]:
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape} vs {len(target)} targets")
    k = logits.shape[1]
    if target.min(initial=0) < 0 or target.max(initial=0) >= k:
        raise ContractError(f"class index outside [0, {k})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(target)), target] = 1.0
    return -T.tsum(T.log_softmax_rows(logits) * onehot) * (1.0 / len(target))


def _loss(kind, pred, target):
    return mse_loss(pred, target) if kind == "mse" else cross_entropy_loss(pred, target)


# -- metrics -----------------------------------------------------------------
def rmse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def accuracy(pred, target) -> float:
    pred = np.asarray(pred)
    labels = pred.argmax(axis=-1) if pred.ndim > 1 else pred
    return float(np.mean(labels.reshape(-1) == np.asarray(target).reshape(-1)))


def metric(task: str, preds, targets, denorm: Optional[MinMax] = None) -> float:
    """RMSE on denormalised values (forecasting), accuracy (classification)
    or F1 of the anomaly class (anomaly; ``preds`` are binary flags)."""
    if task == "forecasting":
        if denorm is None:
            raise ContractError("forecasting RMSE needs the target Min-Max scaler")
        return rmse(denorm.inverse(preds), denorm.inverse(targets))
    if task == "classification":
        return accuracy(preds, targets)
    if task == "anomaly":
        return f1_score(preds, targets)
    raise ContractError(f"unknown task {task!r}")


# -- loop ------------------------------------------------------------------
def predict(model, X, batch_size: int = 512) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = []
    with no_grad():
        for i in range(0, len(X), batch_size):
            y = model.forward(X[i : i + batch_size], training=False).data
            out.append(y.reshape(len(y), -1))
    return np.concatenate(out, axis=0)


def evaluate_loss(model, ws: WindowSet, kind: str, batch_size: int = 512) -> float:
    pred = predict(model, ws.inputs, batch_size)
    with no_grad():
        return float(_loss(kind, Tensor(pred), ws.targets).data)


def fit(model, train: WindowSet, val: WindowSet, spec: TrainSpec, log_path=None) -> FitResult:
    """Minimise the task loss with Adam; stop after ``patience`` epochs
    without validation improvement and restore the best epoch."""
    if len(train) == 0 or len(val) == 0:
        raise DataError("training and validation splits must be non-empty")
    rng = np.random.default_rng(spec.seed)
    params = model.parameters()
    opt = Adam(params, lr=spec.lr)
    best_loss, best_epoch, best_state, wait = math.inf, 0, None, 0
    history = []
    start = time.perf_counter()
    for epoch in range(1, spec.max_epochs + 1):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for i in range(0, len(order), spec.batch_size):
            idx = order[i : i + spec.batch_size]
            model.zero_grad()
            out = model.forward(train.inputs[idx], training=True)
            pred = out.reshape(len(idx), -1)
            loss = _loss(spec.loss, pred, train.targets[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            loss.backward()
            if spec.clip_norm:
                clip_grad_norm(params, spec.clip_norm)
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        val_loss = evaluate_loss(model, val, spec.loss)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        history.append({
            "epoch": epoch,
            "train_loss": total / seen,
            "val_loss": val_loss,
            "lr": spec.lr,
            "wall_time_s": round(time.perf_counter() - start, 3),
        })
        if val_loss < best_loss:
            best_loss, best_epoch, wait = val_loss, epoch, 0
            best_state = model.state_dict()
        else:
            wait += 1
            if wait >= spec.patience:
                break
    model.load_state_dict(best_state)
    if hasattr(model, "freeze_observers") and getattr(model, "mode", "float") == "qat":
        model.freeze_observers()
    result = FitResult(best_loss, best_epoch, history, model)
    if log_path:
        result.write_log(log_path)
    return result
