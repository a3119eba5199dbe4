"""Task preparation and the train -> export -> evaluate path shared by the
CLI and the search loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as D
from .errors import ContractError
from .intrt import IntModel, export_int, predict_int
from .model import ModelConfig, build
from .train import FitResult, TrainSpec, fit, metric, predict

SYNTH_TASKS = {
    "sine-forecast": "forecasting",
    "shapelet-classify": "classification",
    "spike-anomaly": "anomaly",
}


@dataclass
class TaskData:
    task: str
    train: D.WindowSet
    val: D.WindowSet
    test: D.WindowSet
    scaler: D.MinMax
    target_cols: list
    threshold_rule: str = "quantile"
    provenance: str = ""

    @property
    def n(self) -> int:
        return self.train.inputs.shape[1]

    @property
    def m(self) -> int:
        return self.train.inputs.shape[2]

    @property
    def k(self) -> int:
        if self.task == "classification":
            return int(max(self.train.targets.max(), self.val.targets.max(), self.test.targets.max())) + 1
        return self.train.targets.shape[1]

    @property
    def loss(self) -> str:
        return "cross_entropy" if self.task == "classification" else "mse"

    @property
    def target_scaler(self) -> D.MinMax:
        return self.scaler.select(self.target_cols)

    def model_config(self, d_model: int, bits: int = 8) -> ModelConfig:
        return ModelConfig(n=self.n, m=self.m, k=self.k, d_model=d_model, bits=bits, task=self.task)


def prepare_task(ds: D.SeriesDataset, task: str, n: int = 24, fractions=D.SPLIT_FRACTIONS, seed: int = 0,
                 downsample: int = 1, max_per_class: Optional[int] = None, threshold_rule: str = "quantile") -> TaskData:
    """Split, scale (Min-Max fitted on the training split only) and window a dataset."""
    if task == "classification":
        ws = D.class_windows(ds, n if ds.groups is None else None)
        ws = D.downsample(ws, downsample)
        train, val, test = D.split(ws, fractions, "stratified", seed=seed, max_per_class=max_per_class)
        scaler = D.MinMax.fit(train.inputs)
        for part in (train, val, test):
            part.inputs = scaler.transform(part.inputs)
        return TaskData(task, train, val, test, scaler, list(ds.target_cols), threshold_rule, ds.provenance)
    if task not in ("forecasting", "anomaly"):
        raise ContractError(f"unknown task {task!r}")
    ds = D.downsample(ds, downsample)
    parts = D.split(ds, fractions, "chronological")
    scaler = D.MinMax.fit(parts[0].features)
    windows = []
    for part in parts:
        scaled = D.SeriesDataset(scaler.transform(part.features), part.feature_names, part.target_cols, part.labels)
        windows.append(D.make_windows(scaled, n, 1, ds.target_cols))
    return TaskData(task, *windows, scaler, list(ds.target_cols), threshold_rule, ds.provenance)


def synthetic_task(kind: str, seed: int = 0, n: int = 24) -> TaskData:
    if kind not in SYNTH_TASKS:
        raise ContractError(f"unknown synthetic kind {kind!r}; choose from {sorted(SYNTH_TASKS)}")
    ds = D.synth_task(kind, seed)
    return prepare_task(ds, SYNTH_TASKS[kind], n=n, seed=seed)


# -- evaluation ----------------------------------------------------------------
@dataclass
class Threshold:
    rule: str
    value: float
    beta: Optional[float] = None

    def flags(self, res) -> np.ndarray:
        r = np.asarray(res, dtype=np.float64)
        if self.beta is not None:
            r = D.ewma(r, self.beta)
        return r > self.value

    def to_dict(self) -> dict:
        return {"rule": self.rule, "threshold": self.value, "beta": self.beta}

    @classmethod
    def from_dict(cls, d: dict) -> "Threshold":
        return cls(d["rule"], float(d["threshold"]), d.get("beta"))


def fit_threshold(rule: str, val_residuals, val_labels=None) -> Threshold:
    if rule == "quantile":
        return Threshold("quantile", D.threshold_quantile(val_residuals, 0.99))
    if rule == "ewma":
        beta, thr = D.threshold_beta_sweep(val_residuals, labels=val_labels)
        return Threshold("ewma", thr, beta)
    raise ContractError(f"unknown threshold rule {rule!r}")


def task_metrics(data: TaskData, predict_fn) -> dict:
    """Test metric (plus the anomaly threshold) for one prediction path."""
    test_pred = predict_fn(data.test.inputs)
    if data.task == "forecasting":
        return {"rmse": metric("forecasting", test_pred, data.test.targets, data.target_scaler)}
    if data.task == "classification":
        return {"accuracy": metric("classification", test_pred, data.test.targets)}
    val_res = D.residuals(predict_fn(data.val.inputs), data.val.targets)
    thr = fit_threshold(data.threshold_rule, val_res, data.val.labels)
    flags = thr.flags(D.residuals(test_pred, data.test.targets))
    labels = data.test.labels if data.test.labels is not None else np.zeros(len(flags), dtype=int)
    return {"f1": metric("anomaly", flags, labels), "threshold": thr.to_dict()}


@dataclass
class RunResult:
    fit: FitResult
    im: Optional[IntModel] = None
    metrics: dict = field(default_factory=dict)
    baseline: Optional[FitResult] = None


def train_quantized(data: TaskData, d_model: int, bits: int, spec: TrainSpec, seed: int = 0,
                    baseline: bool = False, log_path=None) -> RunResult:
    """QAT-train, export to integers and measure integer-path metrics
    (optionally alongside a float baseline of the same shape)."""
    config = data.model_config(d_model, bits)
    model = build(config, seed, mode="qat")
    fr = fit(model, data.train, data.val, spec, log_path=log_path)
    im = export_int(fr.model)
    metrics = {
        "val_loss": fr.best_val_loss,
        "best_epoch": fr.best_epoch,
        "int": task_metrics(data, lambda X: predict_int(im, X)),
        "qat": task_metrics(data, lambda X: predict(fr.model, X)),
    }
    base = None
    if baseline:
        fmodel = build(config, seed, mode="float")
        base = fit(fmodel, data.train, data.val, spec)
        metrics["float"] = task_metrics(data, lambda X: predict(base.model, X))
        metrics["float"]["val_loss"] = base.best_val_loss
    fr.metrics = metrics
    return RunResult(fr, im, metrics, base)
