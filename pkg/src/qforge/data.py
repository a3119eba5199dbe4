"""
Dataset ingestion and preparation: CSV loading, Min-Max scaling, sliding
windows, splits, synthetic fixtures and residual thresholds for anomaly
detection.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, ParseError, SchemaError

SPLIT_FRACTIONS = (0.7, 0.15, 0.15)
BETA_RANGE = (0.749, 0.971)
BETA_POINTS = 12
NAN_TOKENS = {"", "nan", "NaN", "NAN", "na", "NA", "null", "None"}


@dataclass
class LoadReport:
    rows_read: int = 0
    rows_dropped: int = 0


@dataclass
class SeriesDataset:
    """``features`` is ``T x m``. ``labels`` (classes or anomaly flags) and
    ``groups`` (window ids for pre-windowed classification data) are per step."""

    features: np.ndarray
    feature_names: list
    target_cols: list = field(default_factory=lambda: [0])
    labels: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None
    provenance: str = ""
    report: LoadReport = field(default_factory=LoadReport)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        T = len(self.features)
        for what in ("labels", "groups"):
            arr = getattr(self, what)
            if arr is not None and len(arr) != T:
                raise DataError(f"{what} length {len(arr)} != series length {T}")

    @property
    def T(self) -> int:
        return len(self.features)

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def slice(self, start: int, stop: int) -> "SeriesDataset":
        return replace(
            self,
            features=self.features[start:stop],
            labels=None if self.labels is None else self.labels[start:stop],
            groups=None if self.groups is None else self.groups[start:stop],
        )


@dataclass
class WindowSet:
    inputs: np.ndarray
    targets: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.inputs[idx], self.targets[idx], None if self.labels is None else self.labels[idx])


@dataclass(frozen=True)
class DatasetSchema:
    features: tuple
    targets: tuple = ()
    label: Optional[str] = None
    group: Optional[str] = None
    task: str = "forecasting"
    window: Optional[int] = None  # when set, overrides the run window
    downsample: int = 1
    threshold: str = "quantile"
    max_per_class: Optional[int] = None
    delimiter: str = ","

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        kw = dict(d)
        kw["features"] = tuple(kw["features"])
        kw["targets"] = tuple(kw.get("targets", ()))
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in kw.items() if k in known})

    @classmethod
    def from_json(cls, path) -> "DatasetSchema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _cell(text: str, line: int, column: str) -> float:
    text = text.strip()
    if text in NAN_TOKENS:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {line}: cannot parse {text!r} in column {column!r}", line=line) from None


def load_csv(path, schema: DatasetSchema) -> SeriesDataset:
    """Read a delimited file; rows containing NaN are dropped and counted."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        wanted = list(schema.features) + [c for c in (schema.label, schema.group) if c]
        missing = [c for c in wanted + list(schema.targets) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        col = {name: header.index(name) for name in header}
        feats, labels, groups = [], [], []
        report = LoadReport()
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            report.rows_read += 1
            if len(row) < len(header):
                raise ParseError(f"line {line}: expected {len(header)} cells, got {len(row)}", line=line)
            values = [_cell(row[col[c]], line, c) for c in schema.features]
            extra = [_cell(row[col[c]], line, c) for c in (schema.label, schema.group) if c]
            if any(math.isnan(v) for v in values + extra):
                report.rows_dropped += 1
                continue
            feats.append(values)
            if schema.label:
                labels.append(int(extra[0]))
            if schema.group:
                groups.append(int(extra[-1]))
    if not feats:
        raise DataError(f"{path}: no valid rows")
    targets = list(schema.targets) or [schema.features[0]]
    missing = [t for t in targets if t not in schema.features]
    if missing:
        raise SchemaError(f"target column(s) {missing} must also be feature columns")
    return SeriesDataset(
        features=np.array(feats),
        feature_names=list(schema.features),
        target_cols=[list(schema.features).index(t) for t in targets],
        labels=np.array(labels, dtype=np.int64) if schema.label else None,
        groups=np.array(groups, dtype=np.int64) if schema.group else None,
        provenance=str(path),
        report=report,
    )


@dataclass
class MinMax:
    min: np.ndarray
    max: np.ndarray

    @classmethod
    def fit(cls, x) -> "MinMax":
        x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
        return cls(x.min(axis=0), x.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        span = self.max - self.min
        return np.where(span > 0, span, 1.0)

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.min) / self.span

    def inverse(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.span + self.min

    def select(self, cols: Sequence[int]) -> "MinMax":
        cols = list(cols)
        return MinMax(self.min[cols], self.max[cols])

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMax":
        return cls(np.array(d["min"], dtype=np.float64), np.array(d["max"], dtype=np.float64))


def make_windows(ds, n: int, horizon: int = 1, target_cols=None) -> WindowSet:
    """Window ``t`` covers steps ``[t, t+n)``; its target is step ``t+n+horizon-1``."""
    x = ds.features if isinstance(ds, SeriesDataset) else np.asarray(ds, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if target_cols is None:
        target_cols = ds.target_cols if isinstance(ds, SeriesDataset) else [0]
    T = len(x)
    count = T - n - horizon + 1
    if n < 1 or count < 1:
        raise DataError(f"need more than {n + horizon - 1} steps for windows of {n}, got {T}")
    idx = np.arange(count)[:, None] + np.arange(n)[None, :]
    tgt = np.arange(count) + n + horizon - 1
    labels = None
    if isinstance(ds, SeriesDataset) and ds.labels is not None:
        labels = ds.labels[tgt]
    return WindowSet(x[idx], x[tgt][:, list(target_cols)], labels)


def class_windows(ds: SeriesDataset, n: Optional[int] = None) -> WindowSet:
    """Cut a labelled series into classification samples: one per group id
    when ``groups`` is present, else consecutive non-overlapping blocks of ``n``."""
    if ds.labels is None:
        raise DataError("classification windows need per-step labels")
    if ds.groups is not None:
        _, starts, counts = np.unique(ds.groups, return_index=True, return_counts=True)
        order = np.argsort(starts)
        starts, counts = starts[order], counts[order]
        if len(set(counts.tolist())) != 1:
            raise DataError(f"groups have unequal lengths {sorted(set(counts.tolist()))}")
        n = int(counts[0])
    else:
        if not n:
            raise ContractError("window length required without group ids")
        starts = np.arange(0, ds.T - n + 1, n)
    idx = starts[:, None] + np.arange(n)[None, :]
    labels = ds.labels[starts]
    return WindowSet(ds.features[idx], labels.copy(), labels.copy())


def downsample(ds, factor: int, axis: int = 0):
    """Keep every ``factor``-th step."""
    if factor < 1:
        raise ContractError(f"downsampling factor must be >= 1, got {factor}")
    if isinstance(ds, SeriesDataset):
        sl = slice(None, None, factor)
        return replace(
            ds,
            features=ds.features[sl],
            labels=None if ds.labels is None else ds.labels[sl],
            groups=None if ds.groups is None else ds.groups[sl],
        )
    if isinstance(ds, WindowSet):
        return WindowSet(ds.inputs[:, ::factor], ds.targets, ds.labels)
    x = np.asarray(ds)
    return np.take(x, np.arange(0, x.shape[axis], factor), axis=axis)


def _split_sizes(total: int, fractions) -> tuple:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ContractError(f"split fractions must be three non-negative numbers summing to 1: {fractions}")
    n_train = int(round(fractions[0] * total))
    n_val = int(round(fractions[1] * total))
    return n_train, n_val, total - n_train - n_val


def split(ds, fractions=SPLIT_FRACTIONS, mode: str = "chronological", seed: int = 0, max_per_class: Optional[int] = None):
    """Chronological split of a series, or stratified random split of a
    classification ``WindowSet`` (optionally capped per class)."""
    if mode == "chronological":
        total = ds.T if isinstance(ds, SeriesDataset) else len(ds)
        a, b, c = _split_sizes(total, fractions)
        if min(a, b, c) < 1:
            raise DataError(f"split of {total} samples into {fractions} leaves an empty part")
        if isinstance(ds, SeriesDataset):
            return ds.slice(0, a), ds.slice(a, a + b), ds.slice(a + b, total)
        return ds.subset(slice(0, a)), ds.subset(slice(a, a + b)), ds.subset(slice(a + b, total))
    if mode != "stratified":
        raise ContractError(f"unknown split mode {mode!r}")
    if not isinstance(ds, WindowSet):
        raise ContractError("stratified split expects a WindowSet of class samples")
    rng = np.random.default_rng(seed)
    labels = np.asarray(ds.targets).reshape(-1)
    parts = ([], [], [])
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        if max_per_class is not None:
            idx = idx[:max_per_class]
        a, b, _ = _split_sizes(len(idx), fractions)
        parts[0].append(idx[:a])
        parts[1].append(idx[a : a + b])
        parts[2].append(idx[a + b :])
    out = []
    for chunks in parts:
        idx = np.sort(np.concatenate(chunks))
        if len(idx) == 0:
            raise DataError(f"stratified split into {fractions} leaves an empty part")
        out.append(ds.subset(idx))
    return tuple(out)


# -- residual thresholds --------------------------------------------------------
def residuals(pred, target) -> np.ndarray:
    """Absolute residual per window, averaged across predicted variables."""
    r = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    return r.reshape(len(r), -1).mean(axis=1)


def threshold_quantile(res, q: float = 0.99) -> float:
    """Nearest-rank quantile: the ``ceil(q*N)``-th smallest value."""
    r = np.sort(np.asarray(res, dtype=np.float64).reshape(-1))
    if r.size == 0:
        raise ContractError("quantile of an empty residual set")
    rank = min(max(math.ceil(q * r.size - 1e-9), 1), r.size)
    return float(r[rank - 1])


def ewma(res, beta: float) -> np.ndarray:
    r = np.asarray(res, dtype=np.float64).reshape(-1)
    out = np.empty_like(r)
    if r.size == 0:
        return out
    out[0] = r[0]
    for t in range(1, r.size):
        out[t] = beta * out[t - 1] + (1.0 - beta) * r[t]
    return out


def beta_grid(points: int = BETA_POINTS) -> np.ndarray:
    return np.linspace(BETA_RANGE[0], BETA_RANGE[1], points)


def f1_score(flags, labels) -> float:
    flags = np.asarray(flags).astype(bool).reshape(-1)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    tp = int(np.sum(flags & labels))
    fp = int(np.sum(flags & ~labels))
    fn = int(np.sum(~flags & labels))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def threshold_beta_sweep(res, betas=None, labels=None, mode: str = "peak") -> tuple:
    """Choose an EWMA smoothing factor and threshold from validation residuals.

    For each beta the candidate threshold is the largest smoothed residual
    over anomaly-free steps. ``mode="peak"`` keeps the beta whose threshold is
    closest to the peak raw residual on those steps; ``mode="f1"`` (needs
    labels) keeps the beta with the best F1 of ``smoothed > threshold``.
    Ties go to the earlier grid point.
    """
    r = np.asarray(res, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ContractError("beta sweep over an empty residual series")
    betas = beta_grid() if betas is None else np.asarray(betas, dtype=np.float64).reshape(-1)
    if betas.size == 0:
        raise ContractError("empty beta grid")
    normal = np.ones(r.size, dtype=bool) if labels is None else ~np.asarray(labels).astype(bool)
    if not normal.any():
        normal = np.ones(r.size, dtype=bool)
    if mode == "f1" and labels is None:
        raise ContractError("f1 beta selection needs labels")
    peak = float(r[normal].max())
    best = None
    for beta in betas:
        s = ewma(r, float(beta))
        thr = float(s[normal].max())
        if mode == "f1":
            score = -f1_score(s > thr, labels)
        else:
            score = abs(thr - peak)
        if best is None or score < best[0]:
            best = (score, float(beta), thr)
    return best[1], best[2]


# -- synthetic fixtures ----------------------------------------------------------
SYNTH_KINDS = ("sine-forecast", "shapelet-classify", "spike-anomaly")


def synth_task(kind: str, seed: int = 0, length: Optional[int] = None) -> SeriesDataset:
    """Deterministic desk-scale datasets.

    sine-forecast      noiseless ``sin(2 pi t / 20 + phase)``; the next step
                       is an exact function of the window, optimal RMSE 0
    shapelet-classify  32-step windows of N(0, 0.3) noise with a class-specific
                       8-step shapelet at a random offset: 0 bump, 1 dip,
                       2 oscillation; group ids mark windows
    spike-anomaly      sine plus N(0, 0.02) noise; about 1% of steps after the
                       first 5% carry a +-(1.0..1.5) spike, labelled 1
    """
    rng = np.random.default_rng(seed)
    tag = f"synthetic:{kind}:{seed}"
    if kind == "sine-forecast":
        T = length or 1000
        t = np.arange(T)
        x = np.sin(2 * np.pi * t / 20.0 + rng.uniform(0, 2 * np.pi))
        return SeriesDataset(x[:, None], ["value"], [0], provenance=tag)
    if kind == "shapelet-classify":
        per_class, n = (length or 600) // 3, 32
        u = np.arange(8)
        shapes = [
            1.5 * np.exp(-0.5 * ((u - 3.5) / 1.5) ** 2),
            -1.5 * np.exp(-0.5 * ((u - 3.5) / 1.5) ** 2),
            1.2 * np.sin(2 * np.pi * u / 4.0),
        ]
        windows, labels = [], []
        for cls in range(3):
            for _ in range(per_class):
                w = rng.normal(0, 0.3, n)
                off = rng.integers(0, n - 8 + 1)
                w[off : off + 8] += shapes[cls]
                windows.append(w)
                labels.append(cls)
        order = rng.permutation(len(windows))
        feats = np.concatenate([windows[i] for i in order])[:, None]
        lab = np.repeat(np.array(labels)[order], n)
        groups = np.repeat(np.arange(len(order)), n)
        return SeriesDataset(feats, ["value"], [0], labels=lab, groups=groups, provenance=tag)
    if kind == "spike-anomaly":
        T = length or 2000
        t = np.arange(T)
        clean = np.sin(2 * np.pi * t / 25.0)
        x = clean + rng.normal(0, 0.02, T)
        labels = np.zeros(T, dtype=np.int64)
        start = T // 20
        spikes = rng.choice(np.arange(start, T), size=max(1, T // 100), replace=False)
        x[spikes] += rng.choice([-1.0, 1.0], size=spikes.size) * rng.uniform(1.0, 1.5, spikes.size)
        labels[spikes] = 1
        return SeriesDataset(x[:, None], ["value"], [0], labels=labels, provenance=tag)
    raise ContractError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")


def synth_clean_signal(T: int) -> np.ndarray:
    """Noise- and spike-free signal behind ``spike-anomaly``."""
    return np.sin(2 * np.pi * np.arange(T) / 25.0)
