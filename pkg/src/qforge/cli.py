"""
Command-line entry point.

    qforge train       --data synth:sine-forecast --out runs/sine --baseline
    qforge search      --data synth:sine-forecast --trials 20 --out runs/search
    qforge export-vhdl --model runs/sine/model_int.json --platform xc7s15 --out rtl/
    qforge infer       --model runs/sine/model_int.json --input series.csv --out preds.csv

Settings come from flags, then a TOML file (``--config``), then defaults.
Exit status: 0 success, 2 input error, 3 constraint violation, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import data as D
from . import hwmodel as hw
from . import plotting
from .codegen import MIN_VECTORS, emit_design
from .errors import ContractError, DataError, QforgeError
from .intrt import (
    export_int, int_forward, load_document, load_int_model, predict_int, quantize_input, save_model,
)
from .model import build
from .pipeline import SYNTH_TASKS, TaskData, Threshold, fit_threshold, prepare_task, synthetic_task, task_metrics
from .search import COMPLETED, SearchSettings, SearchSpace, pareto_front, run_search
from .train import TrainSpec, fit, predict

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("qforge")

EXIT_OK, EXIT_INPUT, EXIT_CONSTRAINT, EXIT_INTERNAL = 0, 2, 3, 4
SYNTH_PREFIX = "synth:"


class InputError(QforgeError):
    """Bad command-line input (exit status 2)."""


class ConstraintViolation(QforgeError):
    """A design exceeds its platform budget under --strict (exit status 3)."""


@dataclass
class RunConfig:
    data: str = "synth:sine-forecast"
    schema: Optional[str] = None
    task: Optional[str] = None
    window: int = 24
    d_model: int = 16
    bits: int = 8
    batch_size: int = 32
    lr: float = 2e-3
    max_epochs: int = 100
    patience: int = 10
    platform: str = "xc7s15"
    trials: int = 20
    seed: int = 0
    out: str = "qforge_out"
    baseline: bool = False
    strict: bool = False

    def digest(self) -> str:
        """Hash of every setting that affects results (the output path does not)."""
        d = asdict(self)
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def _flatten(doc: dict) -> dict:
    flat = {}
    for k, v in doc.items():
        if isinstance(v, dict):
            flat.update(_flatten(v))
        else:
            flat[k.replace("-", "_")] = v
    return flat


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """flags > TOML file > defaults; every reference is checked before work starts."""
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                doc = _flatten(tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise InputError(f"{path}: {exc}") from None
        unknown = sorted(set(doc) - set(_CONFIG_FIELDS))
        if unknown:
            raise InputError(f"{path}: unknown settings {unknown}")
        values.update(doc)
    for name in _CONFIG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise InputError(str(exc)) from None
    _check_references(cfg)
    return cfg


def _check_references(cfg: RunConfig) -> None:
    try:
        TrainSpec(batch_size=cfg.batch_size, lr=cfg.lr, max_epochs=cfg.max_epochs, patience=cfg.patience)
    except ContractError as exc:
        raise InputError(str(exc)) from None
    if cfg.d_model < 1 or cfg.window < 2 or cfg.trials < 1:
        raise InputError("d_model, window and trials must be positive (window >= 2)")
    if cfg.bits not in (4, 6, 8):
        raise InputError(f"bits must be 4, 6 or 8, got {cfg.bits}")
    if cfg.data.startswith(SYNTH_PREFIX):
        kind = cfg.data[len(SYNTH_PREFIX):]
        if kind not in SYNTH_TASKS:
            raise InputError(f"unknown synthetic data {kind!r}; choose from {sorted(SYNTH_TASKS)}")
    else:
        if not Path(cfg.data).is_file():
            raise InputError(f"dataset file not found: {cfg.data}")
        if not cfg.schema:
            raise InputError("a CSV dataset needs --schema (a dataset schema JSON file)")
        if not Path(cfg.schema).is_file():
            raise InputError(f"schema file not found: {cfg.schema}")
    try:
        hw.load_platform(cfg.platform)
    except ContractError as exc:
        raise InputError(str(exc)) from None


def load_task(cfg: RunConfig) -> TaskData:
    if cfg.data.startswith(SYNTH_PREFIX):
        kind = cfg.data[len(SYNTH_PREFIX):]
        if cfg.task and cfg.task != SYNTH_TASKS[kind]:
            raise InputError(f"synthetic data {kind!r} is a {SYNTH_TASKS[kind]} task, not {cfg.task}")
        return synthetic_task(kind, cfg.seed, n=cfg.window)
    schema = D.DatasetSchema.from_json(cfg.schema)
    ds = D.load_csv(cfg.data, schema)
    return prepare_task(ds, cfg.task or schema.task, n=schema.window or cfg.window, seed=cfg.seed,
                        downsample=schema.downsample, max_per_class=schema.max_per_class,
                        threshold_rule=schema.threshold)


def _feature_names(cfg: RunConfig) -> Optional[list]:
    if cfg.data.startswith(SYNTH_PREFIX):
        return None
    return list(D.DatasetSchema.from_json(cfg.schema).features)


def _train_spec(cfg: RunConfig, data: TaskData) -> TrainSpec:
    return TrainSpec(batch_size=cfg.batch_size, lr=cfg.lr, max_epochs=cfg.max_epochs,
                     patience=cfg.patience, loss=data.loss, seed=cfg.seed)


def _num(v) -> str:
    """Shortest round-tripping text of a number ('' when absent)."""
    return "" if v is None else repr(float(v))


def _json_dump(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands ------------------------------------------------------------------
def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_task(cfg)
    spec = _train_spec(cfg, data)
    digest = cfg.digest()
    model = build(data.model_config(cfg.d_model, cfg.bits), cfg.seed, mode="qat")
    fr = fit(model, data.train, data.val, spec, log_path=out / "train_log.csv")
    im = export_int(fr.model)
    metrics = {
        "config_hash": digest,
        "task": data.task,
        "val_loss": fr.best_val_loss,
        "best_epoch": fr.best_epoch,
        "epochs": len(fr.history),
        "qat": task_metrics(data, lambda X: predict(fr.model, X)),
        "int": task_metrics(data, lambda X: predict_int(im, X)),
    }
    if cfg.baseline:
        base = fit(build(data.model_config(cfg.d_model, cfg.bits), cfg.seed, mode="float"), data.train, data.val, spec)
        metrics["float"] = task_metrics(data, lambda X: predict(base.model, X))
        metrics["float"]["val_loss"] = base.best_val_loss
    est = hw.estimate(im, hw.load_platform(cfg.platform))
    metrics["hw"] = est.to_dict()
    meta = {"config_hash": digest, "run_config": asdict(cfg), "version": __version__,
            "scaler": data.scaler.to_dict(), "target_cols": list(data.target_cols), "task": data.task,
            "feature_names": _feature_names(cfg)}
    if data.task == "anomaly":
        thr = metrics["int"]["threshold"]
        meta["threshold"] = thr
        _json_dump(out / "threshold.json", thr)
    save_model(out / "model.json", fr.model, None, meta)
    save_model(out / "model_int.json", None, im, meta)
    _json_dump(out / "metrics.json", metrics)

    comments = [f"config_hash={digest}"]
    hist = fr.history
    plotting.write_table(out / "train_log.dat", {
        "epoch": [h["epoch"] for h in hist], "train_loss": [h["train_loss"] for h in hist],
        "val_loss": [h["val_loss"] for h in hist]}, comments)
    (out / "train_log.gp").write_text(plotting.training_gnuplot("train_log.dat", "train_log_gnuplot.png", comments))
    plotting.plot_training(hist, out / "train_log.png", title=f"{data.task}, b={cfg.bits}, d={cfg.d_model}")

    print(_format_metrics(metrics))
    return EXIT_OK


def _format_metrics(m: dict) -> str:
    rows = [("path", "metric", "value")]
    for path in ("float", "qat", "int"):
        for k, v in m.get(path, {}).items():
            if isinstance(v, float):
                rows.append((path, k, f"{v:.6g}"))
    w = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join("  ".join(c.ljust(w[i]) for i, c in enumerate(r)) for r in rows)


def cmd_search(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_task(cfg)
    platform = hw.load_platform(cfg.platform)
    digest = cfg.digest()
    ledger_path = out / "ledger.jsonl"
    settings = SearchSettings(max_epochs=cfg.max_epochs, patience=cfg.patience)
    ledger = run_search(SearchSpace(), data, platform, cfg.trials, cfg.seed, ledger_path, settings)
    front = pareto_front(ledger)
    members = {t.index for t in front.members}

    metric_keys = sorted({k for t in ledger if t.status == COMPLETED for k, v in t.metrics.items()
                          if isinstance(v, float)})
    with open(out / "pareto.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "val_loss", "energy_mj", "bits", "batch_size", "lr", "d_model",
                    "latency_ms", "power_mw", "luts", "dsps", "brams", *metric_keys])
        for t in front.members:
            c, h = t.config, t.hw
            w.writerow([t.index, _num(t.val_loss), _num(t.energy), c["bits"], c["batch_size"], _num(c["lr"]),
                        c["d_model"], _num(h["latency_ms"]), _num(h["power_mw"]), h["luts"], h["dsps"], h["brams"],
                        *[_num(t.metrics.get(k)) for k in metric_keys]])
    done = [t for t in ledger if t.status == COMPLETED]
    comments = [f"config_hash={digest}", f"platform={platform.name}", f"trials={len(ledger)}"]
    plotting.write_table(out / "pareto.dat", {
        "trial": [t.index for t in done], "val_loss": [t.val_loss for t in done],
        "energy_mj": [t.energy for t in done], "on_front": [t.index in members for t in done]}, comments)
    (out / "pareto.gp").write_text(plotting.pareto_gnuplot("pareto.dat", "pareto_gnuplot.png", comments))
    if done:
        plotting.plot_pareto([t.objectives for t in done], [t.index in members for t in done],
                             out / "pareto.png", title=f"{data.task} on {platform.name}")
    summary = {"config_hash": digest, "trials": len(ledger), "front": sorted(members), "empty_front": front.empty,
               "status": {s: sum(t.status == s for t in ledger) for s in sorted({t.status for t in ledger})}}
    _json_dump(out / "search_summary.json", summary)

    print(f"{len(ledger)} trials: " + ", ".join(f"{k} {v}" for k, v in summary["status"].items()))
    if front.empty:
        print("no completed trials; the Pareto front is empty")
    for t in sorted(front.members, key=lambda t: t.val_loss):
        c = t.config
        print(f"  trial {t.index:3d}  loss {t.val_loss:.5g}  energy {t.energy:.5g} mJ  "
              f"b={c['bits']} d={c['d_model']} bs={c['batch_size']} lr={c['lr']:.3g}")
    return EXIT_OK


def estimate_table(est: hw.HwEstimate, p: hw.PlatformSpec) -> str:
    util = est.utilization(p)
    lines = [
        f"platform   {p.name} @ {p.clock_hz / 1e6:g} MHz",
        f"LUT        {est.luts} / {p.luts} ({util['lut']:.1f}%)",
        f"DSP        {est.dsps} / {p.dsps} ({util['dsp']:.1f}%)",
        f"BRAM       {est.brams} / {p.brams} ({util['bram']:.1f}%)",
        f"cycles     {est.cycles}",
        f"latency    {est.latency_ms!r} ms",
        f"power      {est.power_mw!r} mW",
        f"energy     {est.energy_mj!r} mJ",
        f"deployable {'yes' if est.deployable else 'no (' + ', '.join(est.reasons) + ')'}",
    ]
    return "\n".join(lines)


def cmd_export_vhdl(model_path: str, platform_name: str, out: str, strict: bool = False, vectors: int = 10, seed: int = 0) -> int:
    if not Path(model_path).is_file():
        raise InputError(f"model file not found: {model_path}")
    if vectors < MIN_VECTORS:
        raise InputError(f"--vectors must be at least {MIN_VECTORS}, got {vectors}")
    try:
        im = load_int_model(model_path)
        p = hw.load_platform(platform_name)
    except ContractError as exc:
        raise InputError(str(exc)) from None
    est = hw.estimate(im, p)
    print(estimate_table(est, p))
    if not est.deployable:
        msg = f"design exceeds the {p.name} budget: {', '.join(est.reasons)}"
        if strict:
            raise ConstraintViolation(msg)
        print(f"warning: {msg}", file=sys.stderr)
    design = emit_design(im, p, vectors=vectors, seed=seed)
    files = design.write(out)
    _json_dump(Path(out) / "estimate.json", est.to_dict())
    print(f"wrote {len(files) + 1} files to {out}")
    return EXIT_OK


def _read_codes(path, n: int, m: int) -> np.ndarray:
    vals = []
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                try:
                    vals.append(int(line))
                except ValueError:
                    raise InputError(f"{path}: line {i}: not an integer code: {line.strip()!r}") from None
    if len(vals) % (n * m):
        raise InputError(f"{path}: {len(vals)} codes do not form complete {n}x{m} windows "
                         f"(incomplete window starting at code {len(vals) - len(vals) % (n * m)})")
    return np.array(vals, dtype=np.int64).reshape(-1, n, m)


def _read_series(path, meta: dict, m: int) -> np.ndarray:
    """Rows of the input CSV as a (T, m) array, in the model's feature order."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    names = meta.get("feature_names") or []
    numeric_header = all(_is_number(h) for h in header)
    if numeric_header:
        body, cols = rows, list(range(len(header)))
    elif names and all(nm in header for nm in names):
        body, cols = rows[1:], [header.index(nm) for nm in names]
    else:
        body, cols = rows[1:], list(range(len(header)))
    if len(cols) != m:
        raise InputError(f"{path}: expected {m} feature columns, found {len(cols)}")
    out = np.empty((len(body), m))
    first = 1 if numeric_header else 2
    for r, row in enumerate(body):
        try:
            out[r] = [float(row[c]) for c in cols]
        except (ValueError, IndexError):
            raise InputError(f"{path}: row {r + first}: malformed window row {row!r}") from None
    return out


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_infer(model_path: str, input_path: str, out: str, codes: bool = False, threshold_path: Optional[str] = None) -> int:
    for p in (model_path, input_path):
        if not Path(p).is_file():
            raise InputError(f"file not found: {p}")
    try:
        im = load_int_model(model_path)
    except ContractError as exc:
        raise InputError(str(exc)) from None
    meta = load_document(model_path).get("meta", {})
    cfg = im.config
    n, m, k = cfg.n, cfg.m, cfg.k
    targets = None
    if codes:
        x_q = _read_codes(input_path, n, m)
    else:
        series = _read_series(input_path, meta, m)
        if "scaler" not in meta:
            raise InputError(f"{model_path}: no input scaler stored; use --codes for raw integer inputs")
        scaled = D.MinMax.from_dict(meta["scaler"]).transform(series)
        if cfg.task == "classification":
            if len(scaled) % n:
                raise InputError(f"{input_path}: row {len(scaled) - len(scaled) % n + 2}: incomplete window "
                                 f"({len(scaled) % n} of {n} rows)")
            windows = scaled.reshape(-1, n, m)
        else:
            if len(scaled) < n:
                raise InputError(f"{input_path}: {len(scaled)} rows, a window needs {n}")
            windows = np.stack([scaled[i : i + n] for i in range(len(scaled) - n + 1)])
            tcols = [int(c) for c in meta.get("target_cols", [])]
            if tcols and len(scaled) > n:
                targets = scaled[n:, tcols]
        x_q = quantize_input(im, windows)
    y = int_forward(im, x_q).values.reshape(-1, k)
    deq = im.output_qp.scale * (y - im.output_qp.zero_point)
    header = ["window"] + [f"y{j}_code" for j in range(k)] + [f"y{j}" for j in range(k)]
    cols = [np.arange(len(y))[:, None], y, deq]
    if cfg.task != "classification" and "scaler" in meta and meta.get("target_cols"):
        # forecasts back in the units of the input series
        tsc = D.MinMax.from_dict(meta["scaler"]).select([int(c) for c in meta["target_cols"]])
        header += [f"y{j}_value" for j in range(k)]
        cols.append(tsc.inverse(deq))
    if cfg.task == "anomaly":
        thr_doc = None
        if threshold_path:
            with open(threshold_path) as fh:
                thr_doc = json.load(fh)
        elif "threshold" in meta:
            thr_doc = meta["threshold"]
        if thr_doc is not None and targets is not None:
            res = D.residuals(deq[: len(targets)], targets)
            flags = Threshold.from_dict(thr_doc).flags(res).astype(int)
            flags = np.concatenate([flags, np.zeros(len(y) - len(flags), dtype=int)])
            header += ["residual", "anomaly"]
            res_col = np.concatenate([res, np.full(len(y) - len(res), np.nan)])
            cols += [res_col[:, None], flags[:, None]]
    table = np.concatenate([np.asarray(c, dtype=object) for c in cols], axis=1)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else int(v) for v in row])
    print(f"wrote {len(y)} predictions to {out}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------
def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML settings file (flags override it)")
    p.add_argument("--data", help="CSV dataset path or synth:<kind> (sine-forecast, shapelet-classify, spike-anomaly)")
    p.add_argument("--schema", help="dataset schema JSON for CSV data")
    p.add_argument("--task", choices=("forecasting", "classification", "anomaly"))
    p.add_argument("--window", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--bits", type=int, choices=(4, 6, 8))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--platform")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qforge", description="Quantized tiny Transformers for FPGA deployment.")
    ap.add_argument("--version", action="version", version=f"qforge {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="QAT-train one configuration and export it to integers")
    _add_run_flags(p)
    p.add_argument("--baseline", action="store_true", default=None, help="also train a float model of the same shape")

    p = sub.add_parser("search", help="hardware-aware NSGA-II search")
    _add_run_flags(p)
    p.add_argument("--trials", type=int)

    p = sub.add_parser("export-vhdl", help="emit VHDL, constraints, testbench and golden vectors")
    p.add_argument("--model", required=True, help="model file with an integer section")
    p.add_argument("--platform", default="xc7s15")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true", help="exit 3 instead of warning when over budget")
    p.add_argument("--vectors", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("infer", help="integer-only inference on a CSV series or golden codes")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--codes", action="store_true", help="input holds integer codes, one per line")
    p.add_argument("--threshold", help="threshold JSON for anomaly flags (defaults to the one stored in the model)")

    p = sub.add_parser("platforms", help="list platform profiles")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            return cmd_train(resolve_config(args))
        if args.command == "search":
            return cmd_search(resolve_config(args))
        if args.command == "export-vhdl":
            return cmd_export_vhdl(args.model, args.platform, args.out, args.strict, args.vectors, args.seed)
        if args.command == "infer":
            return cmd_infer(args.model, args.input, args.out, args.codes, args.threshold)
        if args.command == "platforms":
            for name in hw.list_platforms():
                p = hw.load_platform(name)
                print(f"{name:12s} {p.clock_hz / 1e6:g} MHz  LUT {p.luts}  DSP {p.dsps}  BRAM {p.brams}")
            return EXIT_OK
    except ConstraintViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (InputError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - stable exit-status contract
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
