"""
Integer-only inference: export of a QAT model and a bit-exact software twin
of the generated hardware.

``int_forward`` uses nothing but integer array arithmetic. Every scale ratio
is compiled at export time into a multiplier/shift pair, the softmax uses a
power-of-two lookup table, and the time-average divides with round-half-up.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, ShapeError, StateError
from .model import ACTIVATIONS, LINEARS, ModelConfig, TransformerModel, probs_qparams
from .quant import (
    ACC_BITS,
    LOG2_E,
    SOFTMAX_FRAC_BITS,
    SOFTMAX_GUARD_BITS,
    AddPlan,
    ChannelPlan,
    QuantParams,
    RequantPlan,
    bias_qparams,
    divide_round,
    plan_add,
    plan_channels,
    plan_requant,
    quantize,
    round_half_away,
    weight_qparams,
)

DEBUG = bool(os.environ.get("QFORGE_DEBUG"))

# shared with the VHDL package: 2**(j / 2**f) in Q.f, j = 0 .. 2**f - 1
EXP2_LUT = round_half_away(2.0 ** (np.arange(1 << SOFTMAX_FRAC_BITS) / (1 << SOFTMAX_FRAC_BITS)) * (1 << SOFTMAX_FRAC_BITS)).astype(np.int64)
LUT_ACCESS_CYCLES = 2


def exp2_lut(frac_bits: int = SOFTMAX_FRAC_BITS) -> np.ndarray:
    if frac_bits == SOFTMAX_FRAC_BITS:
        return EXP2_LUT
    size = 1 << frac_bits
    return round_half_away(2.0 ** (np.arange(size) / size) * size).astype(np.int64)


@dataclass(frozen=True)
class IntTensor:
    values: np.ndarray
    qp: QuantParams

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return self.qp.scale * (self.values.astype(np.float64) - self.qp.zero_point)


@dataclass
class IntLinear:
    name: str
    weight: np.ndarray
    w_qp: QuantParams
    bias: np.ndarray
    in_qp: QuantParams
    plan: RequantPlan
    relu: bool = False

    @property
    def shape(self):
        return self.weight.shape

    def to_dict(self) -> dict:
        return {
            "weight": {"shape": list(self.weight.shape), "data": [int(v) for v in self.weight.reshape(-1)]},
            "w_qp": self.w_qp.to_dict(),
            "bias": [int(v) for v in self.bias],
            "in_qp": self.in_qp.to_dict(),
            "plan": self.plan.to_dict(),
            "relu": self.relu,
        }

    @classmethod
    def from_dict(cls, name: str, d: dict) -> "IntLinear":
        w = np.array(d["weight"]["data"], dtype=np.int64).reshape(d["weight"]["shape"])
        return cls(
            name, w, QuantParams.from_dict(d["w_qp"]), np.array(d["bias"], dtype=np.int64),
            QuantParams.from_dict(d["in_qp"]), RequantPlan.from_dict(d["plan"]), bool(d["relu"]),
        )


@dataclass
class IntModel:
    config: ModelConfig
    bits: int
    qparams: dict
    linears: dict
    pe: np.ndarray
    pe_bits: int
    embed_plan: RequantPlan
    score_plan: RequantPlan
    context_plan: RequantPlan
    res1: AddPlan
    bn1: ChannelPlan
    res2: AddPlan
    bn2: ChannelPlan
    frac_bits: int = SOFTMAX_FRAC_BITS

    @property
    def input_qp(self) -> QuantParams:
        return self.qparams["input"]

    @property
    def output_qp(self) -> QuantParams:
        return self.qparams["output"]

    @property
    def probs_qp(self) -> QuantParams:
        return self.qparams["probs"]

    def layers(self) -> list:
        """Hardware layers in execution order as ``(name, kind)`` pairs."""
        return [
            ("in_proj", "linear"), ("embed", "pe_add"), ("q", "linear"), ("k", "linear"),
            ("v", "linear"), ("scores", "score_matmul"), ("softmax", "softmax"),
            ("context", "context_matmul"), ("attn_out", "linear"), ("res1", "residual_add"),
            ("bn1", "batchnorm"), ("ff1", "linear"), ("ff2", "linear"), ("res2", "residual_add"),
            ("bn2", "batchnorm"), ("gap", "avgpool"), ("out", "linear"),
        ]

    def check_ranges(self) -> None:
        """Every stored integer lies within its declared width."""
        b = self.bits
        for name, lin in self.linears.items():
            _check_width(lin.weight, b, f"{name}.weight")
            _check_width(lin.bias, ACC_BITS, f"{name}.bias")
        _check_width(self.pe, self.pe_bits, "pe")

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "frac_bits": self.frac_bits,
            "qparams": {k: v.to_dict() for k, v in sorted(self.qparams.items())},
            "linears": {k: self.linears[k].to_dict() for k in LINEARS},
            "pe": {"shape": list(self.pe.shape), "bits": self.pe_bits, "data": [int(v) for v in self.pe.reshape(-1)]},
            "embed_plan": self.embed_plan.to_dict(),
            "score_plan": self.score_plan.to_dict(),
            "context_plan": self.context_plan.to_dict(),
            "res1": self.res1.to_dict(),
            "bn1": self.bn1.to_dict(),
            "res2": self.res2.to_dict(),
            "bn2": self.bn2.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, config: ModelConfig) -> "IntModel":
        pe = np.array(d["pe"]["data"], dtype=np.int64).reshape(d["pe"]["shape"])
        return cls(
            config=config,
            bits=int(d["bits"]),
            qparams={k: QuantParams.from_dict(v) for k, v in d["qparams"].items()},
            linears={k: IntLinear.from_dict(k, v) for k, v in d["linears"].items()},
            pe=pe,
            pe_bits=int(d["pe"]["bits"]),
            embed_plan=RequantPlan.from_dict(d["embed_plan"]),
            score_plan=RequantPlan.from_dict(d["score_plan"]),
            context_plan=RequantPlan.from_dict(d["context_plan"]),
            res1=AddPlan.from_dict(d["res1"]),
            bn1=ChannelPlan.from_dict(d["bn1"]),
            res2=AddPlan.from_dict(d["res2"]),
            bn2=ChannelPlan.from_dict(d["bn2"]),
            frac_bits=int(d.get("frac_bits", SOFTMAX_FRAC_BITS)),
        )


def _check_width(arr, bits, what):
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if arr.size and (arr.min() < lo or arr.max() > hi):
        raise StateError(f"{what} exceeds its {bits}-bit range")


def signed_width(arr: np.ndarray) -> int:
    peak = int(np.abs(arr).max()) if arr.size else 0
    return max(2, peak.bit_length() + 1)


# -- export ------------------------------------------------------------------
_LINEAR_IO = {
    "in_proj": ("input", "proj"), "q": ("embed", "q"), "k": ("embed", "k"), "v": ("embed", "v"),
    "attn_out": ("context", "attn_out"), "ff1": ("bn1", "ff1"), "ff2": ("ff1", "ff2"), "out": ("bn2", "output"),
}


def export_int(model: TransformerModel) -> IntModel:
    if not model.observers_frozen:
        raise StateError("observers must be frozen before integer export")
    cfg, b = model.config, model.config.bits
    qps = model.activation_qparams()
    missing = [name for name in ACTIVATIONS if name not in qps]
    if missing:
        raise StateError(f"observers never saw data: {sorted(set(missing))}")
    qps["probs"] = probs_qparams(b)

    linears = {}
    for name in LINEARS:
        src, dst = _LINEAR_IO[name]
        w = model.params[name + ".w"].data
        w_qp = weight_qparams(w, b)
        in_qp, out_qp = qps[src], qps[dst]
        linears[name] = IntLinear(
            name=name,
            weight=quantize(w, w_qp),
            w_qp=w_qp,
            bias=quantize(model.params[name + ".b"].data, bias_qparams(in_qp, w_qp)),
            in_qp=in_qp,
            plan=plan_requant(in_qp.scale * w_qp.scale / out_qp.scale, out_qp),
            relu=(name == "ff1"),
        )

    pe = divide_round(model.pe, qps["proj"].scale).astype(np.int64)
    score_ratio = qps["q"].scale * qps["k"].scale * LOG2_E / math.sqrt(cfg.d_model) * (1 << SOFTMAX_FRAC_BITS)

    def fold(bn_name, src, dst):
        gamma = model.params[bn_name + ".gamma"].data
        beta = model.params[bn_name + ".beta"].data
        scale, offset = model.bn[bn_name].affine(gamma, beta)
        return plan_channels(scale * qps[src].scale / qps[dst].scale, offset / qps[dst].scale, qps[dst])

    s = {k: v.scale for k, v in qps.items()}
    im = IntModel(
        config=cfg,
        bits=b,
        qparams=qps,
        linears=linears,
        pe=pe,
        pe_bits=signed_width(pe),
        embed_plan=plan_requant(s["proj"] / s["embed"], qps["embed"]),
        score_plan=plan_requant(score_ratio, None),
        context_plan=plan_requant(s["probs"] * s["v"] / s["context"], qps["context"]),
        res1=plan_add(s["embed"] / s["res1"], s["attn_out"] / s["res1"], qps["res1"]),
        bn1=fold("bn1", "res1", "bn1"),
        res2=plan_add(s["bn1"] / s["res2"], s["ff2"] / s["res2"], qps["res2"]),
        bn2=fold("bn2", "res2", "bn2"),
    )
    im.check_ranges()
    return im


# -- kernels -----------------------------------------------------------------
def _check_acc(acc, what):
    if DEBUG:
        # b <= 8 operands, d <= 64, n <= 64: |acc| < 2**(2b + 12) < 2**31
        lim = 1 << (ACC_BITS - 1)
        assert np.abs(acc).max(initial=0) < lim, f"{what}: 32-bit accumulator overflow"


def int_linear(x, weight, w_zero: int, bias, x_zero: int, plan: RequantPlan, relu: bool = False):
    """``requant(sum (x - Zx)(w - Zw) + bias)``; optional ReLU clamps at the output zero point."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"int_linear: input shape {x.shape} vs weight shape {weight.shape}")
    acc = (x - x_zero) @ (weight - w_zero) + bias
    _check_acc(acc, "int_linear")
    y = plan.apply(acc)
    if relu:
        y = np.maximum(y, plan.out.zero_point)
    return y


def apply_linear(x, lin: IntLinear):
    return int_linear(x, lin.weight, lin.w_qp.zero_point, lin.bias, lin.in_qp.zero_point, lin.plan, lin.relu)


def softmax_fixed(t, frac_bits: int = SOFTMAX_FRAC_BITS):
    """Row-wise softmax of fixed-point base-2 exponents ``t / 2**f``.

    Returns probabilities in Q0.f; each row sums to ``2**f`` up to the
    per-entry rounding (at most ``n`` LSBs).
    """
    lut = exp2_lut(frac_bits)
    t = np.asarray(t)
    d = t - t.max(axis=-1, keepdims=True)
    whole = np.right_shift(d, frac_bits)
    frac = np.bitwise_and(d, (1 << frac_bits) - 1)
    shift = np.minimum(-whole, 62)
    e = np.right_shift(np.left_shift(lut[frac], SOFTMAX_GUARD_BITS), shift)
    total = e.sum(axis=-1, keepdims=True)
    return (np.left_shift(e, frac_bits) + np.right_shift(total, 1)) // total


def int_softmax(t, bits: int, frac_bits: int = SOFTMAX_FRAC_BITS):
    """Integer softmax recoded to ``bits``-bit attention-probability codes."""
    p = softmax_fixed(t, frac_bits)
    levels = (1 << bits) - 1
    zero = -(1 << (bits - 1))
    return np.right_shift(p * levels + (1 << (frac_bits - 1)), frac_bits) + zero


def int_gap(x, zero: int):
    """Average over the time axis with round-half-up division."""
    n = x.shape[-2]
    total = (x - zero).sum(axis=-2, keepdims=True)
    return (total + n // 2) // n + zero


@dataclass
class OpTally:
    """Per-inference work counts, one entry per hardware layer."""

    entries: list = field(default_factory=list)

    def add(self, name: str, kind: str, **counts) -> None:
        self.entries.append({"name": name, "kind": kind, **counts})

    def total_macs(self) -> int:
        return sum(e.get("macs", 0) for e in self.entries)

    def __eq__(self, other):
        return isinstance(other, OpTally) and self.entries == other.entries


def operation_tally(config: ModelConfig) -> OpTally:
    n, m, k, d = config.n, config.m, config.k, config.d_model
    t = OpTally()
    t.add("in_proj", "linear", rows=n, inner=m, cols=d, macs=n * m * d)
    t.add("embed", "pe_add", elements=n * d)
    for name in ("q", "k", "v"):
        t.add(name, "linear", rows=n, inner=d, cols=d, macs=n * d * d)
    t.add("scores", "score_matmul", rows=n, inner=d, cols=n, macs=n * d * n)
    t.add("softmax", "softmax", rows=n, cols=n)
    t.add("context", "context_matmul", rows=n, inner=n, cols=d, macs=n * n * d)
    t.add("attn_out", "linear", rows=n, inner=d, cols=d, macs=n * d * d)
    t.add("res1", "residual_add", elements=n * d)
    t.add("bn1", "batchnorm", elements=n * d)
    t.add("ff1", "linear", rows=n, inner=d, cols=4 * d, macs=n * d * 4 * d)
    t.add("ff2", "linear", rows=n, inner=4 * d, cols=d, macs=n * 4 * d * d)
    t.add("res2", "residual_add", elements=n * d)
    t.add("bn2", "batchnorm", elements=n * d)
    t.add("gap", "avgpool", elements=n * d)
    t.add("out", "linear", rows=1, inner=d, cols=k, macs=d * k)
    return t


def int_forward(im: IntModel, x_q, return_tally: bool = False):
    """Integer inference on input codes ``[..., n, m]``; returns codes ``[..., 1, k]``."""
    x = np.asarray(x_q) if not isinstance(x_q, np.ndarray) else x_q
    cfg = im.config
    if x.shape[-2:] != (cfg.n, cfg.m):
        raise ShapeError(f"input codes shape {x.shape} does not end in ({cfg.n}, {cfg.m})")
    L, q = im.linears, im.qparams
    tally = OpTally()

    def linear(name, v):
        lin = L[name]
        tally.add(name, "linear", rows=v.shape[-2], inner=lin.shape[0], cols=lin.shape[1], macs=v.shape[-2] * lin.shape[0] * lin.shape[1])
        return apply_linear(v, lin)

    n, d = cfg.n, cfg.d_model
    h = linear("in_proj", x)
    h = im.embed_plan.apply(h - q["proj"].zero_point + im.pe)
    tally.add("embed", "pe_add", elements=n * d)
    qq, kk, vv = linear("q", h), linear("k", h), linear("v", h)

    acc = (qq - q["q"].zero_point) @ np.swapaxes(kk - q["k"].zero_point, -1, -2)
    _check_acc(acc, "scores")
    t = im.score_plan.apply(acc)
    tally.add("scores", "score_matmul", rows=n, inner=d, cols=n, macs=n * d * n)
    p = int_softmax(t, im.bits, im.frac_bits)
    tally.add("softmax", "softmax", rows=n, cols=n)
    acc = (p - q["probs"].zero_point) @ (vv - q["v"].zero_point)
    _check_acc(acc, "context")
    ctx = im.context_plan.apply(acc)
    tally.add("context", "context_matmul", rows=n, inner=n, cols=d, macs=n * n * d)

    a = linear("attn_out", ctx)
    h = im.res1.apply(h - q["embed"].zero_point, a - q["attn_out"].zero_point)
    tally.add("res1", "residual_add", elements=n * d)
    h = im.bn1.apply(h - q["res1"].zero_point)
    tally.add("bn1", "batchnorm", elements=n * d)
    f = linear("ff2", linear("ff1", h))
    h = im.res2.apply(h - q["bn1"].zero_point, f - q["ff2"].zero_point)
    tally.add("res2", "residual_add", elements=n * d)
    h = im.bn2.apply(h - q["res2"].zero_point)
    tally.add("bn2", "batchnorm", elements=n * d)
    g = int_gap(h, q["bn2"].zero_point)
    tally.add("gap", "avgpool", elements=n * d)
    y = linear("out", g)
    out = IntTensor(y, im.output_qp)
    return (out, tally) if return_tally else out


def quantize_input(im: IntModel, x) -> np.ndarray:
    return quantize(x, im.input_qp)


def predict_int(im: IntModel, X) -> np.ndarray:
    """Dequantized integer-path outputs ``[batch, k]`` for real-valued windows."""
    out = int_forward(im, quantize_input(im, X))
    return out.dequantize().reshape(np.asarray(X).shape[:-2] + (im.config.k,))


# -- golden vectors ----------------------------------------------------------
def golden_vectors(im: IntModel, count: int = 10, seed: int = 0, windows=None):
    """Input/output code pairs for testbenches. The first input is the
    all-zero real window; the rest are drawn from ``windows`` when given,
    otherwise uniformly over the input code range."""
    cfg, qp = im.config, im.input_qp
    rng = np.random.default_rng(seed)
    zero = quantize(np.zeros((1, cfg.n, cfg.m)), qp)
    rest = max(count - 1, 0)
    if windows is not None and len(windows):
        idx = rng.choice(len(windows), size=rest, replace=len(windows) < rest)
        others = quantize(np.asarray(windows)[idx], qp)
    else:
        others = rng.integers(qp.qmin, qp.qmax + 1, size=(rest, cfg.n, cfg.m), dtype=np.int64)
    inputs = np.concatenate([zero, others], axis=0)
    outputs = int_forward(im, inputs).values.reshape(len(inputs), cfg.k)
    return inputs, outputs


def write_golden(path_prefix, inputs: np.ndarray, outputs: np.ndarray) -> tuple:
    """One integer per line; inputs vector-major then row-major (n x m),
    outputs vector-major (k per vector)."""
    in_path, out_path = f"{path_prefix}_inputs.txt", f"{path_prefix}_outputs.txt"
    with open(in_path, "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in inputs.reshape(-1))
    with open(out_path, "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in outputs.reshape(-1))
    return in_path, out_path


def read_golden(path_prefix, config: ModelConfig) -> tuple:
    ins = np.loadtxt(f"{path_prefix}_inputs.txt", dtype=np.int64, ndmin=1)
    outs = np.loadtxt(f"{path_prefix}_outputs.txt", dtype=np.int64, ndmin=1)
    return ins.reshape(-1, config.n, config.m), outs.reshape(-1, config.k)


# -- model files ---------------------------------------------------------------
FORMAT = "qforge-model"
FORMAT_VERSION = 1


def model_document(model: Optional[TransformerModel] = None, im: Optional[IntModel] = None, meta: Optional[dict] = None) -> dict:
    if model is None and im is None:
        raise ContractError("a model document needs a float/QAT model or an integer model")
    doc = {"format": FORMAT, "version": FORMAT_VERSION}
    if model is not None:
        doc.update(model.to_dict())
    else:
        doc["config"] = im.config.to_dict()
    doc["integer"] = None if im is None else im.to_dict()
    doc["meta"] = meta or {}
    return doc


def save_model(path, model: Optional[TransformerModel] = None, im: Optional[IntModel] = None, meta: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        json.dump(model_document(model, im, meta), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_document(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT:
        raise ContractError(f"{path}: not a {FORMAT} document")
    return doc


def load_model(path) -> TransformerModel:
    return TransformerModel.from_dict(load_document(path))


def load_int_model(path) -> IntModel:
    doc = load_document(path)
    if not doc.get("integer"):
        raise ContractError(f"{path}: no integer section; run an integer export first")
    return IntModel.from_dict(doc["integer"], ModelConfig.from_dict(doc["config"]))
