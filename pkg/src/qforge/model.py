"""
Encoder-only Transformer used for every task.

    X[n x m] -> linear(m->d) + PE -> one-head attention -> +residual -> BN
             -> FFN(d->4d->d, ReLU) -> +residual -> BN -> mean over time
             -> linear(d->k) -> Y[1 x k]

In ``qat`` mode every weight and every activation boundary passes through
fake quantization, and the two operations whose integer form is not a plain
affine rescale (the softmax and the time-average) are emulated with the
exact integer kernels of :mod:`qforge.intrt`, so a QAT forward in eval mode
tracks ``int_forward`` nearly bit for bit.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .quant import (
    LOG2_E,
    SOFTMAX_FRAC_BITS,
    RangeObserver,
    bias_qparams,
    divide_round,
    fake_quantize,
    quantize,
    round_to_grid,
    weight_qparams,
)
from .tensor import BatchNormStats, Tensor

TASKS = ("forecasting", "classification", "anomaly")

LINEARS = ("in_proj", "q", "k", "v", "attn_out", "ff1", "ff2", "out")

# activation boundaries that carry an observer in QAT mode
ACTIVATIONS = (
    "input", "proj", "embed", "q", "k", "v", "context", "attn_out",
    "res1", "bn1", "ff1", "ff2", "res2", "bn2", "output",
)


@dataclass(frozen=True)
class ModelConfig:
    n: int
    m: int
    k: int
    d_model: int
    bits: int = 8
    task: str = "forecasting"

    def __post_init__(self):
        if min(self.n, self.m, self.k, self.d_model) < 1:
            raise ContractError(f"n, m, k and d_model must be >= 1: {self}")
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        if not 2 <= self.bits <= 8:
            raise ContractError(f"bits must lie in [2, 8], got {self.bits}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def linear_shapes(self) -> dict:
        d, ff = self.d_model, self.d_ff
        return {
            "in_proj": (self.m, d), "q": (d, d), "k": (d, d), "v": (d, d),
            "attn_out": (d, d), "ff1": (d, ff), "ff2": (ff, d), "out": (d, self.k),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in ("n", "m", "k", "d_model", "bits", "task") if k in d})


def count_parameters(config: ModelConfig) -> int:
    m, k, d = config.m, config.k, config.d_model
    return (
        (m * d + d)
        + 3 * (d * d + d)
        + (d * d + d)
        + (4 * d * d + 4 * d)
        + (4 * d * d + d)
        + 4 * d
        + (d * k + k)
    )


def positional_encoding(n: int, d: int) -> np.ndarray:
    if n < 1 or d < 1:
        raise ContractError("positional encoding needs n, d >= 1")
    pos = np.arange(n, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def estimate_footprint(config: ModelConfig, bits: int, breakdown: bool = False):
    """Deployed memory in bytes.

    parameters   ceil(params * b / 8)
    buffers      ceil((A1 + A2) * b / 8), A1 >= A2 the two largest of the
                 activation sizes n*m, n*d, n*n, n*4d, k (ping-pong buffers
                 of the sequential schedule)
    constants    5 bytes per requant multiplier (32-bit multiplier + shift),
                 1 byte per zero point, 8 bytes per BatchNorm channel and a
                 16-bit positional-encoding table
    """
    n, m, k, d = config.n, config.m, config.k, config.d_model
    params = math.ceil(count_parameters(config) * bits / 8)
    acts = sorted([n * m, n * d, n * n, n * 4 * d, k], reverse=True)
    buffers = math.ceil((acts[0] + acts[1]) * bits / 8)
    n_multipliers = 8 + 3 + 2 * 2
    n_zero_points = len(ACTIVATIONS) + len(LINEARS) + 1
    constants = 5 * n_multipliers + n_zero_points + 2 * d * 8 + 2 * n * d
    total = params + buffers + constants
    if breakdown:
        return {"parameters": params, "buffers": buffers, "constants": constants, "total": total}
    return total


class TransformerModel:
    def __init__(self, config: ModelConfig, mode: str = "float"):
        if mode not in ("float", "qat"):
            raise ContractError(f"mode must be 'float' or 'qat', got {mode!r}")
        self.config = config
        self.mode = mode
        self.params: dict = {}
        self.bn = {"bn1": BatchNormStats(config.d_model), "bn2": BatchNormStats(config.d_model)}
        self.observers = {name: RangeObserver() for name in ACTIVATIONS}
        self.pe = positional_encoding(config.n, config.d_model)

    # -- parameters -------------------------------------------------------
    def parameters(self) -> list:
        return [self.params[k] for k in sorted(self.params)]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "params": {k: v.data.copy() for k, v in self.params.items()},
            "bn": {k: (s.running_mean, s.running_var) for k, s in self.bn.items()},
            "observers": {k: o.to_dict() for k, o in self.observers.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        for k, v in state["params"].items():
            self.params[k].data = np.array(v, dtype=np.float64)
        for k, (mu, var) in state["bn"].items():
            self.bn[k].running_mean = None if mu is None else np.array(mu, dtype=np.float64)
            self.bn[k].running_var = None if var is None else np.array(var, dtype=np.float64)
        for k, o in state["observers"].items():
            self.observers[k] = RangeObserver.from_dict(o)

    def freeze_observers(self) -> None:
        for o in self.observers.values():
            o.freeze()

    @property
    def observers_frozen(self) -> bool:
        return all(o.frozen for o in self.observers.values())

    def clone(self) -> "TransformerModel":
        return copy.deepcopy(self)

    # -- forward ----------------------------------------------------------
    def __call__(self, X, training: bool = False, mode: Optional[str] = None) -> Tensor:
        return self.forward(X, mode=mode, training=training)

    def forward(self, X, mode: Optional[str] = None, training: bool = False) -> Tensor:
        mode = mode or self.mode
        cfg = self.config
        X = X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=np.float64))
        if X.ndim < 2 or X.shape[-2:] != (cfg.n, cfg.m):
            raise ShapeError(f"input shape {X.shape} does not end in ({cfg.n}, {cfg.m})")
        if mode == "float":
            return self._forward_float(X, training)
        if mode == "qat":
            return self._forward_qat(X, training)
        raise ContractError(f"mode must be 'float' or 'qat', got {mode!r}")

    def _bn(self, name, x, training):
        gamma, beta = self.params[name + ".gamma"], self.params[name + ".beta"]
        return T.batchnorm(x, gamma, beta, self.bn[name], "train" if training else "eval")

    def _forward_float(self, X, training):
        p = self.params

        def lin(name, x):
            return x @ p[name + ".w"] + p[name + ".b"]

        h = lin("in_proj", X) + self.pe
        q, k, v = lin("q", h), lin("k", h), lin("v", h)
        scores = (q @ k.T) * (1.0 / math.sqrt(self.config.d_model))
        attn = lin("attn_out", T.softmax_rows(scores) @ v)
        h = self._bn("bn1", h + attn, training)
        ff = lin("ff2", T.relu(lin("ff1", h)))
        h = self._bn("bn2", h + ff, training)
        return lin("out", T.global_avg_pool(h))

    def _forward_qat(self, X, training):
        from .intrt import int_gap, int_softmax

        b = self.config.bits
        p = self.params

        def act(name, t):
            obs = self.observers[name]
            if training:
                obs.observe(t)
            qp = obs.qparams(b)
            return fake_quantize(t, qp), qp

        def lin(name, x, x_qp, out, relu=False):
            w, bias = p[name + ".w"], p[name + ".b"]
            w_qp = weight_qparams(w.data, b)
            y = x @ fake_quantize(w, w_qp) + fake_quantize(bias, bias_qparams(x_qp, w_qp))
            if relu:
                y = T.relu(y)
            return act(out, y)

        x, x_qp = act("input", X)
        h, h_qp = lin("in_proj", x, x_qp, "proj")
        pe_grid = divide_round(self.pe, h_qp.scale) * h_qp.scale
        h, h_qp = act("embed", h + pe_grid)

        q, q_qp = lin("q", h, h_qp, "q")
        k, k_qp = lin("k", h, h_qp, "k")
        v, v_qp = lin("v", h, h_qp, "v")
        step = 2.0**-SOFTMAX_FRAC_BITS
        t = round_to_grid((q @ k.T) * (LOG2_E / math.sqrt(self.config.d_model)), step)
        soft = T.softmax_rows(t * math.log(2.0))
        probs_codes = int_softmax(np.rint(t.data / step).astype(np.int64), b)
        probs = T.straight_through(soft, probs_decode(probs_codes, b))
        ctx, ctx_qp = act("context", probs @ v)
        a, _ = lin("attn_out", ctx, ctx_qp, "attn_out")

        h, h_qp = act("res1", h + a)
        h, h_qp = act("bn1", self._bn("bn1", h, training))
        f, f_qp = lin("ff1", h, h_qp, "ff1", relu=True)
        f, _ = lin("ff2", f, f_qp, "ff2")
        h, h_qp = act("res2", h + f)
        h, h_qp = act("bn2", self._bn("bn2", h, training))

        pooled = T.global_avg_pool(h)
        codes = quantize(h.data, h_qp)
        pooled = T.straight_through(pooled, h_qp.scale * (int_gap(codes, h_qp.zero_point) - h_qp.zero_point))
        y, _ = lin("out", pooled, h_qp, "output")
        return y

    def activation_qparams(self) -> dict:
        return {name: obs.qparams(self.config.bits) for name, obs in self.observers.items() if obs.initialized}

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "mode": self.mode,
            "weights": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in sorted(self.params.items())},
            "batchnorm": {
                k: {
                    "running_mean": None if s.running_mean is None else s.running_mean.tolist(),
                    "running_var": None if s.running_var is None else s.running_var.tolist(),
                    "eps": s.eps,
                    "momentum": s.momentum,
                }
                for k, s in sorted(self.bn.items())
            },
            "observers": {k: o.to_dict() for k, o in sorted(self.observers.items())},
            "quant": {k: qp.to_dict() for k, qp in sorted(self.activation_qparams().items())} if self.mode == "qat" else {},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerModel":
        model = cls(ModelConfig.from_dict(d["config"]), d.get("mode", "float"))
        for k, w in d["weights"].items():
            model.params[k] = T.parameter(np.array(w["data"], dtype=np.float64).reshape(w["shape"]))
        for k, s in d["batchnorm"].items():
            st = model.bn[k]
            st.eps, st.momentum = s.get("eps", st.eps), s.get("momentum", st.momentum)
            st.running_mean = None if s["running_mean"] is None else np.array(s["running_mean"])
            st.running_var = None if s["running_var"] is None else np.array(s["running_var"])
        for k, o in d.get("observers", {}).items():
            model.observers[k] = RangeObserver.from_dict(o)
        return model


def probs_decode(codes: np.ndarray, bits: int) -> np.ndarray:
    """Decode attention-probability codes (fixed range [0, 1])."""
    qp = probs_qparams(bits)
    return qp.scale * (codes - qp.zero_point)


def probs_qparams(bits: int):
    from .quant import qparams_asymmetric

    return qparams_asymmetric(0.0, 1.0, bits)


def build(config: ModelConfig, seed: int = 0, mode: str = "float") -> TransformerModel:
    """Fresh model; uniform fan-in initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(seed)
    model = TransformerModel(config, mode)
    for name, (fan_in, fan_out) in config.linear_shapes().items():
        bound = 1.0 / math.sqrt(fan_in)
        model.params[name + ".w"] = T.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        model.params[name + ".b"] = T.parameter(rng.uniform(-bound, bound, size=(fan_out,)))
    for name in ("bn1", "bn2"):
        model.params[name + ".gamma"] = T.parameter(np.ones(config.d_model))
        model.params[name + ".beta"] = T.parameter(np.zeros(config.d_model))
    return model
