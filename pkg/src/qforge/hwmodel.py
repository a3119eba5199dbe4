"""
Analytic FPGA cost models: resources, cycles, power, energy and the
deployability filter.

Resources
    BRAM  = ceil(memory bits / bits per block), memory bits being the
            weights at b bits, biases at 32 bits and the constant tables
            (requant multipliers, zero points, BatchNorm plans, PE table)
    DSP   = multiplier units of the sequential schedule (a MAC and a
            requant multiplier per matrix unit), capped at the budget;
            units that do not fit spill into fabric
    LUT   = lut_scale * (c0 + cb*b + cd*d + cbd*b*d) + spilled * fabric_lut * b^2

Cycles (one MAC per cycle per layer, c0 pipeline overhead per layer)
    matrix       rows*inner*cols + c0
    softmax      rows*(cols + LUT access) + c0
    elementwise  elements + c0

Power = static + k_lut*LUT + k_dsp*DSP + k_bram*BRAM   [mW]
Energy = P[mW] * T[ms] / 1000                          [mJ]

Coefficients live in the platform JSON profiles; ``calibrate_*`` re-derive
them from ``REFERENCE_DESIGNS`` with non-negative least squares.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.optimize import nnls

from .errors import ContractError
from .intrt import LUT_ACCESS_CYCLES, IntModel, OpTally, operation_tally
from .model import LINEARS, ModelConfig, count_parameters, estimate_footprint

PIPELINE_OVERHEAD = 4
BIAS_BITS = 32
PLATFORM_DIR = Path(__file__).with_name("platforms")
PLATFORM_ENV = "QFORGE_PLATFORM_DIR"

# matrix units of the schedule: 8 linears + score and context products
MATRIX_UNITS = len(LINEARS) + 2
MULTIPLIERS_PER_UNIT = 2

# published design points used for calibration
# (dataset, b, d_model, n, m, k, params, LUT%, BRAM%, DSP%, energy mJ, power mW, latency ms)
REFERENCE_DESIGNS = [
    {"dataset": "PeMS", "bits": 6, "batch_size": 208, "lr": 6.357e-3, "d_model": 16, "m": 1, "k": 1,
     "params": 3329, "lut_pct": 46.60, "bram_pct": 100, "dsp_pct": 90, "energy_mj": 0.078, "power_mw": 65.0, "latency_ms": 1.203},
    {"dataset": "AirU", "bits": 8, "batch_size": 32, "lr": 5.025e-3, "d_model": 8, "m": 1, "k": 1,
     "params": 897, "lut_pct": 53.48, "bram_pct": 95, "dsp_pct": 100, "energy_mj": 0.036, "power_mw": 64.0, "latency_ms": 0.570},
    {"dataset": "UCIHAR", "bits": 8, "batch_size": 240, "lr": 4.618e-3, "d_model": 8, "m": 9, "k": 6,
     "params": 1006, "lut_pct": 53.64, "bram_pct": 100, "dsp_pct": 90, "energy_mj": 0.067, "power_mw": 65.0, "latency_ms": 1.034},
    {"dataset": "WISDM", "bits": 6, "batch_size": 48, "lr": 1.257e-3, "d_model": 40, "m": 3, "k": 6,
     "params": 20126, "lut_pct": 96.94, "bram_pct": 100, "dsp_pct": 100, "energy_mj": 0.855, "power_mw": 71.0, "latency_ms": 12.04},
    {"dataset": "ALFA", "bits": 4, "batch_size": 192, "lr": 1.299e-3, "d_model": 8, "m": 17, "k": 10,
     "params": 1106, "lut_pct": 35.55, "bram_pct": 100, "dsp_pct": 65, "energy_mj": 0.033, "power_mw": 62.0, "latency_ms": 0.527},
    {"dataset": "SKAB", "bits": 6, "batch_size": 96, "lr": 5.064e-3, "d_model": 24, "m": 8, "k": 1,
     "params": 7465, "lut_pct": 58.95, "bram_pct": 100, "dsp_pct": 95, "energy_mj": 0.154, "power_mw": 68.0, "latency_ms": 2.261},
]


@dataclass(frozen=True)
class PlatformSpec:
    name: str
    clock_hz: float
    luts: int
    dsps: int
    brams: int
    bram_bits: int
    static_mw: float
    k_lut: float = 0.0
    k_dsp: float = 0.0
    k_bram: float = 0.0
    lut_coef: tuple = (0.0, 0.0, 0.0, 0.0)  # c0, cb, cd, cbd
    lut_scale: float = 1.0
    fabric_lut: float = 1.0
    constraint_style: str = "xdc"
    description: str = ""

    def __post_init__(self):
        if min(self.clock_hz, self.luts, self.dsps, self.brams, self.bram_bits) <= 0:
            raise ContractError(f"platform {self.name!r}: clock and budgets must be > 0")
        if self.static_mw < 0 or min(self.k_lut, self.k_dsp, self.k_bram, *self.lut_coef) < 0:
            raise ContractError(f"platform {self.name!r}: power and LUT coefficients must be >= 0")
        object.__setattr__(self, "lut_coef", tuple(float(c) for c in self.lut_coef))

    @property
    def clock_period_ns(self) -> float:
        return 1e9 / self.clock_hz

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lut_coef"] = list(self.lut_coef)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlatformSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown platform fields: {sorted(extra)}")
        return cls(**d)


def _platform_dirs() -> list:
    dirs = []
    extra = os.environ.get(PLATFORM_ENV)
    if extra:
        dirs.extend(Path(p) for p in extra.split(os.pathsep) if p)
    dirs.append(PLATFORM_DIR)
    return dirs


def list_platforms() -> list:
    names = set()
    for d in _platform_dirs():
        if d.is_dir():
            names.update(p.stem for p in d.glob("*.json"))
    return sorted(names)


def load_platform(name_or_path: Union[str, Path]) -> PlatformSpec:
    """Profile by name (user directories first, then the bundled ones) or by path."""
    path = Path(name_or_path)
    if path.suffix != ".json":
        for d in _platform_dirs():
            cand = d / f"{name_or_path}.json"
            if cand.is_file():
                path = cand
                break
        else:
            raise ContractError(f"unknown platform {name_or_path!r}; available: {', '.join(list_platforms())}")
    if not path.is_file():
        raise ContractError(f"platform file not found: {path}")
    with open(path) as fh:
        return PlatformSpec.from_dict(json.load(fh))


@dataclass
class HwEstimate:
    luts: int
    dsps: int
    brams: int
    cycles: int
    latency_ms: float
    power_mw: float
    energy_mj: float
    deployable: bool = True
    reasons: list = field(default_factory=list)
    platform: str = ""

    def utilization(self, p: PlatformSpec) -> dict:
        return {"lut": 100.0 * self.luts / p.luts, "dsp": 100.0 * self.dsps / p.dsps, "bram": 100.0 * self.brams / p.brams}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HwEstimate":
        return cls(**d)


# -- resources -----------------------------------------------------------------
def _config(obj) -> ModelConfig:
    if isinstance(obj, IntModel):
        return obj.config
    if isinstance(obj, ModelConfig):
        return obj
    raise ContractError(f"expected IntModel or ModelConfig, got {type(obj).__name__}")


def bias_count(config: ModelConfig) -> int:
    return sum(shape[1] for shape in config.linear_shapes().values())


def memory_bits(config: ModelConfig, bits: Optional[int] = None) -> dict:
    b = config.bits if bits is None else bits
    n_bias = bias_count(config)
    weights = (count_parameters(config) - n_bias) * b
    biases = n_bias * BIAS_BITS
    constants = 8 * estimate_footprint(config, b, breakdown=True)["constants"]
    return {"weights": weights, "biases": biases, "constants": constants,
            "total": weights + biases + constants}


def parameter_bits(config: ModelConfig, bits: Optional[int] = None) -> int:
    """Every parameter at b bits (the plain storage figure)."""
    return count_parameters(config) * (config.bits if bits is None else bits)


def bram_blocks(total_bits: int, bits_per_block: int) -> int:
    if total_bits < 0 or bits_per_block <= 0:
        raise ContractError("bits must be >= 0 and block size > 0")
    return -(-int(total_bits) // int(bits_per_block))


def multiplier_units(config: ModelConfig) -> int:
    return MATRIX_UNITS * MULTIPLIERS_PER_UNIT


def lut_estimate(bits: int, d_model: int, p: PlatformSpec, spilled: int = 0) -> float:
    c0, cb, cd, cbd = p.lut_coef
    core = c0 + cb * bits + cd * d_model + cbd * bits * d_model
    return p.lut_scale * core + spilled * p.fabric_lut * bits * bits


def estimate_resources(im, p: PlatformSpec) -> tuple:
    """(LUTs, DSPs, BRAM blocks) of an IntModel (or a bare ModelConfig)."""
    cfg = _config(im)
    units = multiplier_units(cfg)
    dsps = min(units, p.dsps)
    luts = int(math.ceil(lut_estimate(cfg.bits, cfg.d_model, p, units - dsps)))
    brams = bram_blocks(memory_bits(cfg)["total"], p.bram_bits)
    return luts, dsps, brams


# -- cycles --------------------------------------------------------------------
def layer_cycles(entry: dict, overhead: int = PIPELINE_OVERHEAD) -> int:
    kind = entry["kind"]
    if "macs" in entry:
        return entry["rows"] * entry["inner"] * entry["cols"] + overhead
    if kind == "softmax":
        return entry["rows"] * (entry["cols"] + LUT_ACCESS_CYCLES) + overhead
    if "elements" in entry:
        return entry["elements"] + overhead
    raise ContractError(f"no cycle rule for layer kind {kind!r}")


def estimate_cycles(im, schedule: Optional[OpTally] = None, overhead: int = PIPELINE_OVERHEAD) -> int:
    """Total cycles of the sequential schedule (defaults to the model's own tally)."""
    if schedule is None:
        schedule = operation_tally(_config(im))
    return sum(layer_cycles(e, overhead) for e in schedule.entries)


def latency_ms(cycles: int, p: PlatformSpec) -> float:
    return 1e3 * cycles / p.clock_hz


# -- power / energy ------------------------------------------------------------
def estimate_power(resources, p: PlatformSpec) -> float:
    luts, dsps, brams = resources
    return p.static_mw + p.k_lut * luts + p.k_dsp * dsps + p.k_bram * brams


def energy(power_mw: float, latency: float) -> float:
    """mW * ms = uJ; returned in mJ."""
    if power_mw < 0 or latency < 0:
        raise ContractError("power and latency must be non-negative")
    return power_mw * latency / 1000.0


def check_deployable(est: HwEstimate, p: PlatformSpec) -> tuple:
    reasons = []
    for label, used, budget in (("LUT", est.luts, p.luts), ("DSP", est.dsps, p.dsps), ("BRAM", est.brams, p.brams)):
        if used > budget:
            reasons.append(f"{label} +{round(100.0 * (used - budget) / budget)}%")
    return not reasons, reasons


def estimate(im, p: PlatformSpec, overhead: int = PIPELINE_OVERHEAD) -> HwEstimate:
    res = estimate_resources(im, p)
    cycles = estimate_cycles(im, overhead=overhead)
    lat = latency_ms(cycles, p)
    power = estimate_power(res, p)
    est = HwEstimate(*res, cycles, lat, power, energy(power, lat), platform=p.name)
    est.deployable, est.reasons = check_deployable(est, p)
    return est


# -- calibration ---------------------------------------------------------------
def reference_resources(p: PlatformSpec, rows=REFERENCE_DESIGNS) -> np.ndarray:
    """Absolute (LUT, DSP, BRAM) usage of the reference rows on ``p``."""
    return np.array([[r["lut_pct"] * p.luts / 100, r["dsp_pct"] * p.dsps / 100, r["bram_pct"] * p.brams / 100]
                     for r in rows])


def calibrate_power(p: PlatformSpec, rows=REFERENCE_DESIGNS) -> tuple:
    """Non-negative least squares for (k_lut, k_dsp, k_bram) with the static term fixed."""
    A = reference_resources(p, rows)
    y = np.array([r["power_mw"] for r in rows]) - p.static_mw
    coef, _ = nnls(A, y)
    residuals = p.static_mw + A @ coef - np.array([r["power_mw"] for r in rows])
    return tuple(float(c) for c in coef), residuals


def calibrate_luts(p: PlatformSpec, rows=REFERENCE_DESIGNS) -> tuple:
    """Non-negative least squares for the affine LUT coefficients (c0, cb, cd, cbd)."""
    A = np.array([[1.0, r["bits"], r["d_model"], r["bits"] * r["d_model"]] for r in rows])
    y = np.array([r["lut_pct"] * p.luts / 100 for r in rows])
    coef, _ = nnls(A, y)
    return tuple(float(c) for c in coef), A @ coef - y


def calibrate_lut_scale(base: PlatformSpec, target: PlatformSpec, overshoot: float = 0.16,
                        bits: int = 4, d_model: int = 8) -> float:
    """Scale of ``base``'s LUT model on ``target`` such that the smallest
    configuration overshoots the target's LUT budget by ``overshoot``."""
    spilled = max(0, MATRIX_UNITS * MULTIPLIERS_PER_UNIT - target.dsps)
    core = lut_estimate(bits, d_model, base)
    fabric = spilled * target.fabric_lut * bits * bits
    return ((1 + overshoot) * target.luts - fabric) / core
