"""
VHDL emission from an exported IntModel.

Every hardware layer becomes one entity with a sequential MAC (or
one-element-per-cycle) datapath; weights and requantization constants are
baked in as ROM constants taken verbatim from the IntModel, so the RTL and
``intrt.int_forward`` share their integer definitions. Templates are plain
text with ``{{name}}`` placeholders.
"""

from __future__ import annotations

import hashlib
import json
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CodegenError, SimulationError
from .hwmodel import PlatformSpec
from .intrt import EXP2_LUT, IntModel, golden_vectors, write_golden
from .quant import ACC_BITS, SOFTMAX_FRAC_BITS, SOFTMAX_GUARD_BITS

PLACEHOLDER = re.compile(r"\{\{\s*(\w+)\s*\}\}")
SCORE_BITS = 32
PACKAGE_ENTITY = "qforge_pkg"
TOP_ENTITY = "qforge_top"
TB_ENTITY = "qforge_tb"
GOLDEN_PREFIX = "golden"
MIN_VECTORS = 10
SIM_SKIPPED = "skipped(tool-missing)"

_INT32_MIN, _INT32_MAX = -(2**31) + 1, 2**31 - 1


@dataclass(frozen=True)
class RtlTemplate:
    name: str
    text: str

    @property
    def placeholders(self) -> list:
        return sorted(set(PLACEHOLDER.findall(self.text)))

    def render(self, **values) -> str:
        missing = [p for p in self.placeholders if p not in values]
        if missing:
            raise CodegenError(f"template {self.name}: unresolved placeholders {missing}")
        unknown = sorted(set(values) - set(self.placeholders))
        if unknown:
            raise CodegenError(f"template {self.name}: unknown placeholders {unknown}")
        out = PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), self.text)
        if "{{" in out or "}}" in out:
            raise CodegenError(f"template {self.name}: placeholder markers survive rendering")
        return out


def load_template(name: str) -> RtlTemplate:
    path = resources.files("qforge").joinpath("templates").joinpath(name)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise CodegenError(f"missing template {name!r}") from exc
    return RtlTemplate(name, text)


@dataclass
class RtlDesign:
    files: dict              # file name -> VHDL text, in compile order
    top: str
    constraints: dict        # file name -> constraint text
    golden_inputs: np.ndarray
    golden_outputs: np.ndarray
    platform: str = ""

    @property
    def vhdl_files(self) -> list:
        return list(self.files)

    def write(self, directory) -> list:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in {**self.files, **self.constraints}.items():
            (d / name).write_text(text)
            written.append(d / name)
        written.extend(Path(p) for p in write_golden(d / GOLDEN_PREFIX, self.golden_inputs, self.golden_outputs))
        manifest = {"top": self.top, "compile_order": self.vhdl_files, "constraints": list(self.constraints),
                    "platform": self.platform, "vectors": int(len(self.golden_inputs))}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        written.append(d / "manifest.json")
        return written


# -- literal formatting ----------------------------------------------------------
def s64(value: int) -> str:
    """64-bit two's-complement hex literal (VHDL integers stop at 32 bits)."""
    v = int(value)
    if not -(2**63) <= v < 2**63:
        raise CodegenError(f"constant {v} does not fit 64 bits")
    return f'signed\'(X"{v & (2**64 - 1):016X}")'


def int_list(values, per_line: int = 16, indent: str = "    ") -> str:
    vals = [int(v) for v in np.asarray(values).reshape(-1)]
    for v in vals:
        if not _INT32_MIN <= v <= _INT32_MAX:
            raise CodegenError(f"ROM value {v} exceeds the VHDL integer range")
    if len(vals) == 1:
        return f"{indent}0 => {vals[0]}"
    lines = [", ".join(str(v) for v in vals[i : i + per_line]) for i in range(0, len(vals), per_line)]
    return (",\n").join(indent + ln for ln in lines)


def s64_list(values, indent: str = "    ") -> str:
    vals = [s64(v) for v in np.asarray(values).reshape(-1)]
    if len(vals) == 1:
        return f"{indent}0 => {vals[0]}"
    return ",\n".join(indent + v for v in vals)


def model_digest(im: IntModel) -> str:
    doc = {"config": im.config.to_dict(), "integer": im.to_dict()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# -- layers ------------------------------------------------------------------
def _entity(name: str) -> str:
    return f"{name}_layer"


def emit_layer(im: IntModel, name: str, kind: str, header: str = "") -> tuple:
    """Render one layer; returns ``(file name, text)``."""
    cfg, q, b = im.config, im.qparams, im.bits
    n, d = cfg.n, cfg.d_model
    common = {"header": header or f"layer {name}", "layer": name, "entity": _entity(name)}

    if kind == "linear":
        lin = im.linears[name]
        rows = 1 if name == "out" else n
        out = lin.plan.out
        text = load_template("linear.vhd.tpl").render(
            **common, rows=rows, inner=lin.shape[0], cols=lin.shape[1], in_bits=b, out_bits=b,
            x_zero=lin.in_qp.zero_point, w_zero=lin.w_qp.zero_point, out_zero=out.zero_point,
            out_min=out.qmin, out_max=out.qmax, multiplier=s64(lin.plan.multiplier), shift=lin.plan.shift,
            relu="true" if lin.relu else "false", n_weights=lin.weight.size,
            weights=int_list(lin.weight), biases=int_list(lin.bias),
        )
    elif kind in ("score_matmul", "context_matmul"):
        if kind == "score_matmul":
            plan, inner, cols = im.score_plan, d, n
            a_zero, b_zero, a_bits = q["q"].zero_point, q["k"].zero_point, b
            b_index, out_bits = "c * INNER + i", SCORE_BITS
            out_zero, out_min, out_max = 0, _INT32_MIN, _INT32_MAX
        else:
            plan, inner, cols = im.context_plan, n, d
            a_zero, b_zero, a_bits = q["probs"].zero_point, q["v"].zero_point, b
            b_index, out_bits = "i * COLS + c", b
            out_zero, out_min, out_max = plan.out.zero_point, plan.out.qmin, plan.out.qmax
        text = load_template("matmul.vhd.tpl").render(
            **common, rows=n, inner=inner, cols=cols, a_bits=a_bits, b_bits=b, out_bits=out_bits,
            b_elems=n * d, a_zero=a_zero, b_zero=b_zero, out_zero=out_zero, out_min=out_min,
            out_max=out_max, multiplier=s64(plan.multiplier), shift=plan.shift, b_index=b_index,
        )
    elif kind == "softmax":
        text = load_template("softmax.vhd.tpl").render(
            **common, rows=n, cols=n, in_bits=SCORE_BITS, out_bits=b, levels=(1 << b) - 1,
            out_zero=q["probs"].zero_point,
        )
    elif kind == "avgpool":
        text = load_template("avgpool.vhd.tpl").render(**common, rows=n, cols=d, bits=b, zero=q["bn2"].zero_point)
    elif kind in ("pe_add", "residual_add", "batchnorm"):
        text = load_template("eltwise.vhd.tpl").render(**common, rows=n, cols=d, in_bits=b, out_bits=b,
                                                       **_eltwise_parts(im, name, kind))
    else:
        raise CodegenError(f"unsupported layer kind {kind!r} ({name})")
    return f"{name}.vhd", text


def _eltwise_parts(im: IntModel, name: str, kind: str) -> dict:
    q = im.qparams
    if kind == "pe_add":
        plan = im.embed_plan
        consts = (
            f"  constant IN_ZERO    : integer := {q['proj'].zero_point};\n"
            f"  constant MULTIPLIER : signed(63 downto 0) := {s64(plan.multiplier)};\n"
            f"  constant SHIFT      : natural := {plan.shift};\n"
            f"  constant PE : int_array(0 to {im.pe.size} - 1) := (\n{int_list(im.pe)}\n  );"
        )
        body = "            y := saturate(requant_raw(x - IN_ZERO + PE(r * COLS + c), MULTIPLIER, SHIFT), OUT_ZERO, OUT_MIN, OUT_MAX);"
        return {"description": "positional-encoding add with requantization", "extra_ports": "",
                "constants": consts, "body": body, "out_zero": plan.out.zero_point,
                "out_min": plan.out.qmin, "out_max": plan.out.qmax}
    if kind == "residual_add":
        plan = im.res1 if name == "res1" else im.res2
        a_name, b_name = ("embed", "attn_out") if name == "res1" else ("bn1", "ff2")
        consts = (
            f"  constant A_ZERO  : integer := {q[a_name].zero_point};\n"
            f"  constant B_ZERO  : integer := {q[b_name].zero_point};\n"
            f"  constant MULT_A  : signed(63 downto 0) := {s64(plan.multiplier_a)};\n"
            f"  constant MULT_B  : signed(63 downto 0) := {s64(plan.multiplier_b)};\n"
            f"  constant SHIFT   : natural := {plan.shift};"
        )
        body = ("            y := saturate(add_raw(x - A_ZERO, get_elem(b_in, r * COLS + c, IN_BITS) - B_ZERO,\n"
                "                                  MULT_A, MULT_B, SHIFT), OUT_ZERO, OUT_MIN, OUT_MAX);")
        ports = "    b_in  : in  std_logic_vector(ROWS * COLS * IN_BITS - 1 downto 0);"
        return {"description": "residual add, both operands rescaled then rounded once", "extra_ports": ports,
                "constants": consts, "body": body, "out_zero": plan.out.zero_point,
                "out_min": plan.out.qmin, "out_max": plan.out.qmax}
    plan = im.bn1 if name == "bn1" else im.bn2
    in_name = "res1" if name == "bn1" else "res2"
    consts = (
        f"  constant IN_ZERO : integer := {q[in_name].zero_point};\n"
        f"  constant SHIFT   : natural := {plan.shift};\n"
        f"  constant MULTS   : s64_array(0 to COLS - 1) := (\n{s64_list(plan.multipliers)}\n  );\n"
        f"  constant OFFSETS : s64_array(0 to COLS - 1) := (\n{s64_list(plan.offsets)}\n  );"
    )
    body = "            y := saturate(channel_raw(x - IN_ZERO, MULTS(c), OFFSETS(c), SHIFT), OUT_ZERO, OUT_MIN, OUT_MAX);"
    return {"description": "folded BatchNorm, per-channel multiplier and offset", "extra_ports": "",
            "constants": consts, "body": body, "out_zero": plan.out.zero_point,
            "out_min": plan.out.qmin, "out_max": plan.out.qmax}


# -- top level -----------------------------------------------------------------
def _wiring(im: IntModel) -> list:
    """``(layer, kind, {port: signal}, output signal, output width)`` in execution order."""
    cfg, b = im.config, im.bits
    n, m, k, d = cfg.n, cfg.m, cfg.k, cfg.d_model
    w = {
        "in_proj": n * d * b, "embed": n * d * b, "q": n * d * b, "k": n * d * b, "v": n * d * b,
        "scores": n * n * SCORE_BITS, "softmax": n * n * b, "context": n * d * b, "attn_out": n * d * b,
        "res1": n * d * b, "bn1": n * d * b, "ff1": n * 4 * d * b, "ff2": n * d * b, "res2": n * d * b,
        "bn2": n * d * b, "gap": d * b, "out": k * b,
    }
    inputs = {
        "in_proj": {"x_in": "x_in"}, "embed": {"x_in": "s_in_proj"},
        "q": {"x_in": "s_embed"}, "k": {"x_in": "s_embed"}, "v": {"x_in": "s_embed"},
        "scores": {"a_in": "s_q", "b_in": "s_k"}, "softmax": {"x_in": "s_scores"},
        "context": {"a_in": "s_softmax", "b_in": "s_v"}, "attn_out": {"x_in": "s_context"},
        "res1": {"x_in": "s_embed", "b_in": "s_attn_out"}, "bn1": {"x_in": "s_res1"},
        "ff1": {"x_in": "s_bn1"}, "ff2": {"x_in": "s_ff1"},
        "res2": {"x_in": "s_bn1", "b_in": "s_ff2"}, "bn2": {"x_in": "s_res2"},
        "gap": {"x_in": "s_bn2"}, "out": {"x_in": "s_gap"},
    }
    assert [name for name, _ in im.layers()] == list(w)
    return [(name, kind, inputs[name], f"s_{name}", w[name]) for name, kind in im.layers()]


def emit_top(im: IntModel, p: PlatformSpec, header: str = "") -> tuple:
    """Top entity plus the platform constraint stub; returns
    ``(top file name, top text, {constraint file: text})``."""
    cfg = im.config
    wiring = _wiring(im)
    sig, inst = [], []
    for idx, (name, _kind, ports, out_sig, width) in enumerate(wiring):
        sig.append(f"  signal {out_sig} : std_logic_vector({width} - 1 downto 0);")
        sig.append(f"  signal done_{name} : std_logic;")
        start = "start" if idx == 0 else f"done_{wiring[idx - 1][0]}"
        pm = [f"clk => clk", "rst => rst", f"start => {start}", f"done => done_{name}"]
        pm += [f"{port} => {signal}" for port, signal in ports.items()]
        pm.append(f"y_out => {out_sig}")
        inst.append(f"  u_{name} : entity work.{_entity(name)}\n    port map ({', '.join(pm)});")
    last = wiring[-1]
    inst.append(f"  y_out <= {last[3]};\n  done <= done_{last[0]};")
    text = load_template("top.vhd.tpl").render(
        header=header or "top level", entity=TOP_ENTITY, n=cfg.n, m=cfg.m, k=cfg.k, bits=im.bits,
        signals="\n".join(sig), instances="\n\n".join(inst),
    )
    period = _period(p)
    style = p.constraint_style
    if style not in ("xdc", "pdc"):
        raise CodegenError(f"unknown constraint style {style!r}")
    cons = {f"{TOP_ENTITY}.{style}": load_template(f"{style}.tpl").render(header=header or "constraints",
                                                                        platform=p.name, period_ns=period)}
    return f"{TOP_ENTITY}.vhd", text, cons


def _period(p: PlatformSpec) -> str:
    return f"{p.clock_period_ns:.3f}".rstrip("0").rstrip(".")


def emit_package(im: IntModel, header: str = "") -> tuple:
    text = load_template("package.vhd.tpl").render(
        header=header or "package", bits=im.bits, acc_bits=ACC_BITS, score_bits=SCORE_BITS,
        frac_bits=im.frac_bits, guard_bits=SOFTMAX_GUARD_BITS, lut_size=len(EXP2_LUT),
        exp2_lut=int_list(EXP2_LUT),
    )
    if im.frac_bits != SOFTMAX_FRAC_BITS:
        raise CodegenError(f"the shared exponent table is built for {SOFTMAX_FRAC_BITS} fractional bits")
    return f"{PACKAGE_ENTITY}.vhd", text


def emit_testbench(im: IntModel, inputs: np.ndarray, outputs: np.ndarray, p: PlatformSpec, header: str = "") -> tuple:
    if len(inputs) < MIN_VECTORS:
        raise CodegenError(f"testbench needs at least {MIN_VECTORS} vectors, got {len(inputs)}")
    cfg = im.config
    text = load_template("testbench.vhd.tpl").render(
        header=header or "testbench", entity=TB_ENTITY, top=TOP_ENTITY, period_ns=_period(p),
        n_vectors=len(inputs), in_elems=cfg.n * cfg.m, out_elems=cfg.k, bits=im.bits,
        inputs_file=f"{GOLDEN_PREFIX}_inputs.txt", outputs_file=f"{GOLDEN_PREFIX}_outputs.txt",
    )
    return f"{TB_ENTITY}.vhd", text


def emit_design(im: IntModel, p: PlatformSpec, vectors: int = MIN_VECTORS, seed: int = 0, windows=None) -> RtlDesign:
    """Package, one file per layer, top, testbench, constraint stub and golden vectors."""
    digest = model_digest(im)
    header = f"generated by qforge; model {digest}; platform {p.name}"
    inputs, outputs = golden_vectors(im, max(vectors, MIN_VECTORS), seed=seed, windows=windows)
    files = dict([emit_package(im, header)])
    for name, kind in im.layers():
        fname, text = emit_layer(im, name, kind, header)
        files[fname] = text
    top_name, top_text, cons = emit_top(im, p, header)
    files[top_name] = top_text
    tb_name, tb_text = emit_testbench(im, inputs, outputs, p, header)
    files[tb_name] = tb_text
    design = RtlDesign(files, TOP_ENTITY, cons, inputs, outputs, p.name)
    validate_design(design)
    return design


# -- structural checks -----------------------------------------------------------
_ENTITY_DECL = re.compile(r"^\s*entity\s+(\w+)\s+is", re.M | re.I)
_ENTITY_INST = re.compile(r"entity\s+work\.(\w+)", re.I)


def entity_graph(design: RtlDesign) -> dict:
    """Defined entity -> entities it instantiates."""
    graph = {}
    for text in design.files.values():
        for name in _ENTITY_DECL.findall(text):
            graph[name] = sorted(set(_ENTITY_INST.findall(text)))
    return graph


def validate_design(design: RtlDesign) -> None:
    problems = []
    graph = entity_graph(design)
    for fname, text in design.files.items():
        if PLACEHOLDER.search(text):
            problems.append(f"{fname}: unresolved placeholder")
        if fname != f"{PACKAGE_ENTITY}.vhd":
            decls = _ENTITY_DECL.findall(text)
            if len(decls) != 1 or not re.search(r"^\s*architecture\s+\w+\s+of\s+" + decls[0] + r"\s+is", text, re.M | re.I):
                problems.append(f"{fname}: expected one entity with its architecture")
        opened = len(re.findall(r"^\s*(?:entity|architecture|package)\b(?!\s+work)", text, re.M | re.I))
        closed = len(re.findall(r"^\s*end\s+(?:entity|architecture|package)\b", text, re.M | re.I))
        if opened != closed:
            problems.append(f"{fname}: {opened} design units opened, {closed} closed")
    for ent, children in graph.items():
        for child in children:
            if child not in graph:
                problems.append(f"{ent}: instantiates undefined entity {child}")
    if problems:
        raise SimulationError("design check failed:\n" + "\n".join(problems), log="\n".join(problems))


# -- simulation ------------------------------------------------------------------
@dataclass
class SimResult:
    status: str                      # "pass" | "fail" | SIM_SKIPPED
    cycles: Optional[int] = None
    log: str = ""
    vectors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"


_RESULT = re.compile(r"RESULT (PASS|FAIL)(?: cycles=(\d+))?")
_VECTOR = re.compile(r"VECTOR (\d+) (PASS|FAIL)")


def parse_sim_log(log: str) -> SimResult:
    m = _RESULT.search(log)
    if not m:
        raise SimulationError("simulator finished without a result line", log=log)
    vectors = {int(i): s.lower() for i, s in _VECTOR.findall(log)}
    cycles = int(m.group(2)) if m.group(2) else None
    return SimResult("pass" if m.group(1) == "PASS" else "fail", cycles, log, vectors)


def run_external_sim(design: RtlDesign, workdir=None, simulator: str = "ghdl", timeout: float = 600.0) -> SimResult:
    """Analyse, elaborate and run the testbench with GHDL.

    The design is checked structurally first; an absent simulator yields
    status ``skipped(tool-missing)`` rather than success.
    """
    validate_design(design)
    exe = shutil.which(simulator)
    if exe is None:
        return SimResult(SIM_SKIPPED, log=f"{simulator} not found on PATH")
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="qforge_sim_")
        workdir = tmp.name
    try:
        design.write(workdir)
        log = []
        steps = [[exe, "-a", "--std=08", f] for f in design.vhdl_files]
        steps += [[exe, "-e", "--std=08", TB_ENTITY], [exe, "-r", "--std=08", TB_ENTITY]]
        for cmd in steps:
            try:
                proc = subprocess.run(cmd, cwd=workdir, capture_output=True, text=True, timeout=timeout)
            except subprocess.TimeoutExpired as exc:
                raise SimulationError(f"simulator timed out: {' '.join(cmd)}", log="\n".join(log)) from exc
            log.append(f"$ {' '.join(cmd[1:])}\n{proc.stdout}{proc.stderr}")
            if proc.returncode != 0:
                raise SimulationError(f"simulator step failed: {' '.join(cmd[1:])}", log="\n".join(log))
        return parse_sim_log("\n".join(log))
    finally:
        if tmp is not None:
            tmp.cleanup()
