import re
import shutil

import numpy as np
import pytest

from qforge import codegen as C
from qforge import hwmodel as hw
from qforge.errors import CodegenError, SimulationError
from qforge.intrt import EXP2_LUT, apply_linear

XC7 = hw.load_platform("xc7s15")
ICE = hw.load_platform("ice40up5k")


def vhdl_constants(text):
    """Scalar and array constants of a generated file as Python ints."""
    out = {}
    for name, value in re.findall(r"constant\s+(\w+)\s*:\s*(?:integer|natural)\s*:=\s*(-?\d+);", text):
        out[name] = int(value)
    for name, value in re.findall(r'constant\s+(\w+)\s*:\s*signed\(63 downto 0\)\s*:=\s*signed\'\(X"([0-9A-F]{16})"\);', text):
        out[name] = _s64(value)
    for name, body in re.findall(r"constant\s+(\w+)\s*:\s*(?:int|s64)_array\([^)]*\)\s*:=\s*\((.*?)\);", text, re.S):
        body = re.sub(r"^\s*0 =>", "", body.strip())
        hexes = re.findall(r'X"([0-9A-F]{16})"', body)
        out[name] = [_s64(h) for h in hexes] if hexes else [int(v) for v in body.replace("\n", " ").split(",")]
    return out


def _s64(h):
    v = int(h, 16)
    return v - (1 << 64) if v >= 1 << 63 else v


@pytest.fixture(scope="module")
def design(tiny_int):
    return C.emit_design(tiny_int, XC7)


def test_emission_is_byte_identical(tiny_int, tmp_path):
    a, b = C.emit_design(tiny_int, XC7), C.emit_design(tiny_int, XC7)
    assert a.files == b.files and a.constraints == b.constraints
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_file_set_and_compile_order(design, tiny_int):
    names = design.vhdl_files
    assert names[0] == "qforge_pkg.vhd"
    assert names[-2:] == ["qforge_top.vhd", "qforge_tb.vhd"]
    assert names[1:-2] == [f"{n}.vhd" for n, _ in tiny_int.layers()]
    assert list(design.constraints) == ["qforge_top.xdc"]


def test_entity_graph(design, tiny_int):
    g = C.entity_graph(design)
    assert g["qforge_tb"] == ["qforge_top"]
    assert g["qforge_top"] == sorted(f"{n}_layer" for n, _ in tiny_int.layers())


def test_top_port_widths(design, tiny_int):
    cfg = tiny_int.config
    top = design.files["qforge_top.vhd"]
    in_w = re.search(r"x_in\s*:\s*in\s+std_logic_vector\((.*?) - 1 downto 0\)", top).group(1)
    out_w = re.search(r"y_out\s*:\s*out\s+std_logic_vector\((.*?) - 1 downto 0\)", top).group(1)
    env = {k: int(v) for k, v in re.findall(r"(\w+)\s*:\s*natural\s*:=\s*(\d+)", top)}
    assert (env["SEQ_LEN"], env["IN_CHANNELS"], env["OUTPUTS"], env["DATA_BITS"]) == (cfg.n, cfg.m, cfg.k, tiny_int.bits)
    assert eval(in_w, {}, env) == cfg.n * cfg.m * tiny_int.bits
    assert eval(out_w, {}, env) == cfg.k * tiny_int.bits


def test_constraint_period(tiny_int):
    xdc = C.emit_design(tiny_int, XC7).constraints["qforge_top.xdc"]
    assert "create_clock" in xdc and "-period 10" in xdc
    pdc = C.emit_design(tiny_int, ICE).constraints["qforge_top.pdc"]
    assert "62.5" in pdc


def test_package_exponent_table(design):
    consts = vhdl_constants(design.files["qforge_pkg.vhd"])
    assert consts["EXP2_LUT"] == EXP2_LUT.tolist()


def test_linear_rom_reproduces_layer(design, tiny_int):
    rng = np.random.default_rng(0)
    for name, lin in tiny_int.linears.items():
        c = vhdl_constants(design.files[f"{name}.vhd"])
        fi, fo = lin.shape
        W = np.array(c["WEIGHTS"], dtype=np.int64).reshape(fi, fo)
        assert np.array_equal(W, lin.weight) and c["BIASES"] == lin.bias.tolist()
        assert (c["X_ZERO"], c["W_ZERO"], c["OUT_ZERO"]) == (lin.in_qp.zero_point, lin.w_qp.zero_point, lin.plan.out.zero_point)
        assert (c["MULTIPLIER"], c["SHIFT"]) == (lin.plan.multiplier, lin.plan.shift)
        # recompute the layer from the ROM contents alone
        x = rng.integers(lin.in_qp.qmin, lin.in_qp.qmax + 1, (3, fi))
        acc = (x - c["X_ZERO"]) @ (W - c["W_ZERO"]) + np.array(c["BIASES"])
        y = np.clip(((acc * c["MULTIPLIER"] + (1 << (c["SHIFT"] - 1))) >> c["SHIFT"]) + c["OUT_ZERO"], c["OUT_MIN"], c["OUT_MAX"])
        if lin.relu:
            y = np.maximum(y, c["OUT_ZERO"])
        assert np.array_equal(y, apply_linear(x, lin))


def test_batchnorm_constants(design, tiny_int):
    for name in ("bn1", "bn2"):
        c = vhdl_constants(design.files[f"{name}.vhd"])
        plan = getattr(tiny_int, name)
        assert c["MULTS"] == plan.multipliers.tolist() and c["OFFSETS"] == plan.offsets.tolist()
        assert c["SHIFT"] == plan.shift


def test_no_placeholders_left(design):
    for text in list(design.files.values()) + list(design.constraints.values()):
        assert "{{" not in text and "}}" not in text


def test_written_design_contents(design, tmp_path):
    files = design.write(tmp_path)
    names = {p.name for p in files}
    assert {"golden_inputs.txt", "golden_outputs.txt", "manifest.json", "qforge_top.xdc"} <= names
    assert len(np.loadtxt(tmp_path / "golden_inputs.txt")) == design.golden_inputs.size


def test_template_render_contract():
    t = C.RtlTemplate("t", "a {{x}} b {{ y }}")
    assert t.placeholders == ["x", "y"]
    assert t.render(x=1, y=2) == "a 1 b 2"
    with pytest.raises(CodegenError):
        t.render(x=1)
    with pytest.raises(CodegenError):
        t.render(x=1, y=2, z=3)
    with pytest.raises(CodegenError):
        C.load_template("nope.tpl")


def test_unknown_layer_kind(tiny_int):
    with pytest.raises(CodegenError):
        C.emit_layer(tiny_int, "q", "convolution")


def test_testbench_needs_ten_vectors(tiny_int):
    ins = np.zeros((9, tiny_int.config.n, tiny_int.config.m), dtype=np.int64)
    with pytest.raises(CodegenError):
        C.emit_testbench(tiny_int, ins, np.zeros((9, 1), dtype=np.int64), XC7)


def test_s64_literals():
    assert C.s64(-1) == 'signed\'(X"FFFFFFFFFFFFFFFF")'
    assert C.s64(255) == 'signed\'(X"00000000000000FF")'
    with pytest.raises(CodegenError):
        C.s64(2**63)
    with pytest.raises(CodegenError):
        C.int_list([2**31])


def test_validate_design_catches_problems(design):
    broken = C.RtlDesign(dict(design.files), design.top, design.constraints, design.golden_inputs, design.golden_outputs)
    broken.files["q.vhd"] = broken.files["q.vhd"].replace("end architecture;", "")
    with pytest.raises(SimulationError):
        C.validate_design(broken)
    missing = C.RtlDesign({k: v for k, v in design.files.items() if k != "softmax.vhd"}, design.top, design.constraints,
                          design.golden_inputs, design.golden_outputs)
    with pytest.raises(SimulationError) as e:
        C.validate_design(missing)
    assert "softmax_layer" in str(e.value)


def test_parse_sim_log():
    r = C.parse_sim_log("VECTOR 0 PASS cycles=12\nVECTOR 1 FAIL\nRESULT FAIL failures=1\n")
    assert r.status == "fail" and r.vectors == {0: "pass", 1: "fail"} and not r.passed
    assert C.parse_sim_log("RESULT PASS cycles=99").cycles == 99
    with pytest.raises(SimulationError):
        C.parse_sim_log("nothing useful")


def test_missing_simulator_is_reported_as_skip(design):
    r = C.run_external_sim(design, simulator="definitely-not-a-simulator")
    assert r.status == C.SIM_SKIPPED == "skipped(tool-missing)" and not r.passed


@pytest.mark.skipif(shutil.which("ghdl") is None, reason="skipped(tool-missing): ghdl not on PATH")
def test_ghdl_matches_golden_vectors(design, tmp_path):
    r = C.run_external_sim(design, tmp_path)
    assert r.passed, r.log
    assert len(r.vectors) == len(design.golden_inputs) and set(r.vectors.values()) == {"pass"}
