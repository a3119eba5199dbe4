import json
import math

import numpy as np
import pytest

from qforge import hwmodel as hw
from qforge.errors import ContractError
from qforge.intrt import operation_tally
from qforge.model import ModelConfig

from oracles import REFERENCE_ROWS

XC7 = hw.load_platform("xc7s15")
ICE = hw.load_platform("ice40up5k")


def cfg(d=8, b=8, n=24, m=1, k=1):
    return ModelConfig(n=n, m=m, k=k, d_model=d, bits=b)


def test_bundled_platforms():
    assert {"xc7s15", "ice40up5k"} <= set(hw.list_platforms())
    assert (XC7.luts, XC7.dsps, XC7.brams, XC7.clock_hz) == (8000, 20, 10, 100e6)
    assert XC7.clock_period_ns == 10.0
    assert ICE.constraint_style == "pdc" and XC7.constraint_style == "xdc"


def test_platform_env_dir(tmp_path, monkeypatch):
    d = XC7.to_dict()
    d["name"], d["luts"] = "bigboard", 80000
    (tmp_path / "bigboard.json").write_text(json.dumps(d))
    monkeypatch.setenv(hw.PLATFORM_ENV, str(tmp_path))
    assert "bigboard" in hw.list_platforms()
    assert hw.load_platform("bigboard").luts == 80000
    assert hw.load_platform(tmp_path / "bigboard.json").luts == 80000


def test_platform_contracts(tmp_path):
    with pytest.raises(ContractError):
        hw.load_platform("no-such-board")
    bad = XC7.to_dict()
    bad["colour"] = "red"
    with pytest.raises(ContractError):
        hw.PlatformSpec.from_dict(bad)
    with pytest.raises(ContractError):
        hw.PlatformSpec("x", 1e6, 0, 1, 1, 1, 0.0)


def test_pems_parameter_bits_and_blocks():
    c = cfg(d=16, b=6)
    assert hw.parameter_bits(c) == 3329 * 6 == 19974
    assert hw.bram_blocks(19974, 18432) == 2
    assert hw.bram_blocks(0, 18432) == 0
    assert hw.bram_blocks(18432, 18432) == 1


def test_memory_bits_breakdown():
    c = cfg(d=16, b=6)
    mb = hw.memory_bits(c)
    assert mb["weights"] + mb["biases"] + mb["constants"] == mb["total"]
    assert mb["biases"] == 32 * hw.bias_count(c)
    assert mb["weights"] == 6 * (3329 - hw.bias_count(c))


def test_layer_cycle_rules():
    assert hw.layer_cycles({"kind": "linear", "rows": 1, "inner": 2, "cols": 3, "macs": 6}) == 10
    assert hw.layer_cycles({"kind": "softmax", "rows": 4, "cols": 4}) == 4 * 6 + 4
    assert hw.layer_cycles({"kind": "pe_add", "elements": 12}) == 16
    with pytest.raises(ContractError):
        hw.layer_cycles({"kind": "mystery"})


def test_cycles_match_tally():
    c = cfg(d=16, b=6)
    tally = operation_tally(c)
    n, d = c.n, c.d_model
    macs = n * c.m * d + 4 * n * d * d + 2 * n * n * d + 8 * n * d * d + d * c.k
    eltwise = n * d * 6  # pe_add, res1, bn1, res2, bn2, gap
    softmax = n * (n + 2)
    assert hw.estimate_cycles(c) == macs + eltwise + softmax + 4 * len(tally.entries)


def test_latency_at_100mhz():
    assert hw.latency_ms(120300, XC7) == pytest.approx(1.203)


def test_static_power_at_zero_usage():
    assert hw.estimate_power((0, 0, 0), XC7) == XC7.static_mw == 31.0


@pytest.mark.parametrize("name,params,p_mw,t_ms,e_mj", REFERENCE_ROWS)
def test_energy_identity(name, params, p_mw, t_ms, e_mj):
    assert abs(hw.energy(p_mw, t_ms) - e_mj) <= 0.0005


def test_energy_contract():
    with pytest.raises(ContractError):
        hw.energy(-1.0, 1.0)
    assert hw.energy(0.0, 5.0) == 0.0


def test_estimate_is_consistent():
    est = hw.estimate(cfg(d=16, b=6), XC7)
    assert est.energy_mj == hw.energy(est.power_mw, est.latency_ms)
    assert est.latency_ms == hw.latency_ms(est.cycles, XC7)
    assert est.power_mw == hw.estimate_power((est.luts, est.dsps, est.brams), XC7)
    assert hw.HwEstimate.from_dict(json.loads(json.dumps(est.to_dict()))) == est


@pytest.mark.parametrize("p", [XC7, ICE])
def test_monotone_in_width_and_bits(p):
    for b in (4, 6, 8):
        luts = [hw.estimate(cfg(d=d, b=b), p).luts for d in range(8, 65, 8)]
        assert luts == sorted(luts)
        energies = [hw.estimate(cfg(d=d, b=b), p).energy_mj for d in range(8, 65, 8)]
        assert energies == sorted(energies)
    for d in (8, 32, 64):
        luts = [hw.estimate(cfg(d=d, b=b), p).luts for b in (4, 6, 8)]
        brams = [hw.estimate(cfg(d=d, b=b), p).brams for b in (4, 6, 8)]
        assert luts == sorted(luts) and brams == sorted(brams)


def test_dsps_capped_and_spilled():
    e = hw.estimate(cfg(d=8, b=4), ICE)
    assert e.dsps == ICE.dsps
    spilled = hw.multiplier_units(cfg()) - ICE.dsps
    assert hw.lut_estimate(4, 8, ICE, spilled) - hw.lut_estimate(4, 8, ICE) == pytest.approx(spilled * ICE.fabric_lut * 16)


def test_smallest_config_overshoots_ice40_by_16_percent():
    e = hw.estimate(cfg(d=8, b=4), ICE)
    assert not e.deployable
    assert e.reasons[0] == "LUT +16%"


def test_large_config_rejected_with_percentages():
    e = hw.estimate(cfg(d=64, b=8), ICE)
    assert not e.deployable
    assert all(r.split()[0] in ("LUT", "DSP", "BRAM") and r.split()[1].startswith("+") and r.endswith("%") for r in e.reasons)
    ok = hw.estimate(cfg(d=8, b=4), XC7)
    assert ok.deployable and ok.reasons == []


def test_overshoot_percentage_rounding():
    est = hw.HwEstimate(luts=8001, dsps=20, brams=25, cycles=1, latency_ms=0.0, power_mw=0.0, energy_mj=0.0)
    assert hw.check_deployable(est, XC7) == (False, ["LUT +0%", "BRAM +150%"])


def test_calibration_reproduces_stored_profiles():
    coef, res = hw.calibrate_power(XC7)
    np.testing.assert_allclose(coef, (XC7.k_lut, XC7.k_dsp, XC7.k_bram), rtol=1e-9)
    assert np.abs(res).max() < 8.0
    lut_coef, lut_res = hw.calibrate_luts(XC7)
    np.testing.assert_allclose(lut_coef, XC7.lut_coef, rtol=1e-9, atol=1e-9)
    assert np.abs(lut_res).max() < 0.1 * XC7.luts
    assert hw.calibrate_lut_scale(XC7, ICE) == pytest.approx(ICE.lut_scale, rel=1e-9)


def test_reference_rows_predicted_deployable_on_xc7():
    for r in hw.REFERENCE_DESIGNS:
        c = ModelConfig(n=24, m=r["m"], k=r["k"], d_model=r["d_model"], bits=r["bits"])
        luts, dsps, _ = hw.estimate_resources(c, XC7)
        assert dsps <= XC7.dsps
        assert abs(luts - r["lut_pct"] * XC7.luts / 100) < 0.1 * XC7.luts
