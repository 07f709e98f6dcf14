import csv
import io
import json

import numpy as np
import pytest

from locosim.cells import CellKind
from locosim.engine import SimConfig
from locosim.experiments import (
    OSC_CASES, McConfig, PvtAxis, axis_points, condition_for, draw_sample, functional_check, monte_carlo,
    osc_case, osc_restoration, pvt_sweep, short_circuit_protocol, short_circuit_trace,
)
from locosim.metrics import avg_dev, stddev

CFG = SimConfig()


@pytest.mark.parametrize("axis, n", [(PvtAxis.VTH, 8), (PvtAxis.TEMP, 20), (PvtAxis.VDD, 11)])
def test_axis_grids(axis, n):
    pts = axis_points(*axis.value[1:])
    assert len(pts) == n
    assert pts[0] == axis.value[1] and pts[-1] == pytest.approx(axis.value[2])


def test_axis_degenerate_and_invalid():
    assert axis_points(0.8, 0.8, 0.05) == [0.8]
    with pytest.raises(ValueError):
        axis_points(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        axis_points(1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        PvtAxis.parse("pressure")


def test_condition_for_axes():
    assert condition_for(PvtAxis.VTH, 0.03).dvth == 0.03
    assert condition_for(PvtAxis.TEMP, -40.0).temperature == -40.0
    assert condition_for(PvtAxis.VDD, 0.6).vdd == 0.6


def test_single_point_sweep_has_zero_spread():
    res = pvt_sweep(CellKind.LOCO, "vdd", CFG, points=[0.8])
    assert res.sigma_power == 0.0 and res.sigma_delay == 0.0
    assert res.points[0].valid
    buf = io.StringIO()
    res.write_csv(buf)
    assert buf.getvalue().splitlines()[0] == "vdd,power_uW,t_avg_ps,error"


def test_mc_draws_are_per_sample_streams():
    mc = McConfig(n_samples=10, seed=3)
    assert draw_sample(mc, 4) == draw_sample(McConfig(n_samples=500, seed=3), 4)
    assert draw_sample(mc, 4) != draw_sample(mc, 5)
    assert draw_sample(mc, 4) != draw_sample(McConfig(seed=4), 4)


def test_mc_draw_statistics():
    mc = McConfig(n_samples=4000, seed=1)
    s = [draw_sample(mc, i) for i in range(4000)]
    vdd = np.array([x.vdd for x in s])
    temp = np.array([x.temp for x in s])
    vn = np.array([x.vth_n for x in s])
    assert vdd.mean() == pytest.approx(0.8, abs=0.005)
    assert vdd.std() == pytest.approx(0.8 * 0.2 / 3, rel=0.05)
    assert temp.mean() == pytest.approx(27.0, abs=1.5)
    assert vn.std() == pytest.approx(0.3 * 0.1 / 3, rel=0.05)
    assert temp.min() >= -55 and temp.max() <= 175


def test_mc_single_sample_has_zero_dispersion():
    res = monte_carlo(CellKind.LOCO, McConfig(n_samples=1), CFG)
    s = res.summary()
    assert s["sigma_power_uW"] == 0.0 and s["ad_power_uW"] == 0.0
    assert s["sigma_delay_ps"] == 0.0 and s["n_excluded"] == 0


def test_mc_deterministic_and_csv_recomputes_summary():
    mc = McConfig(n_samples=3, seed=7)
    a = monte_carlo(CellKind.LOCO, mc, CFG)
    b = monte_carlo(CellKind.LOCO, mc, CFG)
    out_a, out_b = io.StringIO(), io.StringIO()
    a.write_csv(out_a)
    b.write_csv(out_b)
    assert out_a.getvalue() == out_b.getvalue()
    rows = list(csv.DictReader(io.StringIO(out_a.getvalue())))
    pw = [float(r["power_uW"]) for r in rows]
    dl = [float(r["t_avg_ps"]) for r in rows]
    s = json.loads(json.dumps(a.summary()))
    assert stddev(pw) == pytest.approx(s["sigma_power_uW"], rel=1e-12)
    assert avg_dev(pw) == pytest.approx(s["ad_power_uW"], rel=1e-12)
    assert stddev(dl) == pytest.approx(s["sigma_delay_ps"], rel=1e-12)
    assert avg_dev(dl) == pytest.approx(s["ad_delay_ps"], rel=1e-12)


def test_mc_rejects_bad_config():
    with pytest.raises(ValueError):
        McConfig(n_samples=0)
    with pytest.raises(ValueError):
        McConfig(temp_sigma=-1)


def test_short_circuit_grid_hits_switching_instants():
    tr = short_circuit_trace(CellKind.LOCO, CFG)
    for t in (80e-12, 170e-12):
        assert np.min(np.abs(tr.times - t)) == 0.0
        assert tr.value_at("d", t) == pytest.approx(0.4)


def test_short_circuit_static_floor():
    on = short_circuit_protocol(CellKind.LOCO, CFG)
    off = short_circuit_protocol(CellKind.LOCO, CFG, switching=False)
    assert 0 <= off < 1e-3 * on


def test_osc_retention_case():
    case = osc_case((0, 1), (0, 0), CFG)
    assert case.expected == (0, 1)
    assert case.passed, case.as_dict()
    assert len(OSC_CASES) == 6


def test_osc_restoration_within_window():
    r = osc_restoration((0, 0), "o2", 2.5e-15, CFG)
    assert r.passed
    assert r.v_final == pytest.approx(0.8, abs=0.04)


def test_functional_check_short_pattern():
    checks = functional_check(CellKind.LOCO, [1, 0, 0, 1], CFG)
    assert [c.expected for c in checks] == [1, 0, 0, 1]
    assert all(c.passed for c in checks)
