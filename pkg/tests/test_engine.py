import io

import numpy as np
import pytest
from scipy.optimize import brentq

from locosim.cells import CellKind, canonical_testbench
from locosim.devices import EnvCondition, waveform_breakpoints
from locosim.engine import (
    METHOD_DC, METHOD_TRAP, SimConfig, SimulationError, dc_operating_point, kcl_residual, time_grid,
    trace_residuals, transient,
)
from locosim.netlist import DC, PWL, Capacitor, DoubleExp, ISource, Mosfet, Netlist, Pulse, VSource

RC = 10e-12  # 10 kOhm (as GMIN) * 1 fF
T_RAMP = 1e-15


def rc_netlist():
    return Netlist("rc", [
        VSource("vvdd", "vdd", "0", DC(0.8)),
        VSource("vin", "in", "0", PWL(((0.0, 0.0), (T_RAMP, 0.8)))),
        Capacitor("c1", "in", "x", 1e-15),
    ])


def rc_config(dt):
    return SimConfig(t_stop=5 * RC, dt_nominal=dt, dt_fine=min(dt, 1e-15), gmin=1e-4, node_cap_floor=0.0)


def rc_analytic(t):
    """High-pass RC response to a linear ramp of duration T_RAMP, for t >= T_RAMP."""
    peak = RC * 0.8 / T_RAMP * (1 - np.exp(-T_RAMP / RC))
    return peak * np.exp(-(t - T_RAMP) / RC)


def rc_error(dt):
    tr = transient(rc_netlist(), rc_config(dt))
    m = tr.times >= T_RAMP
    return np.max(np.abs(tr.v("x")[m] - rc_analytic(tr.times[m]))) / 0.8, tr


def test_rc_matches_exponential():
    err, tr = rc_error(RC / 100)
    assert err < 0.005
    assert tr.v("x")[-1] == pytest.approx(0.8 * np.exp(-5), rel=1e-3)


def test_rc_second_order_convergence():
    e1, _ = rc_error(RC / 100)
    e2, _ = rc_error(RC / 200)
    assert e1 / e2 >= 3.5


def test_rc_charge_balance():
    # charge delivered through the capacitor equals the charge left through the resistor
    err, tr = rc_error(RC / 100)
    leaked = np.trapezoid(1e-4 * tr.v("x"), tr.times)
    stored = 1e-15 * (0.8 - tr.v("x")[-1])
    assert leaked == pytest.approx(stored, rel=1e-3)


def test_residual_recheck_on_rc():
    _, tr = rc_error(RC / 100)
    res = trace_residuals(rc_netlist(), rc_config(RC / 100), tr)
    assert np.max(np.abs(res)) <= 1e-9


def inverter(vin, vdd=0.8):
    return Netlist("inv", [
        VSource("vvdd", "vdd", "0", DC(vdd)),
        VSource("vin", "a", "0", DC(vin)),
        Mosfet("mp", "y", "a", "vdd", "P", 1.0, "pmos"),
        Mosfet("mn", "y", "a", "0", "N", 1.0, "nmos"),
    ])


def _sq(vov, vds, beta, lam=0.1):
    if vov <= 0:
        return 0.0
    if vds < vov:
        return beta * (vov * vds - vds * vds / 2) * (1 + lam * vds)
    return beta / 2 * vov * vov * (1 + lam * vds)


def inverter_oracle(vin, vdd=0.8, gmin=1e-12):
    def f(y):
        ip = _sq(vdd - vin - 0.3, vdd - y, 100e-6)
        i_n = _sq(vin - 0.3, y, 200e-6)
        return ip - i_n - gmin * y
    return brentq(f, 0.0, vdd, xtol=1e-14)


@pytest.mark.parametrize("vin", [0.0, 0.2, 0.35, 0.4, 0.45, 0.6, 0.8])
def test_inverter_dc_against_bisection(vin):
    op = dc_operating_point(inverter(vin), SimConfig())
    assert op["y"] == pytest.approx(inverter_oracle(vin), abs=1e-6)


def test_supply_current_sign():
    # an NMOS follower feeding a leak: the supply delivers exactly what leaks away
    n = Netlist("follow", [VSource("vvdd", "vdd", "0", DC(0.8)), Mosfet("m1", "vdd", "vdd", "x", "N", 1.0, "nmos")])
    cfg = SimConfig(gmin=1e-6)
    op = dc_operating_point(n, cfg)
    assert op.supply_currents["vvdd"] > 0
    assert op.supply_currents["vvdd"] == pytest.approx(1e-6 * op["x"], rel=1e-6)


def test_current_source_direction():
    n = Netlist("isrc", [VSource("vvdd", "vdd", "0", DC(0.8)), ISource("i1", "0", "x", DC(1e-9))])
    op = dc_operating_point(n, SimConfig(gmin=1e-6))
    assert op["x"] == pytest.approx(1e-3, rel=1e-6)


def test_floating_voltage_source():
    n = Netlist("float", [VSource("vvdd", "vdd", "0", DC(0.8)), VSource("vf", "a", "b", DC(0.3))])
    op = dc_operating_point(n, SimConfig(gmin=1e-6))
    assert op["a"] - op["b"] == pytest.approx(0.3, abs=1e-9)
    assert op["a"] == pytest.approx(0.15, abs=1e-6)
    assert abs(op.branch_currents["vf"]) == pytest.approx(1e-6 * 0.15, rel=1e-4)


def test_grid_has_exact_breakpoints_and_fine_window():
    n = inverter(0.0).replace_device(VSource("vin", "a", "0", Pulse(0, 0.8, 80e-12, 5e-12, 5e-12, 40e-12, 200e-12)))
    n = n.with_devices(ISource("isnu", "0", "y", DoubleExp(1e-15, t_start=123.4e-12)))
    cfg = SimConfig(t_stop=300e-12)
    g = time_grid(n, cfg)
    pulse = n.device("vin").waveform
    for bp in waveform_breakpoints(pulse, cfg.t_stop) + [123.4e-12, 300e-12]:
        assert np.min(np.abs(g - bp)) == 0.0
    steps = np.diff(g)
    fine = (g[:-1] >= 123.4e-12) & (g[:-1] < 123.4e-12 + 60e-12)
    assert np.max(steps[fine]) <= 1e-15 * (1 + 1e-9)
    assert np.max(steps) <= 50e-15 * (1 + 1e-9)
    assert np.all(steps > 0)


def test_transient_methods_and_csv():
    n = canonical_testbench(CellKind.LOCO, [0, 1], 2)
    cfg = SimConfig(t_stop=1e-9)
    tr = transient(n, cfg, report_nodes=["q", "d"])
    assert tr.methods[0] == METHOD_DC
    assert np.all(tr.methods[1:] == METHOD_TRAP)
    buf = io.StringIO()
    tr.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split(",")[:3] == ["t_s", "q", "d"]
    assert any(h.startswith("i_vvdd") for h in lines[0].split(","))
    assert len(lines) == len(tr) + 1


def test_latch_trace_residuals_within_tolerance():
    n = canonical_testbench(CellKind.LOCO, [0, 1, 1, 0], 4)
    cfg = SimConfig(t_stop=2e-9)
    tr = transient(n, cfg)
    assert np.max(np.abs(trace_residuals(n, cfg, tr))) <= cfg.i_tol


def test_kcl_residual_flags_wrong_state():
    n = inverter(0.0)
    cfg = SimConfig()
    op = dc_operating_point(n, cfg)
    good = kcl_residual(n, cfg, op.voltages, 0.0)
    bad = kcl_residual(n, cfg, {**op.voltages, "y": 0.4}, 0.0)
    assert good < 1e-9
    assert bad > 1e-6


def test_nonconvergence_is_reported():
    with pytest.raises(SimulationError):
        dc_operating_point(inverter(0.4), SimConfig(max_newton_iters=1))


def test_unknown_report_node():
    with pytest.raises(KeyError):
        transient(inverter(0.0), SimConfig(t_stop=1e-12), report_nodes=["nope"])


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt_fine=1e-13, dt_nominal=1e-14)
    with pytest.raises(ValueError):
        SimConfig(fine_windows=((0, 2e-9),), t_stop=1e-9)
    assert SimConfig().with_(env=EnvCondition(vdd=1.0)).env.vdd == 1.0
