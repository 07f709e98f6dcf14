"""Acceptance criteria 1-11; a PASS/FAIL line per criterion is printed in the terminal summary."""

import io
import math
import os
import random
import time

import numpy as np
import pytest
from scipy.integrate import quad

from locosim.cells import TRANSISTOR_COUNT, CellKind, build_cell
from locosim.devices import double_exp_peak_time, waveform_value
from locosim.engine import SimConfig, trace_residuals, transient
from locosim.experiments import (
    McConfig, PvtAxis, axis_points, functional_check, monte_carlo, osc_restoration, osc_truth_table,
    short_circuit_protocol, short_circuit_testbench, short_circuit_trace,
)
from locosim.fault import CampaignSpec, Classification, run_campaign
from locosim.metrics import ExceedsBound, avg_current, avg_dev, latch_qcrit, pdp, relative_delta, stddev
from locosim.netlist import DC, PWL, Capacitor, DoubleExp, Netlist, VSource

CFG = SimConfig()


@pytest.fixture(scope="module", autouse=True)
def compiled_kernels():
    # one-off numba compilation (or cache load) is not part of any criterion's runtime
    transient(Netlist("warm", [VSource("vvdd", "vdd", "0", DC(0.8)), Capacitor("c1", "vdd", "x", 1e-15)]),
              SimConfig(t_stop=1e-12))


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# -- 1. OSC truth table ------------------------------------------------------------


def test_criterion_01_osc_truth_table(record_property):
    with Timer() as tm:
        cases = osc_truth_table(CFG)
    record_property("runtime_s", round(tm.elapsed, 1))
    assert len(cases) == 6
    for c in cases:
        assert c.passed, c.as_dict()
        assert max(c.drift) < 40e-3
    # both retention rows entered from both prior output values
    assert {(c.inputs, c.expected) for c in cases if c.inputs in ((0, 1), (1, 0))} == {
        ((0, 1), (0, 1)), ((0, 1), (0, 0)), ((1, 0), (0, 1)), ((1, 0), (1, 1))}
    assert tm.elapsed < 10


# -- 2. OSC output restoration --------------------------------------------------------


@pytest.mark.parametrize("inputs, node", [((0, 0), "o2"), ((1, 1), "o1")])
def test_criterion_02_osc_restoration(inputs, node, record_property):
    with Timer() as tm:
        r = osc_restoration(inputs, node, 2.5e-15, CFG)
    record_property(f"t_recover_{node}_ps", round(r.t_recover * 1e12, 1))
    assert r.passed
    assert r.t_recover <= 150e-12
    assert tm.elapsed < 10


# -- 3. LOCO self-resilience ------------------------------------------------------------


def test_criterion_03_loco_full_resilience(record_property):
    with Timer() as tm:
        default = run_campaign(CampaignSpec(CellKind.LOCO, q_inj=2.5e-15), CFG)
        grid = run_campaign(CampaignSpec(CellKind.LOCO, q_inj=2.5e-15, schedule="hold", mode="hold"), CFG)
        std = run_campaign(CampaignSpec(CellKind.STANDARD_LATCH, q_inj=2.5e-15, schedule="hold", mode="hold"), CFG)
    record_property("loco_default", f"{default.counts()['Recovered']}/{len(default.outcomes)}")
    record_property("loco_grid", f"{grid.counts()['Recovered']}/{len(grid.outcomes)}")
    record_property("runtime_s", round(tm.elapsed, 1))
    assert len(default.outcomes) == 32 and default.all_recovered, default.counts()
    assert {(o.injection.node, o.stored) for o in grid.outcomes} == {
        (n, s) for n in ("n0", "n1", "n2", "n3", "n4", "n5", "q") for s in (0, 1)}
    assert grid.all_recovered, grid.counts()
    keeper = [o for o in std.outcomes if o.injection.node == "n_keep"]
    assert len(keeper) == 2
    assert all(o.classification is Classification.UPSET for o in keeper)
    assert tm.elapsed < 120


# -- 4. Qcrit ordering --------------------------------------------------------------------


def test_criterion_04_qcrit_ordering(record_property):
    with Timer() as tm:
        q_loco, loco_searches = latch_qcrit(CellKind.LOCO, CFG)
        q_std, std_searches = latch_qcrit(CellKind.STANDARD_LATCH, CFG)
    record_property("qcrit_loco", str(q_loco) if isinstance(q_loco, ExceedsBound) else f"{q_loco * 1e15:.2f}fC")
    record_property("qcrit_std_fC", round(q_std * 1e15, 2))
    record_property("runtime_s", round(tm.elapsed, 1))
    assert not isinstance(q_std, ExceedsBound)
    assert isinstance(q_loco, ExceedsBound) or q_loco > q_std
    # certified endpoints: the last two probes of each finite search re-simulate lo (recovered) and hi (upset)
    for s in std_searches + loco_searches:
        if isinstance(s.q_crit, ExceedsBound):
            assert s.probes[0] == (s.q_crit.limit, "Recovered")
        else:
            assert s.probes[-2] == (s.recovered_q, "Recovered")
            assert s.probes[-1][0] == s.q_crit and s.probes[-1][1] != "Recovered"
            assert s.q_crit - s.recovered_q <= 0.05e-15 * (1 + 1e-9)
    assert tm.elapsed < 300


# -- 5. injection pulse ----------------------------------------------------------------------


def test_criterion_05_pulse_charge_and_peak():
    for q in (0.1e-15, 2.5e-15, 100e-15):
        w = DoubleExp(q, 0.1e-12, 3e-12, t_start=10e-12)
        total, _ = quad(lambda t: waveform_value(w, t), 10e-12, 10e-12 + 300e-12, points=[10.352e-12, 13e-12],
                        epsabs=0, epsrel=1e-10, limit=400)
        assert abs(total - q) / q < 1e-3
    tp = double_exp_peak_time(0.1e-12, 3e-12)
    assert tp == pytest.approx(0.1e-12 * 3e-12 / 2.9e-12 * math.log(30), rel=1e-12)
    assert tp == pytest.approx(0.352e-12, abs=0.5e-15)
    ts = np.arange(0.0, 3e-12, 1e-15)
    sampled = np.array([waveform_value(DoubleExp(2.5e-15), t) for t in ts])
    assert abs(ts[np.argmax(sampled)] - tp) <= 5e-15


# -- 6. solver correctness ----------------------------------------------------------------------

RC = 10e-12


def _rc_run(dt):
    # a 1 fF capacitor discharging through GMIN used as a 10 kOhm resistor
    n = Netlist("rc", [VSource("vvdd", "vdd", "0", DC(0.8)), VSource("vin", "in", "0", PWL(((0.0, 0.0), (1e-15, 0.8)))),
                       Capacitor("c1", "in", "x", 1e-15)])
    cfg = SimConfig(t_stop=5 * RC, dt_nominal=dt, dt_fine=min(dt, 1e-15), gmin=1e-4, node_cap_floor=0.0)
    tr = transient(n, cfg)
    m = tr.times >= 1e-15
    peak = RC * 0.8 / 1e-15 * (1 - math.exp(-1e-15 / RC))
    exact = peak * np.exp(-(tr.times[m] - 1e-15) / RC)
    return np.max(np.abs(tr.v("x")[m] - exact)) / 0.8, n, cfg, tr


def test_criterion_06_solver_correctness(record_property):
    e1, n, cfg, tr = _rc_run(RC / 100)
    e2, *_ = _rc_run(RC / 200)
    record_property("rc_err_pct", f"{e1 * 100:.3g}")
    record_property("order_ratio", round(e1 / e2, 2))
    assert e1 < 0.005
    assert e1 / e2 >= 3.5
    assert np.max(np.abs(trace_residuals(n, cfg, tr))) <= cfg.i_tol
    from locosim.cells import canonical_testbench

    latch = canonical_testbench(CellKind.LOCO, [1, 0, 1, 1], 4)
    ltr = transient(latch, CFG.with_(t_stop=2e-9))
    assert np.max(np.abs(trace_residuals(latch, CFG.with_(t_stop=2e-9), ltr))) <= CFG.i_tol


# -- 7. arithmetic anchors ---------------------------------------------------------------------


def _brute_sigma(xs):
    m = math.fsum(xs) / len(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / len(xs))


def _brute_ad(xs):
    m = math.fsum(xs) / len(xs)
    return math.fsum(abs(x - m) for x in xs) / len(xs)


def test_criterion_07_arithmetic_anchors():
    assert pdp(0.18e-6, 5.24e-12) * 1e18 == pytest.approx(0.93, abs=0.02)
    assert relative_delta(23, 24) * 100 == pytest.approx(-4.17, abs=0.01)
    assert relative_delta(23, 40) * 100 == pytest.approx(-42.50, abs=0.01)
    rng = random.Random(12345)
    for _ in range(1000):
        xs = [rng.gauss(rng.uniform(-5, 5), rng.uniform(0.01, 3)) for _ in range(rng.randint(2, 200))]
        s, a = _brute_sigma(xs), _brute_ad(xs)
        assert abs(stddev(xs) - s) <= 1e-12 * s
        assert abs(avg_dev(xs) - a) <= 1e-12 * a


# -- 8. short-circuit protocol -------------------------------------------------------------------


def test_criterion_08_short_circuit_protocol(record_property):
    tb = short_circuit_testbench(CellKind.LOCO)
    assert isinstance(tb.device("vclk").waveform, DC) and tb.device("vclk").waveform.v == 0.8
    tr = short_circuit_trace(CellKind.LOCO, CFG)
    for t in (80e-12, 170e-12):
        assert np.min(np.abs(tr.times - t)) == 0.0
        assert tr.value_at("d", t) == pytest.approx(0.4, abs=1e-12)
    # |.| on a synthetic sign-alternating series: the average equals the amplitude, never cancels
    from locosim.engine import Trace

    t = np.linspace(0, 300e-12, 3001)
    alt = np.where(np.arange(len(t)) % 2 == 0, 1e-6, -1e-6)
    syn = Trace(t, [], np.zeros((len(t), 0)), {"vvdd": alt}, np.zeros(len(t), int), [])
    assert avg_current(syn) == pytest.approx(0.5e-6, rel=1e-9)  # two triangles per segment
    assert abs(np.trapezoid(alt, t)) < 1e-3 * avg_current(syn) * 300e-12
    loco = short_circuit_protocol(CellKind.LOCO, CFG)
    std = short_circuit_protocol(CellKind.STANDARD_LATCH, CFG)
    direction = "PASS" if loco < std else "FAIL"
    record_property("i_loco_uA", round(loco * 1e6, 3))
    record_property("i_std_uA", round(std * 1e6, 3))
    record_property("directional_check", f"{direction} (model-dependent, reported only)")
    print(f"short-circuit: LOCO {loco * 1e6:.3f} uA, standard {std * 1e6:.3f} uA -> directional {direction}")


# -- 9. functional latch behaviour ------------------------------------------------------------------


@pytest.mark.parametrize("kind", [CellKind.STANDARD_LATCH, CellKind.LOCO])
def test_criterion_09_functional_random_pattern(kind, record_property):
    bits = np.random.default_rng(2024).integers(0, 2, 16).tolist()
    with Timer() as tm:
        checks = functional_check(kind, bits, CFG)
    record_property(f"runtime_{kind.value}_s", round(tm.elapsed, 1))
    assert len(checks) == 16
    for c in checks:
        assert c.passed, c
    assert tm.elapsed < 30


# -- 10. PVT / Monte Carlo machinery ------------------------------------------------------------------


def test_criterion_10_pvt_grids():
    assert [len(axis_points(*a.value[1:])) for a in (PvtAxis.VTH, PvtAxis.TEMP, PvtAxis.VDD)] == [8, 20, 11]


def _mc_csv(res):
    buf = io.StringIO()
    res.write_csv(buf)
    return buf.getvalue()


def test_criterion_10_mc_deterministic_and_worker_independent(record_property):
    mc = McConfig(n_samples=100, seed=0)
    cfg = CFG.with_(dt_nominal=100e-15)
    a = monte_carlo(CellKind.LOCO, mc, cfg, jobs=1)
    b = monte_carlo(CellKind.LOCO, mc, cfg, jobs=1)
    c = monte_carlo(CellKind.LOCO, mc, cfg, jobs=2)
    assert _mc_csv(a) == _mc_csv(b) == _mc_csv(c)
    s = a.summary()
    assert s["n_excluded"] == 0
    assert s["ad_power_uW"] <= s["sigma_power_uW"]
    assert s["ad_delay_ps"] <= s["sigma_delay_ps"]
    record_property("sigma_power_uW", f"{s['sigma_power_uW']:.4g}")
    record_property("sigma_delay_ps", f"{s['sigma_delay_ps']:.4g}")


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("LOCOSIM_LONG") != "1", reason="long run; set LOCOSIM_LONG=1")
def test_criterion_10_mc_long_run(record_property):
    with Timer() as tm:
        res = monte_carlo(CellKind.LOCO, McConfig(n_samples=2000, seed=1), CFG)
    s = res.summary()
    record_property("runtime_s", round(tm.elapsed))
    assert s["n_samples"] == 2000
    assert s["ad_power_uW"] <= s["sigma_power_uW"] and s["ad_delay_ps"] <= s["sigma_delay_ps"]


# -- 11. structural anchors ----------------------------------------------------------------------------


def test_criterion_11_structure():
    assert build_cell(CellKind.OSC).transistor_count == 6
    assert build_cell(CellKind.LOCO).transistor_count == 23 == TRANSISTOR_COUNT[CellKind.LOCO]
    assert build_cell(CellKind.STANDARD_LATCH).transistor_count == 12
    gates = [m.gate for m in build_cell(CellKind.OSC).netlist.mosfets]
    assert gates.count("i1") == 2 and gates.count("i2") == 4
    loco = build_cell(CellKind.LOCO).netlist.mosfets
    for prefix, i1, i2 in (("mosc0_", "q", "n0"), ("mosc1_", "n0", "q")):
        g = [m.gate for m in loco if m.name.startswith(prefix)]
        assert g.count(i1) == 2 and g.count(i2) == 4
