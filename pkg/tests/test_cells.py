import itertools

import numpy as np
import pytest

from locosim.cells import (
    CLOCK_PERIOD, TRANSISTOR_COUNT, CellKind, Sizing, bit_pwl, build_cell, canonical_testbench, clock_sources,
    osc_steady_outputs,
)
from locosim.cells import testbench as make_testbench
from locosim.devices import waveform_value
from locosim.engine import SimConfig, transient
from locosim.netlist import PWL, validate

VDD = 0.8


@pytest.mark.parametrize("kind", list(CellKind))
def test_transistor_counts(kind):
    assert build_cell(kind).transistor_count == TRANSISTOR_COUNT[kind]


def test_table_counts():
    assert TRANSISTOR_COUNT[CellKind.OSC] == 6
    assert TRANSISTOR_COUNT[CellKind.LOCO] == 23
    assert TRANSISTOR_COUNT[CellKind.STANDARD_LATCH] == 12
    assert TRANSISTOR_COUNT[CellKind.CLOCKED_C_ELEMENT] == 6


@pytest.mark.parametrize("prefix, i1, i2", [("mosc0_", "q", "n0"), ("mosc1_", "n0", "q")])
def test_osc_input_fanout_inside_loco(prefix, i1, i2):
    devs = [m for m in build_cell(CellKind.LOCO).netlist.mosfets if m.name.startswith(prefix)]
    assert len(devs) == 6
    assert sum(m.gate == i1 for m in devs) == 2
    assert sum(m.gate == i2 for m in devs) == 4


def test_osc_ports_and_fanout():
    cell = build_cell("osc")
    assert set(cell.ports) == {"I1", "I2", "O1", "O2"}
    gates = [m.gate for m in cell.netlist.mosfets]
    assert gates.count("i1") == 2 and gates.count("i2") == 4


def test_loco_ports_and_sizing():
    cell = build_cell(CellKind.LOCO)
    assert set(cell.ports) == {"D", "CLK", "CLKB", "Q"}
    wl = {m.name: m.w_over_l for m in cell.netlist.mosfets}
    assert wl["mtg0p"] == 4 and wl["mtg0n"] == 2 and wl["mtg1p"] == 4 and wl["mtg1n"] == 2
    assert all(v == 1 for k, v in wl.items() if not k.startswith("mtg"))
    custom = build_cell(CellKind.LOCO, Sizing(tg_p=3, tg_n=1.5, default=2))
    assert {m.name: m.w_over_l for m in custom.netlist.mosfets}["mtg0p"] == 3
    with pytest.raises(ValueError):
        Sizing(tg_p=0)


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_cell("flipflop")


def test_parse_aliases():
    assert CellKind.parse("standard") is CellKind.STANDARD_LATCH
    assert CellKind.parse("LOCO") is CellKind.LOCO


@pytest.mark.parametrize("i1, i2, p1, p2, expected", [
    (0, 0, 0, 0, (1, 1)),
    (1, 1, 1, 1, (0, 0)),
    (0, 1, 1, 1, (0, 1)),
    (0, 1, 0, 0, (0, 0)),
    (1, 0, 0, 0, (0, 1)),
    (1, 0, 1, 1, (1, 1)),
])
def test_osc_reference_table(i1, i2, p1, p2, expected):
    assert osc_steady_outputs(i1, i2, p1, p2) == expected


def test_osc_simulated_matches_reference_all_priors():
    # every input pair reached from every other input pair
    cfg = SimConfig(t_stop=800e-12)
    cell = build_cell("osc")
    from locosim.experiments import osc_testbench

    for prior, now in itertools.product(itertools.product((0, 1), repeat=2), repeat=2):
        prev = osc_steady_outputs(*prior, 0, 0)
        exp = osc_steady_outputs(*now, *prev)
        tr = transient(osc_testbench(now, prior, VDD), cfg)
        for node, e in zip(("o1", "o2"), exp):
            assert abs(tr.v(node)[-1] - e * VDD) < 0.1 * VDD, (prior, now, node)
    assert cell.transistor_count == 6


def test_clock_sources_phase():
    clk, clkb = clock_sources(VDD)
    assert waveform_value(clk, 100e-12) == VDD and waveform_value(clkb, 100e-12) == 0
    assert waveform_value(clk, 400e-12) == 0 and waveform_value(clkb, 400e-12) == VDD
    assert waveform_value(clk, 600e-12) == VDD
    clk2, _ = clock_sources(VDD, phase=100e-12)
    assert waveform_value(clk2, 300e-12) == VDD


def test_bit_pwl_crossings():
    w = bit_pwl([0, 1, 1, 0], VDD)
    assert waveform_value(w, 600e-12) == pytest.approx(VDD / 2)
    assert waveform_value(w, 1600e-12) == pytest.approx(VDD / 2)
    assert waveform_value(w, 1000e-12) == VDD


def test_canonical_testbench_requires_two_cycles():
    with pytest.raises(ValueError):
        canonical_testbench("loco", [1], 1)
    with pytest.raises(ValueError):
        canonical_testbench("osc", [1], 2)


def _hold_state(pattern, n_cycles=2):
    n = canonical_testbench(CellKind.LOCO, pattern, n_cycles)
    assert validate(n) == []
    t_end = n_cycles * CLOCK_PERIOD - 10e-12
    tr = transient(n, SimConfig(t_stop=t_end))
    return {k: tr.value_at(k, t_end) for k in ("q", "n0", "n1", "n2", "n3", "n4", "n5")}


def test_loco_hold_state_zero():
    s = _hold_state([0])
    assert s["q"] < 0.08 and s["n0"] < 0.08 and s["n5"] < 0.08
    assert all(s[k] > 0.72 for k in ("n1", "n2", "n3", "n4"))


def test_loco_hold_state_one():
    s = _hold_state([1])
    assert s["q"] > 0.72 and s["n5"] > 0.72
    assert all(s[k] < 0.08 for k in ("n1", "n2", "n3", "n4"))


@pytest.mark.parametrize("kind", [CellKind.LOCO, CellKind.STANDARD_LATCH])
def test_latch_samples_on_falling_edge(kind):
    bits = [1, 0, 1, 0]
    n = canonical_testbench(kind, bits, 4)
    tr = transient(n, SimConfig(t_stop=4 * CLOCK_PERIOD))
    for k, b in enumerate(bits):
        t = k * CLOCK_PERIOD + 450e-12
        assert abs(tr.value_at("q", t) - b * VDD) < 0.08, (k, b)


@pytest.mark.parametrize("stored", [0, 1])
def test_loco_holds_for_ten_periods(stored):
    """CLK stopped low after latching; D toggles every period but Q does not drift."""
    cell = build_cell(CellKind.LOCO)
    clk = PWL(((0, VDD), (250e-12, VDD), (255e-12, 0.0)))
    clkb = PWL(((0, 0.0), (250e-12, 0.0), (255e-12, VDD)))
    bits = [stored] + [(stored + k) % 2 for k in range(1, 12)]
    tb = make_testbench(cell, bit_pwl(bits, VDD), VDD, clk, clkb)
    tr = transient(tb, SimConfig(t_stop=5.6e-9), report_nodes=["q"])
    sel = tr.times >= 500e-12
    q = tr.v("q")[sel]
    assert np.max(np.abs(q - q[0])) < 40e-3
    assert abs(q[0] - stored * VDD) < 0.08


def _overdrive(tr, mos, t, vdd=VDD):
    vg, vd, vs = (tr.value_at(x, t) for x in (mos.gate, mos.drain, mos.source))
    if mos.polarity == "N":
        return vg - min(vd, vs) - 0.3
    return max(vd, vs) - vg - 0.3


@pytest.mark.parametrize("pattern", [[0], [1]])
def test_clocked_devices_off_when_transparent(pattern):
    n = canonical_testbench(CellKind.LOCO, pattern, 2)
    tr = transient(n, SimConfig(t_stop=1e-9))
    for name in ("mp4", "mn3", "mn6"):
        mos = n.device(name)
        assert _overdrive(tr, mos, 600e-12) < 0, name  # transparent
    for name in ("mp4", "mn3"):
        assert _overdrive(tr, n.device(name), 900e-12) > 0, name  # hold
