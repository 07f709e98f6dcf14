"""Netlist generators for the filtering elements, the OSC, the LOCO latch and a 12T baseline latch."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .netlist import DC, GROUND, PWL, VDD, Mosfet, Netlist, Pulse, VSource

CLOCK_PERIOD = 500e-12
EDGE = 5e-12
D_DELAY = 100e-12


class CellKind(enum.Enum):
    INVERTER = "inverter"
    DUAL_INPUT_INVERTER = "dual_input_inverter"
    CLOCKED_DUAL_INPUT_INVERTER = "clocked_dual_input_inverter"
    TRANSMISSION_GATE = "transmission_gate"
    C_ELEMENT = "c_element"
    CLOCKED_C_ELEMENT = "clocked_c_element"
    OSC = "osc"
    STANDARD_LATCH = "standard"
    LOCO = "loco"

    @classmethod
    def parse(cls, text: str) -> "CellKind":
        key = text.strip().lower().replace("-", "_")
        aliases = {"standard_latch": "standard", "standardlatch": "standard"}
        key = aliases.get(key, key)
        for kind in cls:
            if kind.value == key or kind.name.lower() == key:
                return kind
        raise ValueError(f"unknown cell kind {text!r}")


TRANSISTOR_COUNT = {
    CellKind.INVERTER: 2,
    CellKind.DUAL_INPUT_INVERTER: 2,
    CellKind.CLOCKED_DUAL_INPUT_INVERTER: 4,
    CellKind.TRANSMISSION_GATE: 2,
    CellKind.C_ELEMENT: 4,
    CellKind.CLOCKED_C_ELEMENT: 6,
    CellKind.OSC: 6,
    CellKind.STANDARD_LATCH: 12,
    CellKind.LOCO: 23,
}

LATCHES = (CellKind.STANDARD_LATCH, CellKind.LOCO)


@dataclass(frozen=True)
class Sizing:
    tg_p: float = 4.0
    tg_n: float = 2.0
    default: float = 1.0

    def __post_init__(self):
        if min(self.tg_p, self.tg_n, self.default) <= 0:
            raise ValueError("all W/L ratios must be positive")


@dataclass(frozen=True)
class Cell:
    kind: CellKind
    netlist: Netlist
    ports: dict
    state_nodes: tuple = ()
    # name of the node that carries the latch output / stored value
    storage_node: str | None = None
    # logic value of each state node relative to the stored bit: True = same, False = inverted
    state_polarity: dict = field(default_factory=dict)

    @property
    def transistor_count(self) -> int:
        return self.netlist.transistor_count

    def expected_state(self, stored: int) -> dict:
        return {n: stored if same else 1 - stored for n, same in self.state_polarity.items()}


class _Builder:
    def __init__(self, sizing: Sizing, prefix: str = ""):
        self.sizing = sizing
        self.prefix = prefix
        self.devices = []

    def _name(self, name):
        # MOSFET card names must start with "m" to survive a netlist round trip
        name = self.prefix + name
        return name if name.startswith("m") else "m" + name

    def n(self, name, d, g, s, wl=None):
        self.devices.append(Mosfet(self._name(name), d, g, s, "N", wl or self.sizing.default, "nmos"))

    def p(self, name, d, g, s, wl=None):
        self.devices.append(Mosfet(self._name(name), d, g, s, "P", wl or self.sizing.default, "pmos"))

    def tg(self, name, a, b, n_gate, p_gate):
        self.n(name + "n", a, n_gate, b, self.sizing.tg_n)
        self.p(name + "p", a, p_gate, b, self.sizing.tg_p)

    def inverter(self, name, inp, out):
        self.p(name + "p", out, inp, VDD)
        self.n(name + "n", out, inp, GROUND)

    def osc(self, name, i1, i2, o1, o2):
        # the I1-gated device of each stack sits next to the output, so a
        # retained (high-impedance) output never shares charge with the stack node
        a, b = f"{name}a", f"{name}b"
        self.p(name + "m1", a, i2, VDD)
        self.p(name + "m0", o1, i1, a)
        self.n(name + "m5", o1, i2, GROUND)
        self.p(name + "m4", o2, i2, VDD)
        self.n(name + "m3", o2, i1, b)
        self.n(name + "m2", b, i2, GROUND)


def _osc(b: _Builder) -> Cell:
    b.osc("", "i1", "i2", "o1", "o2")
    return Cell(CellKind.OSC, Netlist("osc", b.devices), {"I1": "i1", "I2": "i2", "O1": "o1", "O2": "o2"},
                state_nodes=("o1", "o2"))


def _loco(b: _Builder) -> Cell:
    b.tg("tg0", "d", "q", "clk", "clkb")
    b.tg("tg1", "d", "n0", "clk", "clkb")
    # OSC0 (I1=Q, I2=N0): m5 is the direct pull-down of N3, m4 the direct pull-up of N1
    b.osc("osc0_", "q", "n0", "n3", "n1")
    # OSC1 (I1=N0, I2=Q): m5 pulls N4 down, m4 pulls N2 up
    b.osc("osc1_", "n0", "q", "n4", "n2")
    # dual-input inverter driving N5
    b.p("mp5", "n5", "n2", VDD)
    b.n("mn5", "n5", "n4", GROUND)
    # clock-gated dual-input inverter driving Q
    b.p("mp4", "qp", "clk", VDD)
    b.p("mp3", "q", "n1", "qp")
    b.n("mn4", "q", "n3", "qn")
    b.n("mn3", "qn", "clkb", GROUND)
    b.n("mn6", "n0", "clkb", "n5")
    pol = {"q": True, "n0": True, "n5": True, "n1": False, "n2": False, "n3": False, "n4": False}
    return Cell(CellKind.LOCO, Netlist("loco", b.devices), {"D": "d", "CLK": "clk", "CLKB": "clkb", "Q": "q"},
                state_nodes=("n0", "n1", "n2", "n3", "n4", "n5", "q"), storage_node="q", state_polarity=pol)


def _standard(b: _Builder) -> Cell:
    b.inverter("ckinv", "clk", "clkb_i")
    b.tg("tgin", "d", "n_keep", "clk", "clkb_i")
    b.inverter("fwd", "n_keep", "n_fwd")
    b.inverter("fb", "n_fwd", "n_fb")
    b.tg("tgfb", "n_fb", "n_keep", "clkb_i", "clk")
    b.inverter("out", "n_fwd", "q")
    pol = {"n_keep": True, "n_fwd": False, "n_fb": True, "q": True}
    return Cell(CellKind.STANDARD_LATCH, Netlist("standard", b.devices), {"D": "d", "CLK": "clk", "Q": "q"},
                state_nodes=("n_keep", "n_fwd", "n_fb", "q"), storage_node="n_keep", state_polarity=pol)


def build_cell(kind: CellKind | str, sizing: Sizing | None = None) -> Cell:
    """Build a cell's transistor netlist (no sources) with named ports."""
    if isinstance(kind, str):
        kind = CellKind.parse(kind)
    b = _Builder(sizing or Sizing())
    if kind is CellKind.INVERTER:
        b.inverter("m", "a", "y")
        ports = {"A": "a", "Y": "y"}
    elif kind is CellKind.DUAL_INPUT_INVERTER:
        b.p("mp", "y", "a", VDD)
        b.n("mn", "y", "b", GROUND)
        ports = {"A": "a", "B": "b", "Y": "y"}
    elif kind is CellKind.CLOCKED_DUAL_INPUT_INVERTER:
        b.p("mpc", "yp", "clk", VDD)
        b.p("mp", "y", "a", "yp")
        b.n("mn", "y", "b", "yn")
        b.n("mnc", "yn", "clkb", GROUND)
        ports = {"A": "a", "B": "b", "CLK": "clk", "CLKB": "clkb", "Y": "y"}
    elif kind is CellKind.TRANSMISSION_GATE:
        b.tg("tg", "a", "y", "en", "enb")
        ports = {"A": "a", "Y": "y", "EN": "en", "ENB": "enb"}
    elif kind is CellKind.C_ELEMENT:
        b.p("mpa", "yp", "a", VDD)
        b.p("mpb", "y", "b", "yp")
        b.n("mnb", "y", "b", "yn")
        b.n("mna", "yn", "a", GROUND)
        ports = {"A": "a", "B": "b", "Y": "y"}
    elif kind is CellKind.CLOCKED_C_ELEMENT:
        b.p("mpc", "yp0", "clkb", VDD)
        b.p("mpa", "yp", "a", "yp0")
        b.p("mpb", "y", "b", "yp")
        b.n("mnb", "y", "b", "yn")
        b.n("mna", "yn", "a", "yn0")
        b.n("mnc", "yn0", "clk", GROUND)
        ports = {"A": "a", "B": "b", "CLK": "clk", "CLKB": "clkb", "Y": "y"}
    elif kind is CellKind.OSC:
        return _osc(b)
    elif kind is CellKind.LOCO:
        return _loco(b)
    elif kind is CellKind.STANDARD_LATCH:
        return _standard(b)
    else:
        raise ValueError(f"unknown cell kind {kind!r}")
    return Cell(kind, Netlist(kind.value, b.devices), ports)


def osc_steady_outputs(i1: int, i2: int, prev_o1: int, prev_o2: int) -> tuple[int, int]:
    """Logic-level reference for the output-split C-element (retained outputs keep their previous value)."""
    if i1 == i2:
        return (1 - i1, 1 - i1)
    if i1 == 0:
        return (0, prev_o2)
    return (prev_o1, 1)


# -- testbenches ------------------------------------------------------------------


def clock_sources(vdd: float, period: float = CLOCK_PERIOD, edge: float = EDGE, high_first: bool = True,
                  phase: float = 0.0):
    """CLK high during [k*T, k*T + T/2) (transparent) and an ideal complementary CLKB.

    ``phase`` shifts both clocks later in time.
    """
    hi, lo = (vdd, 0.0) if high_first else (0.0, vdd)
    half = period / 2
    clk = Pulse(hi, lo, phase + half, edge, edge, half - edge, period)
    clkb = Pulse(lo, hi, phase + half, edge, edge, half - edge, period)
    return clk, clkb


def bit_pwl(bits, vdd: float, period: float = CLOCK_PERIOD, delay: float = D_DELAY, edge: float = EDGE,
            t0: float = 0.0) -> PWL:
    """PWL for a bit stream: bit i holds from i*T + delay, with 50% crossings exactly there."""
    pts = [(0.0, bits[0] * vdd)]
    for i in range(1, len(bits)):
        if bits[i] != bits[i - 1]:
            tc = t0 + i * period + delay
            pts.append((tc - edge / 2, bits[i - 1] * vdd))
            pts.append((tc + edge / 2, bits[i] * vdd))
    return PWL(tuple(pts))


def edges_pwl(initial: int, edges, vdd: float, edge: float = EDGE) -> PWL:
    """PWL with a transition (50% crossing) at each listed time, alternating from ``initial``."""
    pts = [(0.0, initial * vdd)]
    level = initial
    for tc in edges:
        pts.append((tc - edge / 2, level * vdd))
        level = 1 - level
        pts.append((tc + edge / 2, level * vdd))
    return PWL(tuple(pts))


def testbench(cell: Cell, d_wave, vdd: float = 0.8, clk_wave=None, clkb_wave=None, extra=()) -> Netlist:
    """Wrap a latch cell with VDD, CLK/CLKB and D sources."""
    devs = list(cell.netlist.devices)
    devs.append(VSource("vvdd", VDD, GROUND, DC(vdd)))
    if clk_wave is None:
        clk_wave, clkb_wave = clock_sources(vdd)
    devs.append(VSource("vclk", "clk", GROUND, clk_wave))
    if "CLKB" in cell.ports:
        devs.append(VSource("vclkb", "clkb", GROUND, clkb_wave))
    devs.append(VSource("vd", "d", GROUND, d_wave))
    devs.extend(extra)
    return Netlist(f"{cell.kind.value}_tb", devs, cell.netlist.models)


def canonical_testbench(kind: CellKind | str, d_pattern, n_cycles: int, vdd: float = 0.8,
                        sizing: Sizing | None = None) -> Netlist:
    """Latch at 2 GHz: CLK high (transparent) for the first half of each period.

    Bit i of the (cyclically repeated) pattern is applied 100 ps after the
    i-th rising clock edge, so it is latched at the falling edge of the same
    cycle.
    """
    if n_cycles < 2:
        raise ValueError("n_cycles must be >= 2")
    cell = build_cell(kind, sizing)
    if cell.kind not in LATCHES:
        raise ValueError(f"{cell.kind.value} is not a latch")
    bits = [int(d_pattern[i % len(d_pattern)]) for i in range(n_cycles)]
    return testbench(cell, bit_pwl(bits, vdd), vdd)
