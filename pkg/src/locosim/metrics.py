"""Latch figures of merit: power, delays, setup/hold, PDP, critical charge and spread statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cells import CLOCK_PERIOD, EDGE, Cell, CellKind, Sizing, bit_pwl, build_cell, edges_pwl, testbench
from .engine import SimConfig, Trace, transient
from .fault import Classification, hold_strike_time, run_injection
from .netlist import DC, Netlist

logger = logging.getLogger(__name__)

QCRIT_MAX = 100e-15
QCRIT_RESOLUTION = 0.05e-15
TIMING_RESOLUTION = 0.05e-12


@dataclass(frozen=True)
class ExceedsBound:
    """Search found no failing point up to ``limit``."""

    limit: float

    def __str__(self):
        return f"> {self.limit:g}"


@dataclass
class LatchMetrics:
    latch: str
    power: float
    t_dq: float
    t_cq: float
    t_setup: float | ExceedsBound
    t_hold: float | ExceedsBound
    q_crit: float | ExceedsBound | None
    transistor_count: int

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError("power must be positive")

    @property
    def t_avg(self) -> float:
        return 0.5 * (self.t_dq + self.t_cq)

    @property
    def pdp(self) -> float:
        return pdp(self.power, self.t_avg)

    def as_dict(self) -> dict:
        def ps(x):
            return f"> {x.limit * 1e12:g}" if isinstance(x, ExceedsBound) else x * 1e12

        if self.q_crit is None:
            qc = None
        elif isinstance(self.q_crit, ExceedsBound):
            qc = f"> {self.q_crit.limit * 1e15:g}"
        else:
            qc = self.q_crit * 1e15
        return {
            "latch": self.latch,
            "power_uW": self.power * 1e6,
            "t_setup_ps": ps(self.t_setup),
            "t_hold_ps": ps(self.t_hold),
            "t_dq_ps": self.t_dq * 1e12,
            "t_cq_ps": self.t_cq * 1e12,
            "t_avg_ps": self.t_avg * 1e12,
            "pdp_e18J": self.pdp * 1e18,
            "q_crit_fC": qc,
            "n_trans": self.transistor_count,
        }


# -- arithmetic -------------------------------------------------------------------


def pdp(power: float, t_avg: float) -> float:
    """Power-delay product in joules."""
    return power * t_avg


def relative_delta(proposed: float, compared: float) -> float:
    """Relative change of ``proposed`` with respect to ``compared``."""
    if compared == 0:
        raise ZeroDivisionError("compared value is zero")
    return (proposed - compared) / compared


def _samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty sample list")
    return x


def stddev(samples) -> float:
    """Population standard deviation (divides by N)."""
    x = _samples(samples)
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))


def avg_dev(samples) -> float:
    """Mean absolute deviation from the sample mean."""
    x = _samples(samples)
    return float(np.mean(np.abs(x - x.mean())))


def integrate_abs(times, current, t0: float, t1: float) -> float:
    """Trapezoidal integral of |current| over [t0, t1]; the window ends are interpolated."""
    times = np.asarray(times, dtype=float)
    current = np.asarray(current, dtype=float)
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    if t0 < times[0] or t1 > times[-1]:
        raise ValueError(f"window [{t0}, {t1}] outside trace [{times[0]}, {times[-1]}]")
    inside = (times > t0) & (times < t1)
    t = np.concatenate(([t0], times[inside], [t1]))
    i = np.concatenate(([np.interp(t0, times, current)], current[inside], [np.interp(t1, times, current)]))
    # split segments that change sign so |i| is integrated exactly for piecewise-linear data
    tt, ii = [t[0]], [i[0]]
    for k in range(1, len(t)):
        if i[k - 1] * i[k] < 0:
            tz = t[k - 1] + (t[k] - t[k - 1]) * i[k - 1] / (i[k - 1] - i[k])
            tt.append(tz)
            ii.append(0.0)
        tt.append(t[k])
        ii.append(i[k])
    return float(np.trapezoid(np.abs(ii), tt))


def avg_current(trace: Trace, t0: float = 50e-12, t1: float = 250e-12, source: str = "vvdd") -> float:
    """Time-averaged absolute supply current over [t0, t1]."""
    return integrate_abs(trace.times, trace.supply_currents[source], t0, t1) / (t1 - t0)


def crossings(times, values, level: float) -> np.ndarray:
    """Linearly interpolated times where ``values`` crosses ``level``."""
    times = np.asarray(times)
    d = np.asarray(values) - level
    s = np.sign(d)
    idx = np.nonzero(s[:-1] * s[1:] < 0)[0]
    frac = d[idx] / (d[idx] - d[idx + 1])
    out = list(times[idx] + frac * (times[idx + 1] - times[idx]))
    # samples landing exactly on the level, approached from the other side
    for k in np.nonzero(s == 0)[0]:
        if 0 < k < len(d) - 1 and s[k - 1] * s[k + 1] < 0:
            out.append(times[k])
    return np.array(sorted(out))


def measure_delay(trace: Trace, from_signal: str, from_edge_t: float, to_signal: str, vdd: float | None = None,
                  window: float = 10e-12) -> float:
    """Delay between the 50%-of-vdd crossings of two signals.

    The first crossing of ``from_signal`` at or after ``from_edge_t - window``
    starts the measurement; the next crossing of ``to_signal`` ends it.
    """
    if vdd is None:
        vdd = float(np.max(trace.v("vdd"))) if "vdd" in trace.node_names else 0.8
    level = vdd / 2
    xf = crossings(trace.times, trace.v(from_signal), level)
    xf = xf[xf >= from_edge_t - window]
    if len(xf) == 0:
        raise ValueError(f"no crossing of {from_signal} after {from_edge_t:.4g}s")
    xt = crossings(trace.times, trace.v(to_signal), level)
    xt = xt[xt >= xf[0] - 1e-18]
    if len(xt) == 0:
        raise ValueError(f"no crossing of {to_signal} after {xf[0]:.4g}s")
    return float(xt[0] - xf[0])


# -- latch characterisation ------------------------------------------------------


def _cell(latch, sizing=None) -> Cell:
    cell = build_cell(latch, sizing)
    if cell.kind not in (CellKind.LOCO, CellKind.STANDARD_LATCH):
        raise ValueError(f"{cell.kind.value} is not a latch")
    return cell


def with_models(netlist: Netlist, models: dict | None) -> Netlist:
    """Override model cards (e.g. per-sample thresholds) on a netlist."""
    if not models:
        return netlist
    return Netlist(netlist.name, netlist.devices, {**netlist.models, **models})


def power_testbench(latch, vdd: float = 0.8, toggle: bool = True, sizing: Sizing | None = None):
    """10 cycles at 2 GHz with D toggling every 2 cycles (or a quiet circuit when ``toggle`` is False)."""
    cell = _cell(latch, sizing)
    if toggle:
        return testbench(cell, bit_pwl([0, 0, 1, 1] * 3, vdd), vdd)
    return testbench(cell, DC(0.0), vdd, DC(vdd), DC(0.0))


def measure_power(latch, config: SimConfig | None = None, toggle: bool = True, sizing: Sizing | None = None,
                  models: dict | None = None) -> float:
    """Average power from the VDD source over cycles 3-10 of a 10-cycle run."""
    config = config or SimConfig()
    vdd = config.env.vdd
    tb = with_models(power_testbench(latch, vdd, toggle, sizing), models)
    t0, t1 = 2 * CLOCK_PERIOD, 10 * CLOCK_PERIOD
    trace = transient(tb, config.with_(t_stop=t1, fine_windows=()), report_nodes=["q"])
    charge = np.trapezoid(trace.supply_currents["vvdd"][trace.times >= t0 - 1e-18],
                          trace.times[trace.times >= t0 - 1e-18])
    return float(vdd * charge / (t1 - t0))


def clock_edge(k: int, rising: bool, period: float = CLOCK_PERIOD, edge: float = EDGE) -> float:
    """50% point of the k-th rising (at k*T) or falling (at k*T + T/2) clock edge."""
    return k * period + (0.0 if rising else period / 2) + edge / 2


def delay_testbench(latch, vdd: float = 0.8, sizing: Sizing | None = None):
    """D edges for T_DQ (transparent) then T_CQ (D changed during hold, released by CLK)."""
    cell = _cell(latch, sizing)
    d_edges = [600e-12, 1100e-12, 1350e-12, 1850e-12]
    return testbench(cell, edges_pwl(0, d_edges, vdd), vdd), d_edges


def measure_delays(latch, config: SimConfig | None = None, sizing: Sizing | None = None,
                   models: dict | None = None) -> tuple[float, float]:
    """(T_DQ, T_CQ), each the mean of the rising and falling output transitions."""
    config = config or SimConfig()
    vdd = config.env.vdd
    tb, d_edges = delay_testbench(latch, vdd, sizing)
    tb = with_models(tb, models)
    trace = transient(tb, config.with_(t_stop=2300e-12, fine_windows=()), report_nodes=["d", "q", "clk"])
    t_dq = [measure_delay(trace, "d", t, "q", vdd) for t in d_edges[:2]]
    t_cq = [measure_delay(trace, "clk", clock_edge(k, True), "q", vdd) for k in (3, 4)]
    return float(np.mean(t_dq)), float(np.mean(t_cq))


@dataclass
class Bracket:
    """Bisection result: ``passing`` and ``failing`` probe offsets certified by simulation."""

    passing: float
    failing: float
    value: float | ExceedsBound
    probes: list = field(default_factory=list)


def _latched_ok(cell: Cell, config: SimConfig, d_wave, expected: int) -> bool:
    vdd = config.env.vdd
    t_read = 2 * CLOCK_PERIOD - 5e-12
    tb = testbench(cell, d_wave, vdd)
    trace = transient(tb, config.with_(t_stop=t_read + 1e-12, fine_windows=()), report_nodes=["q"])
    return int(trace.value_at("q", t_read) > vdd / 2) == expected


def _bisect(probe, t_pass: float, t_fail: float, resolution: float) -> Bracket:
    """Bisect between a passing and a failing offset; both ends are re-simulated at the end."""
    probes = []

    def run(x):
        ok = probe(x)
        probes.append((x, ok))
        return ok

    if not run(t_pass):
        raise RuntimeError(f"expected a pass at {t_pass:g}")
    if run(t_fail):
        return Bracket(t_pass, t_fail, ExceedsBound(abs(t_fail)), probes)
    while abs(t_pass - t_fail) > resolution:
        mid = 0.5 * (t_pass + t_fail)
        if run(mid):
            t_pass = mid
        else:
            t_fail = mid
    if not run(t_pass) or run(t_fail):
        raise RuntimeError("bisection endpoints not reproducible")
    return Bracket(t_pass, t_fail, t_pass, probes)


def setup_bracket(latch, config: SimConfig | None = None, new: int = 1, sizing: Sizing | None = None,
                  resolution: float = TIMING_RESOLUTION) -> Bracket:
    """Minimum time D must settle before the latching (falling) CLK edge.

    The probe offset ``s`` puts the D transition at ``edge - s``; the value
    read at the end of the following hold phase must equal the new D value.
    """
    config = config or SimConfig()
    cell = _cell(latch, sizing)
    edge = clock_edge(1, rising=False)
    vdd = config.env.vdd

    def probe(s):
        return _latched_ok(cell, config, edges_pwl(1 - new, [edge - s], vdd), new)

    return _bisect(probe, CLOCK_PERIOD / 2 - 2 * EDGE, -50e-12, resolution)


def hold_bracket(latch, config: SimConfig | None = None, new: int = 1, sizing: Sizing | None = None,
                 resolution: float = TIMING_RESOLUTION) -> Bracket:
    """Minimum time D must stay stable after the latching CLK edge (may be negative)."""
    config = config or SimConfig()
    cell = _cell(latch, sizing)
    edge = clock_edge(1, rising=False)
    vdd = config.env.vdd

    def probe(h):
        return _latched_ok(cell, config, edges_pwl(1 - new, [600e-12, edge + h], vdd), new)

    return _bisect(probe, 50e-12, -50e-12, resolution)


def _worst(brackets) -> float | ExceedsBound:
    vals = [b.value for b in brackets]
    finite = [v for v in vals if not isinstance(v, ExceedsBound)]
    return max(finite) if finite else vals[0]


def find_setup_time(latch, config: SimConfig | None = None, sizing: Sizing | None = None) -> float | ExceedsBound:
    """Setup time, worst of the rising and falling D transitions."""
    return _worst([setup_bracket(latch, config, new, sizing) for new in (1, 0)])


def find_hold_time(latch, config: SimConfig | None = None, sizing: Sizing | None = None) -> float | ExceedsBound:
    """Hold time, worst of the two D polarities; negative values are legal."""
    return _worst([hold_bracket(latch, config, new, sizing) for new in (1, 0)])


# -- critical charge ----------------------------------------------------------------


@dataclass
class QcritSearch:
    node: str
    stored: int
    q_crit: float | ExceedsBound
    recovered_q: float | None = None
    probes: list = field(default_factory=list)
    unresolved: list = field(default_factory=list)


def qcrit_search(latch, node: str, stored: int, config: SimConfig | None = None, q_max: float = QCRIT_MAX,
                 resolution: float = QCRIT_RESOLUTION, sizing: Sizing | None = None) -> QcritSearch:
    """Bisect the injected charge between 0 and ``q_max`` for one node and stored value.

    Unresolved outcomes count as upsets.  The final bracket is re-simulated
    so the reported lower end is Recovered and the upper end upsets.
    """
    config = config or SimConfig()
    cell = _cell(latch, sizing)
    t = hold_strike_time()
    res = QcritSearch(node, stored, ExceedsBound(q_max))

    def upsets(q):
        out = run_injection(cell, stored, node, t, q, config)
        res.probes.append((q, out.classification.value))
        if out.classification is Classification.UNRESOLVED:
            logger.warning("unresolved probe: %s stored=%d q=%.4g fC", node, stored, q * 1e15)
            res.unresolved.append(q)
        return out.classification is not Classification.RECOVERED

    if q_max <= 0 or not upsets(q_max):
        return res
    lo, hi = 0.0, q_max
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if upsets(mid):
            hi = mid
        else:
            lo = mid
    if upsets(lo) or not upsets(hi):
        raise RuntimeError(f"Qcrit bracket [{lo:g}, {hi:g}] not reproducible for {node}")
    res.q_crit, res.recovered_q = hi, lo
    return res


def find_qcrit(latch, node: str, stored: int, config: SimConfig | None = None,
               q_max: float = QCRIT_MAX) -> float | ExceedsBound:
    """Smallest upsetting charge at one node, or ExceedsBound(q_max)."""
    return qcrit_search(latch, node, stored, config, q_max).q_crit


def latch_qcrit(latch, config: SimConfig | None = None, q_max: float = QCRIT_MAX,
                sizing: Sizing | None = None) -> tuple[float | ExceedsBound, list]:
    """Latch-level critical charge: minimum over every state node and both stored values."""
    cell = _cell(latch, sizing)
    searches = [qcrit_search(latch, n, s, config, q_max, sizing=sizing)
                for n in cell.state_nodes for s in (0, 1)]
    finite = [r.q_crit for r in searches if not isinstance(r.q_crit, ExceedsBound)]
    return (min(finite) if finite else ExceedsBound(q_max)), searches


def measure_latch(latch, config: SimConfig | None = None, with_qcrit: bool = True,
                  sizing: Sizing | None = None) -> LatchMetrics:
    """All figures of merit for one latch under one condition."""
    config = config or SimConfig()
    cell = _cell(latch, sizing)
    t_dq, t_cq = measure_delays(latch, config, sizing)
    q = latch_qcrit(latch, config, sizing=sizing)[0] if with_qcrit else None
    return LatchMetrics(
        latch=cell.kind.value,
        power=measure_power(latch, config, sizing=sizing),
        t_dq=t_dq,
        t_cq=t_cq,
        t_setup=find_setup_time(latch, config, sizing),
        t_hold=find_hold_time(latch, config, sizing),
        q_crit=q,
        transistor_count=cell.transistor_count,
    )
