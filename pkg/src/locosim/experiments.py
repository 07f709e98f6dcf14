"""Campaign orchestration: OSC truth table, functional checks, short-circuit current, PVT and Monte Carlo."""

from __future__ import annotations

import csv
import enum
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cells import CLOCK_PERIOD, EDGE, CellKind, bit_pwl, build_cell, osc_steady_outputs, testbench
from .devices import NMOS_DEFAULT, PMOS_DEFAULT, EnvCondition
from .engine import SimConfig, SimulationError, Trace, transient
from .metrics import avg_current, avg_dev, measure_delays, measure_power, stddev
from .netlist import DC, GROUND, PWL, VDD, DoubleExp, ISource, Netlist, VSource

logger = logging.getLogger(__name__)

BAND = 0.10
DRIFT_LIMIT = 40e-3


# -- OSC -----------------------------------------------------------------------


@dataclass
class OscCase:
    inputs: tuple
    prior: tuple  # inputs applied before the switch
    expected: tuple  # (o1, o2) logic values
    measured: tuple = ()  # (o1, o2) volts at the first readout
    drift: tuple = ()  # (o1, o2) change over the retention window
    passed: bool = False

    def as_dict(self) -> dict:
        return {
            "i1": self.inputs[0], "i2": self.inputs[1], "prior_i1": self.prior[0], "prior_i2": self.prior[1],
            "o1": self.expected[0], "o2": self.expected[1],
            "v_o1": self.measured[0], "v_o2": self.measured[1],
            "drift_o1_mV": self.drift[0] * 1e3, "drift_o2_mV": self.drift[1] * 1e3, "pass": self.passed,
        }


# (inputs, prior inputs) covering every row; the retention rows are entered from both prior output values
OSC_CASES = (
    ((0, 0), (1, 1)),
    ((1, 1), (0, 0)),
    ((0, 1), (0, 0)),  # O2 retains 1
    ((0, 1), (1, 1)),  # O2 retains 0
    ((1, 0), (0, 0)),  # O1 retains 1
    ((1, 0), (1, 1)),  # O1 retains 0
)


def _step(v0: float, v1: float, t: float, edge: float = EDGE) -> PWL:
    if v0 == v1:
        return PWL(((0.0, v0),))
    return PWL(((0.0, v0), (t - edge / 2, v0), (t + edge / 2, v1)))


def osc_testbench(inputs, prior, vdd: float = 0.8, t_switch: float = 300e-12, extra=()) -> Netlist:
    cell = build_cell(CellKind.OSC)
    devs = list(cell.netlist.devices) + [
        VSource("vvdd", VDD, GROUND, DC(vdd)),
        VSource("vi1", "i1", GROUND, _step(prior[0] * vdd, inputs[0] * vdd, t_switch)),
        VSource("vi2", "i2", GROUND, _step(prior[1] * vdd, inputs[1] * vdd, t_switch)),
    ]
    return Netlist("osc_tb", devs + list(extra), cell.netlist.models)


def osc_case(inputs, prior, config: SimConfig | None = None, t_switch: float = 300e-12,
             settle: float = 100e-12, hold: float = 1e-9) -> OscCase:
    """Simulate one input pair entered from ``prior`` and compare with the logic reference."""
    config = config or SimConfig()
    vdd = config.env.vdd
    prev = osc_steady_outputs(*prior, 0, 0)
    expected = osc_steady_outputs(inputs[0], inputs[1], prev[0], prev[1])
    t1 = t_switch + settle
    t2 = t1 + hold
    trace = transient(osc_testbench(inputs, prior, vdd, t_switch), config.with_(t_stop=t2, fine_windows=()))
    v1 = (trace.value_at("o1", t1), trace.value_at("o2", t1))
    v2 = (trace.value_at("o1", t2), trace.value_at("o2", t2))
    drift = (abs(v2[0] - v1[0]), abs(v2[1] - v1[1]))
    ok = all(abs(v - e * vdd) <= BAND * vdd for vs in (v1, v2) for v, e in zip(vs, expected))
    ok = ok and max(drift) < DRIFT_LIMIT
    return OscCase(tuple(inputs), tuple(prior), expected, v1, drift, ok)


def osc_truth_table(config: SimConfig | None = None) -> list[OscCase]:
    """All four input rows, the retaining rows from both prior output values."""
    return [osc_case(i, p, config) for i, p in OSC_CASES]


@dataclass
class RestorationResult:
    inputs: tuple
    node: str
    expected: int
    t_recover: float | None
    v_final: float

    @property
    def passed(self) -> bool:
        return self.t_recover is not None and self.t_recover <= 150e-12


def osc_restoration(inputs=(0, 0), node: str = "o2", q_inj: float = 2.5e-15, config: SimConfig | None = None,
                    t_strike: float = 200e-12, window: float = 300e-12) -> RestorationResult:
    """Strike an OSC output and measure when it returns within 40 mV of its driven rail."""
    config = config or SimConfig()
    vdd = config.env.vdd
    expected = osc_steady_outputs(*inputs, 0, 0)[0 if node == "o1" else 1]
    sign = -1 if expected else 1
    strike = ISource("isnu", GROUND, node, DoubleExp(q_inj, t_start=t_strike, sign=sign))
    tb = osc_testbench(inputs, inputs, vdd, extra=[strike])
    trace = transient(tb, config.with_(t_stop=t_strike + window, fine_windows=()))
    v = trace.v(node)
    after = trace.times >= t_strike
    bad = np.nonzero(after & (np.abs(v - expected * vdd) > DRIFT_LIMIT))[0]
    if len(bad) and bad[-1] == len(v) - 1:
        t_rec = None
    else:
        t_rec = 0.0 if len(bad) == 0 else float(trace.times[bad[-1] + 1] - t_strike)
    return RestorationResult(tuple(inputs), node, expected, t_rec, float(v[-1]))


# -- latch function ---------------------------------------------------------------


@dataclass
class HoldCheck:
    cycle: int
    expected: int
    q_min: float
    q_max: float
    passed: bool


def functional_check(latch, bits, config: SimConfig | None = None) -> list[HoldCheck]:
    """Q must equal the bit latched at each falling clock edge throughout the following hold phase."""
    config = config or SimConfig()
    vdd = config.env.vdd
    cell = build_cell(latch)
    bits = [int(b) for b in bits]
    n = len(bits)
    tb = testbench(cell, bit_pwl(bits, vdd), vdd)
    trace = transient(tb, config.with_(t_stop=n * CLOCK_PERIOD, fine_windows=()), report_nodes=["q"])
    q = trace.v("q")
    out = []
    for k, b in enumerate(bits):
        lo, hi = k * CLOCK_PERIOD + CLOCK_PERIOD / 2 + EDGE, (k + 1) * CLOCK_PERIOD
        sel = (trace.times >= lo) & (trace.times <= hi)
        qs = q[sel]
        ok = bool(np.all(np.abs(qs - b * vdd) <= BAND * vdd))
        out.append(HoldCheck(k, b, float(qs.min()), float(qs.max()), ok))
    return out


# -- short-circuit current ------------------------------------------------------


def short_circuit_testbench(latch, vdd: float = 0.8, edges=(80e-12, 170e-12), edge: float = EDGE) -> Netlist:
    """CLK pinned high (transparent), D switching with 50% crossings exactly at ``edges``."""
    cell = build_cell(latch)
    pts = [(0.0, 0.0)]
    level = 0
    for tc in edges:
        nxt = 1 - level
        pts += [(tc - edge / 2, level * vdd), (tc, 0.5 * vdd), (tc + edge / 2, nxt * vdd)]
        level = nxt
    return testbench(cell, PWL(tuple(pts)), vdd, DC(vdd), DC(0.0))


def short_circuit_trace(latch, config: SimConfig | None = None, switching: bool = True) -> Trace:
    config = config or SimConfig()
    vdd = config.env.vdd
    tb = short_circuit_testbench(latch, vdd, (80e-12, 170e-12) if switching else ())
    return transient(tb, config.with_(t_stop=300e-12, fine_windows=()), report_nodes=["d", "q"])


def short_circuit_protocol(latch, config: SimConfig | None = None, switching: bool = True) -> float:
    """Average absolute supply current over [50 ps, 250 ps] with D switching at 80 ps and 170 ps."""
    return avg_current(short_circuit_trace(latch, config, switching), 50e-12, 250e-12)


# -- PVT sweeps -----------------------------------------------------------------


class PvtAxis(enum.Enum):
    VTH = ("vth", 0.01, 0.08, 0.01)
    TEMP = ("temp", -40.0, 150.0, 10.0)
    VDD = ("vdd", 0.5, 1.0, 0.05)

    @property
    def label(self) -> str:
        return self.value[0]

    @classmethod
    def parse(cls, s: str) -> "PvtAxis":
        for a in cls:
            if a.label == s.lower():
                return a
        raise ValueError(f"unknown axis {s!r}")


def axis_points(start: float, stop: float, step: float) -> list[float]:
    """Inclusive grid start, start+step, ..., stop."""
    if not step > 0:
        raise ValueError("step must be positive")
    if start > stop:
        raise ValueError("start must not exceed stop")
    n = int(round((stop - start) / step)) + 1
    return [round(start + k * step, 12) for k in range(n)]


def condition_for(axis: PvtAxis, x: float) -> EnvCondition:
    if axis is PvtAxis.VTH:
        return EnvCondition(dvth=x)
    if axis is PvtAxis.TEMP:
        return EnvCondition(temperature=x)
    return EnvCondition(vdd=x)


@dataclass
class PvtPoint:
    value: float
    power: float | None
    t_avg: float | None
    error: str | None = None

    @property
    def valid(self) -> bool:
        return self.error is None


@dataclass
class PvtResult:
    latch: str
    axis: PvtAxis
    points: list

    def _valid(self, attr):
        return [getattr(p, attr) for p in self.points if p.valid]

    @property
    def sigma_power(self) -> float:
        return stddev(self._valid("power"))

    @property
    def sigma_delay(self) -> float:
        return stddev(self._valid("t_avg"))

    def summary(self) -> dict:
        return {
            "latch": self.latch, "axis": self.axis.label, "n_points": len(self.points),
            "n_invalid": sum(not p.valid for p in self.points),
            "sigma_power_uW": self.sigma_power * 1e6, "sigma_delay_ps": self.sigma_delay * 1e12,
        }

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([self.axis.label, "power_uW", "t_avg_ps", "error"])
        for p in self.points:
            w.writerow([repr(p.value), "" if p.power is None else f"{p.power * 1e6:.17g}",
                        "" if p.t_avg is None else f"{p.t_avg * 1e12:.17g}", p.error or ""])


def _measure_point(latch, config: SimConfig, models=None) -> tuple[float, float]:
    p = measure_power(latch, config, models=models)
    t_dq, t_cq = measure_delays(latch, config, models=models)
    return p, 0.5 * (t_dq + t_cq)


def _pvt_point(args):
    latch, axis, x, config = args
    try:
        p, d = _measure_point(latch, config.with_(env=condition_for(axis, x)))
        return PvtPoint(x, p, d)
    except (SimulationError, ValueError) as exc:
        logger.warning("pvt %s=%g failed: %s", axis.label, x, exc)
        return PvtPoint(x, None, None, str(exc))


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def pvt_sweep(latch, axis: PvtAxis | str, config: SimConfig | None = None, jobs: int = 1,
              points: list | None = None) -> PvtResult:
    """Power and average delay at every grid point of one axis, others nominal."""
    config = config or SimConfig()
    if isinstance(axis, str):
        axis = PvtAxis.parse(axis)
    xs = points if points is not None else axis_points(*axis.value[1:])
    kind = build_cell(latch).kind
    pts = _map(_pvt_point, [(kind, axis, x, config) for x in xs], jobs)
    return PvtResult(kind.value, axis, pts)


# -- Monte Carlo -----------------------------------------------------------------


@dataclass(frozen=True)
class McConfig:
    n_samples: int = 2000
    seed: int = 0
    vth_rel_sigma: float = 0.10 / 3
    vdd_rel_sigma: float = 0.20 / 3
    temp_sigma: float = 20.0
    temp_mean: float = 27.0
    vdd_nominal: float = 0.8

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if min(self.vth_rel_sigma, self.vdd_rel_sigma, self.temp_sigma) < 0:
            raise ValueError("sigmas must be non-negative")


@dataclass(frozen=True)
class McSample:
    i: int
    vth_n: float
    vth_p: float
    vdd: float
    temp: float
    power: float | None = None
    t_avg: float | None = None
    error: str | None = None


def draw_sample(mc: McConfig, i: int) -> McSample:
    """Sample ``i``'s conditions from its own RNG stream seeded by (seed, i)."""
    rng = np.random.default_rng([mc.seed, i])
    dn, dp, dv, dt = rng.standard_normal(4)
    vth_n = abs(NMOS_DEFAULT.vth0) * (1 + mc.vth_rel_sigma * dn)
    vth_p = abs(PMOS_DEFAULT.vth0) * (1 + mc.vth_rel_sigma * dp)
    vdd = mc.vdd_nominal * (1 + mc.vdd_rel_sigma * dv)
    temp = float(np.clip(mc.temp_mean + mc.temp_sigma * dt, -55.0, 175.0))
    return McSample(i, float(vth_n), float(vth_p), float(vdd), temp)


def _mc_point(args):
    latch, mc, i, config = args
    s = draw_sample(mc, i)
    models = {"nmos": replace(NMOS_DEFAULT, vth0=s.vth_n), "pmos": replace(PMOS_DEFAULT, vth0=-s.vth_p)}
    try:
        p, d = _measure_point(latch, config.with_(env=EnvCondition(s.temp, s.vdd)), models)
        return replace(s, power=p, t_avg=d)
    except (SimulationError, ValueError) as exc:
        return replace(s, error=str(exc))


@dataclass
class McResult:
    latch: str
    mc: McConfig
    samples: list
    config: SimConfig = field(default_factory=SimConfig)

    @property
    def ok(self) -> list:
        return [s for s in self.samples if s.error is None]

    def summary(self) -> dict:
        ok = self.ok
        out = {"latch": self.latch, "n_samples": len(self.samples), "n_excluded": len(self.samples) - len(ok),
               "mc": asdict(self.mc), "config": self.config.as_dict()}
        if ok:
            pw = [s.power * 1e6 for s in ok]
            dl = [s.t_avg * 1e12 for s in ok]
            out.update(sigma_power_uW=stddev(pw), ad_power_uW=avg_dev(pw),
                       sigma_delay_ps=stddev(dl), ad_delay_ps=avg_dev(dl))
        return out

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "vth_n", "vth_p", "vdd", "temp", "power_uW", "t_avg_ps"])
        for s in self.samples:
            vals = [s.vth_n, s.vth_p, s.vdd, s.temp]
            meas = ["", ""] if s.error else [f"{s.power * 1e6:.17g}", f"{s.t_avg * 1e12:.17g}"]
            w.writerow([s.i] + [f"{v:.17g}" for v in vals] + meas)

    def write_summary(self, fh) -> None:
        json.dump(self.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def monte_carlo(latch, mc: McConfig | None = None, config: SimConfig | None = None, jobs: int = 1) -> McResult:
    """Independent random conditions per sample; results depend only on (seed, i), not on ``jobs``."""
    mc = mc or McConfig()
    config = config or SimConfig()
    kind = build_cell(latch).kind
    samples = _map(_mc_point, [(kind, mc, i, config) for i in range(mc.n_samples)], jobs)
    res = McResult(kind.value, mc, samples, config)
    if res.summary()["n_excluded"]:
        logger.warning("%d Monte Carlo samples failed and were excluded", res.summary()["n_excluded"])
    return res
