"""Single-node-upset injection, upset classification and injection campaigns."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .cells import CLOCK_PERIOD, EDGE, Cell, CellKind, bit_pwl, build_cell, clock_sources, testbench
from .engine import SimConfig, SimulationError, Trace, transient
from .netlist import GROUND, DoubleExp, ISource

logger = logging.getLogger(__name__)

TAU1 = 0.1e-12
TAU2 = 3e-12
RECOVERY_BAND = 0.10  # fraction of vdd
SETTLED_SLOPE = 1e-3 / 1e-12  # 1 mV/ps
READOUT_DELAY = 150e-12

# Default LOCO strike times, two per state node (four on N0).
DEFAULT_SCHEDULE = (
    ("n0", 0.50e-9), ("n0", 0.60e-9), ("n0", 1.00e-9), ("n0", 1.10e-9),
    ("n1", 1.50e-9), ("n1", 1.60e-9),
    ("n2", 4.50e-9), ("n2", 4.60e-9),
    ("n3", 2.50e-9), ("n3", 2.60e-9),
    ("n4", 2.00e-9), ("n4", 2.10e-9),
    ("n5", 3.00e-9), ("n5", 3.10e-9),
    ("q", 3.53e-9), ("q", 3.65e-9),
)


class Classification(enum.Enum):
    RECOVERED = "Recovered"
    UPSET = "Upset"
    UNRESOLVED = "Unresolved"


@dataclass(frozen=True)
class Injection:
    node: str
    t_start: float
    q_inj: float
    tau1: float = TAU1
    tau2: float = TAU2
    polarity: int | str = "auto"

    def __post_init__(self):
        if self.q_inj < 0:
            raise ValueError("q_inj must be non-negative")
        if self.polarity not in ("auto", 1, -1):
            raise ValueError("polarity must be 'auto', +1 or -1")


@dataclass
class InjectionOutcome:
    injection: Injection
    classification: Classification
    v_excursion: float
    t_recover: float | None
    stored: int | None = None
    sign: int = 0
    readouts: tuple = ()
    clock_phase: float = 0.0
    # state nodes accepted on the correct logic side but outside the rail band
    degraded_nodes: tuple = ()

    def __post_init__(self):
        if self.classification is Classification.RECOVERED and self.t_recover is None:
            raise ValueError("a recovered outcome needs t_recover")

    def as_dict(self) -> dict:
        return {
            "node": self.injection.node,
            "t_start_ns": self.injection.t_start * 1e9,
            "stored": self.stored,
            "sign": self.sign,
            "classification": self.classification.value,
            "v_excursion_mV": self.v_excursion * 1e3,
            "t_recover_ps": None if self.t_recover is None else self.t_recover * 1e12,
            "readouts_ns": [t * 1e9 for t in self.readouts],
            "clock_phase_ps": self.clock_phase * 1e12,
            "degraded_nodes": list(self.degraded_nodes),
        }


def make_injection(node: str, t_start: float, q_inj: float, trace_context: Trace | None = None,
                   vdd: float = 0.8, polarity: int | str = "auto", tau1: float = TAU1, tau2: float = TAU2,
                   name: str = "isnu") -> ISource:
    """Current source striking ``node`` with a double-exponential pulse.

    With ``polarity="auto"`` the pulse opposes the node's value in
    ``trace_context`` just before the strike: a high node is pulled down and
    a low node pulled up.  Positive source values flow into the node.
    """
    node = node.lower()
    if polarity == "auto":
        if trace_context is None:
            raise ValueError("automatic polarity needs a reference trace")
        if node not in trace_context.node_names:
            raise KeyError(f"unknown node {node!r}")
        if not trace_context.times[0] <= t_start <= trace_context.times[-1]:
            raise ValueError("t_start outside the reference trace")
        v = trace_context.value_at(node, t_start)
        sign = -1 if v > vdd / 2 else 1
    else:
        sign = int(polarity)
        if trace_context is not None and node not in trace_context.node_names:
            raise KeyError(f"unknown node {node!r}")
    return ISource(name, GROUND, node, DoubleExp(q_inj, tau1, tau2, t_start, sign))


def _slope(trace: Trace, node: str, t: float, window: float = 1e-12) -> float:
    lo = max(trace.times[0], t - window)
    return (trace.value_at(node, t) - trace.value_at(node, lo)) / (t - lo)


def _node_ok(v: float, expected: int, vdd: float, band: float) -> bool:
    return abs(v - expected * vdd) <= band


def _correct_side(v: float, expected: int, vdd: float) -> bool:
    return v > vdd / 2 if expected else v < vdd / 2


def classify(trace: Trace, injection: Injection, expected_state: dict, readout_t, vdd: float = 0.8,
             output_node: str = "q", band_fraction: float = RECOVERY_BAND) -> InjectionOutcome:
    """Classify the latch state after a strike at one or more readout times.

    Recovered: at every readout the output node is within the band of its
    expected rail and every other state node is either within the band or
    settled on the correct side of vdd/2 (a level restored through a single
    pass transistor sits one threshold away from the rail).  Upset: the
    output sits in the band of the complementary rail and all state nodes are
    settled.  Anything else is Unresolved.
    """
    readouts = tuple(np.atleast_1d(readout_t).tolist())
    band = band_fraction * vdd
    for t in readouts:
        if t <= injection.t_start:
            raise ValueError("readout must follow the injection")
        if t > trace.times[-1] + 1e-18:
            raise ValueError(f"trace ends at {trace.times[-1]:.4g}s, before readout {t:.4g}s")
    node = injection.node.lower()
    after = (trace.times >= injection.t_start) & (trace.times <= max(readouts))
    v_pre = trace.value_at(node, injection.t_start)
    excursion = float(np.max(np.abs(trace.v(node)[after] - v_pre))) if after.any() else 0.0

    recovered = True
    upset = True
    degraded = set()
    for t in readouts:
        state = {n: trace.value_at(n, t) for n in expected_state}
        settled = {n: abs(_slope(trace, n, t)) < SETTLED_SLOPE for n in expected_state}
        for n, exp in expected_state.items():
            v = state[n]
            if _node_ok(v, exp, vdd, band):
                continue
            if n != output_node and settled[n] and _correct_side(v, exp, vdd):
                degraded.add(n)
                continue
            recovered = False
        out_exp = expected_state.get(output_node)
        if out_exp is None or not _node_ok(state[output_node], 1 - out_exp, vdd, band) or not all(settled.values()):
            upset = False

    t_recover = None
    if recovered:
        exp = expected_state.get(node)
        if exp is None:
            t_recover = 0.0
        else:
            v = trace.v(node)
            ok = np.abs(v - exp * vdd) <= band
            if node in degraded:
                ok = v > vdd / 2 if exp else v < vdd / 2
            bad = np.nonzero(after & ~ok)[0]
            t_recover = 0.0 if len(bad) == 0 else float(trace.times[bad[-1] + 1] - injection.t_start)
        cls = Classification.RECOVERED
    elif upset:
        cls = Classification.UPSET
    else:
        cls = Classification.UNRESOLVED
    return InjectionOutcome(injection, cls, excursion, t_recover, readouts=readouts, degraded_nodes=tuple(sorted(degraded)))


# -- campaigns ------------------------------------------------------------------


@dataclass(frozen=True)
class CampaignSpec:
    latch: CellKind
    nodes: tuple = ()
    stored_values: tuple = (0, 1)
    q_inj: float = 2.5e-15
    schedule: str | tuple = "default"  # "default", "hold" or a tuple of (node, t_start)
    mode: str = "hold"  # "hold" or "transparent", used by the "hold" schedule builder

    def __post_init__(self):
        if isinstance(self.latch, str):
            object.__setattr__(self, "latch", CellKind.parse(self.latch))
        cell = build_cell(self.latch)
        nodes = tuple(n.lower() for n in self.nodes) or cell.state_nodes
        object.__setattr__(self, "nodes", nodes)
        known = cell.netlist.nodes
        for n in nodes:
            if n not in known:
                raise ValueError(f"node {n!r} not in {self.latch.value}")
        if not isinstance(self.schedule, str):
            for n, _ in self.schedule:
                if n.lower() not in known:
                    raise ValueError(f"node {n!r} not in {self.latch.value}")
        for s in self.stored_values:
            if s not in (0, 1):
                raise ValueError("stored values must be bits")


def hold_windows(phase: float, t_stop: float, period: float = CLOCK_PERIOD, edge: float = EDGE):
    """(start, end) of every hold phase: from the end of the falling clock ramp to the start of the rising one."""
    out = []
    k = 0
    while True:
        fall = phase + period / 2 + k * period
        if fall > t_stop:
            break
        out.append((fall + edge, fall + period / 2))
        k += 1
    return out


def align_clock(t_start: float, after_fall: float = 50e-12, period: float = CLOCK_PERIOD) -> float:
    """Clock phase shift (in [0, T)) putting ``t_start`` ``after_fall`` past the start of a falling edge."""
    fs = round(((t_start - after_fall - period / 2) % period) * 1e15)
    return (fs % round(period * 1e15)) * 1e-15


def _readouts(t_start: float, windows, mode: str) -> tuple:
    if mode == "hold":
        for a, b in windows:
            if a <= t_start < b:
                end = b - 1e-12
                first = t_start + READOUT_DELAY
                return (first, end) if first < end else (end,)
    return (t_start + READOUT_DELAY,)


@dataclass
class CampaignResult:
    spec: CampaignSpec
    outcomes: list
    config: SimConfig

    @property
    def all_recovered(self) -> bool:
        return all(o.classification is Classification.RECOVERED for o in self.outcomes)

    def counts(self) -> dict:
        out = {c.value: 0 for c in Classification}
        for o in self.outcomes:
            out[o.classification.value] += 1
        return out

    def as_dict(self) -> dict:
        sched = self.spec.schedule if isinstance(self.spec.schedule, str) else [list(x) for x in self.spec.schedule]
        return {
            "latch": self.spec.latch.value,
            "q_inj_fC": self.spec.q_inj * 1e15,
            "schedule": sched,
            "counts": self.counts(),
            "config": self.config.as_dict(),
            "outcomes": [o.as_dict() for o in self.outcomes],
        }


def hold_strike_time(phase: float = 0.0, cycle: int = 1, after_fall: float = 50e-12) -> float:
    """A strike time ``after_fall`` into the hold phase of clock cycle ``cycle``."""
    return phase + cycle * CLOCK_PERIOD + CLOCK_PERIOD / 2 + after_fall


def _schedule(spec: CampaignSpec):
    """List of (node, t_start, clock phase)."""
    if spec.schedule == "default":
        if spec.latch is CellKind.LOCO:
            sched = [(n, t) for n, t in DEFAULT_SCHEDULE if n in spec.nodes]
        else:
            # the first two default strike times, applied to each of this latch's nodes
            sched = [(n, t) for n in spec.nodes for _, t in DEFAULT_SCHEDULE[:2]]
    elif spec.schedule == "hold":
        t = hold_strike_time() if spec.mode == "hold" else CLOCK_PERIOD + 150e-12
        return [(n, t, 0.0) for n in spec.nodes]
    else:
        sched = [(n.lower(), float(t)) for n, t in spec.schedule]
    if spec.mode != "hold":
        return [(n, t, 0.0) for n, t in sched]
    return [(n, t, align_clock(t)) for n, t in sched]


def strike_run(cell: Cell, stored: int, injection: Injection | None, config: SimConfig, phase: float,
               t_stop: float) -> Trace:
    """Simulate the latch holding ``stored`` (D constant) with at most one strike."""
    vdd = config.env.vdd
    clk, clkb = clock_sources(vdd, phase=phase)
    n_bits = int(t_stop / CLOCK_PERIOD) + 2
    tb = testbench(cell, bit_pwl([stored] * n_bits, vdd), vdd, clk, clkb)
    if injection is not None:
        sign = injection.polarity
        tb = tb.with_devices(ISource("isnu", GROUND, injection.node, DoubleExp(
            injection.q_inj, injection.tau1, injection.tau2, injection.t_start, sign)))
    return transient(tb, config.with_(t_stop=t_stop, fine_windows=()))


def run_injection(cell: Cell, stored: int, node: str, t_start: float, q_inj: float, config: SimConfig,
                  phase: float = 0.0, mode: str = "hold", reference: Trace | None = None) -> InjectionOutcome:
    """One strike in a fresh simulation, classified against the stored state."""
    vdd = config.env.vdd
    windows = hold_windows(phase, t_start + CLOCK_PERIOD)
    readouts = _readouts(t_start, windows, mode)
    t_stop = max(readouts) + 2e-12
    if reference is None or reference.times[-1] < t_start:
        reference = strike_run(cell, stored, None, config, phase, t_start + 1e-12)
    ctx_src = make_injection(node, t_start, q_inj, reference, vdd)
    inj = Injection(node, t_start, q_inj, polarity=ctx_src.waveform.sign)
    try:
        trace = strike_run(cell, stored, inj, config, phase, t_stop)
    except SimulationError as exc:
        raise SimulationError(f"injection at {node} t={t_start:.4g}s stored={stored}: {exc}") from exc
    out = classify(trace, inj, cell.expected_state(stored), readouts, vdd, output_node=cell.ports["Q"])
    out.stored = stored
    out.sign = inj.polarity
    out.clock_phase = phase
    return out


def run_campaign(spec: CampaignSpec, config: SimConfig | None = None) -> CampaignResult:
    """Run every scheduled strike, one per fresh simulation, for each stored value."""
    config = config or SimConfig()
    cell = build_cell(spec.latch)
    outcomes = []
    references = {}
    for stored in spec.stored_values:
        for node, t, phase in _schedule(spec):
            ref = references.get((stored, phase))
            if ref is None or ref.times[-1] < t:
                ref = references[(stored, phase)] = strike_run(cell, stored, None, config, phase, t + 1e-12)
            out = run_injection(cell, stored, node, t, spec.q_inj, config, phase, spec.mode, ref)
            logger.info("%s stored=%d %s@%.3gns -> %s", spec.latch.value, stored, node, t * 1e9,
                        out.classification.value)
            outcomes.append(out)
    return CampaignResult(spec, outcomes, config)
