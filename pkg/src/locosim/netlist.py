"""Flat transistor-level netlists: data model, text parser, checks and writer.

The text format is a small SPICE subset, one card per line::

    * comment
    .title <name>
    Mname <drain> <gate> <source> <NMOS|PMOS|model> W/L=<ratio>
    Cname <n1> <n2> <value>
    Vname <n+> <n-> DC <v> | PULSE(v1 v2 td tr tf pw per) | PWL(t1 v1 t2 v2 ...)
    Iname <n+> <n-> SNU(q_inj tau1 tau2 t_start sign)
    .model <name> <NMOS|PMOS> VTH=<v> KP=<a_per_v2> LAMBDA=<per_v> CG=<farads>
    .end

Keywords and node names are case-insensitive and stored lower-case.  Values
are SI, with the engineering suffixes f, p, n, u, m, k and meg accepted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Union

from .devices import MosfetParams, default_params

GROUND = "0"
VDD = "vdd"


class NetlistError(ValueError):
    """Raised for malformed netlist text or invalid netlist content."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"{message}, line {line}"
        super().__init__(message)


# -- waveforms ---------------------------------------------------------------


@dataclass(frozen=True)
class DC:
    v: float


@dataclass(frozen=True)
class Pulse:
    v1: float
    v2: float
    t_delay: float
    t_rise: float
    t_fall: float
    t_width: float
    period: float

    def __post_init__(self):
        if self.t_rise <= 0 or self.t_fall <= 0:
            raise NetlistError("pulse rise/fall times must be positive")
        if self.period <= self.t_rise + self.t_width + self.t_fall:
            raise NetlistError("pulse period must exceed rise + width + fall")
        if self.t_width < 0 or self.t_delay < 0:
            raise NetlistError("pulse delay and width must be non-negative")


@dataclass(frozen=True)
class PWL:
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(t), float(v)) for t, v in self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise NetlistError("PWL needs at least one point")
        for (t0, _), (t1, _) in zip(pts, pts[1:]):
            if t1 <= t0:
                raise NetlistError("PWL times must be strictly increasing")


@dataclass(frozen=True)
class DoubleExp:
    """Double-exponential charge-collection current pulse."""

    q_inj: float
    tau1: float = 0.1e-12
    tau2: float = 3e-12
    t_start: float = 0.0
    sign: int = 1

    def __post_init__(self):
        if self.q_inj < 0:
            raise NetlistError("q_inj must be non-negative")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise NetlistError("tau1 and tau2 must be positive")
        if self.tau1 == self.tau2:
            raise NetlistError("tau1 and tau2 must differ")
        if self.sign not in (1, -1):
            raise NetlistError("sign must be +1 or -1")


Waveform = Union[DC, Pulse, PWL, DoubleExp]


# -- devices -----------------------------------------------------------------


@dataclass(frozen=True)
class Mosfet:
    name: str
    drain: str
    gate: str
    source: str
    polarity: str  # "N" or "P"
    w_over_l: float
    model: str

    def __post_init__(self):
        if not self.w_over_l > 0:
            raise NetlistError("w_over_l must be positive")
        if self.polarity not in ("N", "P"):
            raise NetlistError(f"bad polarity {self.polarity!r}")

    @property
    def terminals(self):
        return (self.drain, self.gate, self.source)


@dataclass(frozen=True)
class Capacitor:
    name: str
    n1: str
    n2: str
    value: float

    def __post_init__(self):
        if not self.value > 0:
            raise NetlistError("capacitor value must be positive")

    @property
    def terminals(self):
        return (self.n1, self.n2)


@dataclass(frozen=True)
class VSource:
    name: str
    n_plus: str
    n_minus: str
    waveform: Waveform

    @property
    def terminals(self):
        return (self.n_plus, self.n_minus)


@dataclass(frozen=True)
class ISource:
    """Current source; positive value flows from n_plus through the source to n_minus."""

    name: str
    n_plus: str
    n_minus: str
    waveform: Waveform

    @property
    def terminals(self):
        return (self.n_plus, self.n_minus)


Device = Union[Mosfet, Capacitor, VSource, ISource]


@dataclass(frozen=True)
class Netlist:
    name: str = "circuit"
    devices: tuple = ()
    models: Mapping[str, MosfetParams] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        object.__setattr__(self, "models", MappingProxyType(dict(self.models)))
        seen = set()
        for dev in self.devices:
            key = dev.name.lower()
            if key in seen:
                raise NetlistError(f"duplicate device name {dev.name!r}")
            seen.add(key)

    @property
    def nodes(self) -> frozenset[str]:
        out = {GROUND}
        for dev in self.devices:
            out.update(dev.terminals)
        return frozenset(out)

    @property
    def mosfets(self) -> list[Mosfet]:
        return [d for d in self.devices if isinstance(d, Mosfet)]

    @property
    def transistor_count(self) -> int:
        return len(self.mosfets)

    def device(self, name: str) -> Device:
        for dev in self.devices:
            if dev.name.lower() == name.lower():
                return dev
        raise KeyError(name)

    def model_params(self, mos: Mosfet) -> MosfetParams:
        params = self.models.get(mos.model)
        if params is None:
            return default_params(mos.polarity)
        return params

    def with_devices(self, *devices: Device) -> "Netlist":
        return Netlist(self.name, self.devices + tuple(devices), self.models)

    def replace_device(self, dev: Device) -> "Netlist":
        devs = tuple(dev if d.name.lower() == dev.name.lower() else d for d in self.devices)
        return Netlist(self.name, devs, self.models)

    def renamed(self, name: str) -> "Netlist":
        return replace(self, name=name)

    def structurally_equal(self, other: "Netlist") -> bool:
        return (
            self.devices == other.devices
            and dict(self.models) == dict(other.models)
            and self.nodes == other.nodes
        )


# -- parsing -----------------------------------------------------------------

_SUFFIX = {"f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6, "m": 1e-3, "k": 1e3, "meg": 1e6}
_NUMBER = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)(meg|[fpnumk])?$", re.IGNORECASE)


def parse_value(token: str) -> float:
    """Parse a number with an optional engineering suffix (``2.5f`` -> 2.5e-15)."""
    m = _NUMBER.match(token.strip())
    if not m:
        raise ValueError(f"malformed number {token!r}")
    value = float(m.group(1))
    if m.group(2):
        value *= _SUFFIX[m.group(2).lower()]
    return value


def _value(token: str, lineno: int) -> float:
    try:
        return parse_value(token)
    except ValueError:
        raise NetlistError(f"malformed parameter {token!r}", lineno) from None


def _func_args(rest: str, keyword: str, lineno: int) -> list[str]:
    m = re.fullmatch(rf"{keyword}\s*\((.*)\)", rest.strip(), re.IGNORECASE)
    if not m:
        raise NetlistError(f"malformed {keyword} specification", lineno)
    return m.group(1).replace(",", " ").split()


def _parse_waveform(rest: str, lineno: int, current: bool) -> Waveform:
    head = rest.strip().split(None, 1)[0].upper() if rest.strip() else ""
    if current:
        if not head.startswith("SNU"):
            raise NetlistError("current sources take SNU(...)", lineno)
        args = _func_args(rest, "SNU", lineno)
        if len(args) != 5:
            raise NetlistError("SNU takes 5 arguments", lineno)
        q, tau1, tau2, t0, sign = (_value(a, lineno) for a in args)
        if sign not in (1.0, -1.0):
            raise NetlistError(f"malformed parameter sign={args[4]!r}", lineno)
        return _checked(DoubleExp, lineno, q, tau1, tau2, t0, int(sign))
    if head == "DC":
        toks = rest.split()
        if len(toks) != 2:
            raise NetlistError("DC takes one value", lineno)
        return DC(_value(toks[1], lineno))
    if head.startswith("PULSE"):
        args = _func_args(rest, "PULSE", lineno)
        if len(args) != 7:
            raise NetlistError("PULSE takes 7 arguments", lineno)
        return _checked(Pulse, lineno, *(_value(a, lineno) for a in args))
    if head.startswith("PWL"):
        args = _func_args(rest, "PWL", lineno)
        if not args or len(args) % 2:
            raise NetlistError("PWL takes an even number of values", lineno)
        vals = [_value(a, lineno) for a in args]
        return _checked(PWL, lineno, tuple(zip(vals[0::2], vals[1::2])))
    raise NetlistError(f"unknown source specification {rest.strip()!r}", lineno)


def _checked(cls, lineno, *args):
    try:
        return cls(*args)
    except NetlistError as exc:
        raise NetlistError(str(exc), lineno) from None


_MODEL_KEYS = {"vth": "vth0", "kp": "kp0", "lambda": "lam", "cg": "cg0", "tc_vth": "tc_vth", "mu_exp": "mu_exp"}


def _parse_model(toks: list[str], lineno: int) -> tuple[str, MosfetParams]:
    if len(toks) < 3:
        raise NetlistError("malformed .model card", lineno)
    name, pol = toks[1].lower(), toks[2].upper()
    if pol not in ("NMOS", "PMOS"):
        raise NetlistError(f"unknown model type {toks[2]!r}", lineno)
    params = default_params(pol[0])
    updates = {}
    for tok in toks[3:]:
        key, eq, val = tok.partition("=")
        if not eq or key.lower() not in _MODEL_KEYS:
            raise NetlistError(f"malformed parameter {tok!r}", lineno)
        updates[_MODEL_KEYS[key.lower()]] = _value(val, lineno)
    try:
        return name, replace(params, **updates)
    except ValueError as exc:
        raise NetlistError(str(exc), lineno) from None


def parse_netlist(text: str) -> Netlist:
    """Parse netlist text into a :class:`Netlist`."""
    name = "circuit"
    devices = []
    models: dict[str, MosfetParams] = {}
    pending = []  # (lineno, name, d, g, s, model, wl)
    names = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("*"):
            continue
        toks = line.split()
        card = toks[0].lower()
        if card == ".end":
            break
        if card == ".title":
            name = line.split(None, 1)[1].strip() if len(toks) > 1 else name
            continue
        if card == ".model":
            mname, params = _parse_model(toks, lineno)
            models[mname] = params
            continue
        if card.startswith("."):
            raise NetlistError(f"unknown card {toks[0]!r}", lineno)

        if card in names:
            raise NetlistError(f"duplicate device name {toks[0]!r}", lineno)
        names.add(card)
        kind = card[0]
        if kind == "m":
            if len(toks) != 6:
                raise NetlistError("MOSFET card needs: name drain gate source type W/L=", lineno)
            key, eq, val = toks[5].partition("=")
            if key.lower() != "w/l" or not eq:
                raise NetlistError(f"malformed parameter {toks[5]!r}", lineno)
            wl = _value(val, lineno)
            if not wl > 0:
                raise NetlistError("w_over_l must be positive", lineno)
            pending.append((lineno, card, *(t.lower() for t in toks[1:5]), wl))
            devices.append(None)
        elif kind == "c":
            if len(toks) != 4:
                raise NetlistError("capacitor card needs: name n1 n2 value", lineno)
            value = _value(toks[3], lineno)
            devices.append(_checked(Capacitor, lineno, card, toks[1].lower(), toks[2].lower(), value))
        elif kind in "vi":
            if len(toks) < 4:
                raise NetlistError("source card needs: name n+ n- waveform", lineno)
            rest = line.split(None, 3)[3]
            wave = _parse_waveform(rest, lineno, current=kind == "i")
            cls = VSource if kind == "v" else ISource
            devices.append(cls(card, toks[1].lower(), toks[2].lower(), wave))
        else:
            raise NetlistError(f"unknown card {toks[0]!r}", lineno)

    # resolve MOSFET models once all .model cards are known
    it = iter(pending)
    for i, dev in enumerate(devices):
        if dev is not None:
            continue
        lineno, mname, d, g, s, model, wl = next(it)
        if model in models:
            pol = models[model].polarity
        elif model in ("nmos", "pmos"):
            pol = model[0].upper()
        else:
            raise NetlistError(f"unknown model {model!r}", lineno)
        devices[i] = Mosfet(mname, d, g, s, pol, wl, model)
    return Netlist(name, devices, models)


# -- writing -----------------------------------------------------------------


def _num(x: float) -> str:
    return repr(float(x))


def _format_waveform(w: Waveform) -> str:
    if isinstance(w, DC):
        return f"DC {_num(w.v)}"
    if isinstance(w, Pulse):
        args = (w.v1, w.v2, w.t_delay, w.t_rise, w.t_fall, w.t_width, w.period)
        return "PULSE(" + " ".join(_num(a) for a in args) + ")"
    if isinstance(w, PWL):
        return "PWL(" + " ".join(f"{_num(t)} {_num(v)}" for t, v in w.points) + ")"
    if isinstance(w, DoubleExp):
        return f"SNU({_num(w.q_inj)} {_num(w.tau1)} {_num(w.tau2)} {_num(w.t_start)} {w.sign})"
    raise TypeError(w)


def serialize(netlist: Netlist) -> str:
    """Write a netlist in the text format accepted by :func:`parse_netlist`."""
    lines = [f".title {netlist.name}"]
    for name, p in sorted(netlist.models.items()):
        lines.append(
            f".model {name} {p.polarity}MOS VTH={_num(p.vth0)} KP={_num(p.kp0)} "
            f"LAMBDA={_num(p.lam)} CG={_num(p.cg0)} TC_VTH={_num(p.tc_vth)} MU_EXP={_num(p.mu_exp)}"
        )
    for dev in netlist.devices:
        if isinstance(dev, Mosfet):
            lines.append(
                f"{dev.name} {dev.drain} {dev.gate} {dev.source} {dev.model.upper()} W/L={_num(dev.w_over_l)}"
            )
        elif isinstance(dev, Capacitor):
            lines.append(f"{dev.name} {dev.n1} {dev.n2} {_num(dev.value)}")
        else:
            lines.append(f"{dev.name} {dev.n_plus} {dev.n_minus} {_format_waveform(dev.waveform)}")
    lines.append(".end")
    return "\n".join(lines) + "\n"


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str
    node: str | None = None


def _rail_drivers(netlist: Netlist) -> dict[str, str]:
    """Map rail node -> name of the first voltage source tying it to ground."""
    drivers = {}
    for dev in netlist.devices:
        if isinstance(dev, VSource) and dev.n_plus != dev.n_minus and GROUND in dev.terminals:
            node = dev.n_plus if dev.n_minus == GROUND else dev.n_minus
            drivers.setdefault(node, dev.name)
    return drivers


def rail_nodes(netlist: Netlist) -> set[str]:
    """Ground plus every node pinned to ground by a voltage source."""
    return {GROUND} | set(_rail_drivers(netlist))


def floating_vsources(netlist: Netlist) -> set[str]:
    """Voltage sources that are not the grounded driver of a rail node."""
    drivers = set(_rail_drivers(netlist).values())
    return {d.name for d in netlist.devices if isinstance(d, VSource) and d.name not in drivers}


def validate(netlist: Netlist) -> list[Diagnostic]:
    """Check netlist invariants; returns diagnostics rather than raising."""
    diags = []
    if not any(isinstance(d, VSource) and VDD in d.terminals for d in netlist.devices):
        diags.append(Diagnostic("error", "unpowered: no voltage source on vdd", VDD))
    for dev in netlist.devices:
        if isinstance(dev, Mosfet) and dev.model not in netlist.models and dev.model not in ("nmos", "pmos"):
            diags.append(Diagnostic("error", f"{dev.name}: unknown model {dev.model!r}"))
        if isinstance(dev, (VSource, ISource, Capacitor)) and dev.terminals[0] == dev.terminals[1]:
            diags.append(Diagnostic("warning", f"{dev.name}: both terminals on {dev.terminals[0]}"))
    driven = {}
    for dev in netlist.devices:
        if isinstance(dev, VSource) and GROUND in dev.terminals:
            node = dev.n_plus if dev.n_minus == GROUND else dev.n_minus
            if node in driven:
                diags.append(Diagnostic("error", f"{node} driven by both {driven[node]} and {dev.name}", node))
            driven[node] = dev.name

    # DC connectivity through channels and voltage sources
    parent = {n: n for n in netlist.nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for dev in netlist.devices:
        if isinstance(dev, Mosfet):
            a, b = dev.drain, dev.source
        elif isinstance(dev, VSource):
            a, b = dev.n_plus, dev.n_minus
        else:
            continue
        parent[find(a)] = find(b)
    rail_roots = {find(r) for r in rail_nodes(netlist)}
    for node in sorted(netlist.nodes):
        if find(node) not in rail_roots:
            diags.append(Diagnostic("warning", f"floating node {node}", node))
    return diags
