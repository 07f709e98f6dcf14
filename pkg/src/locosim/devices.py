"""Device equations: square-law MOSFET with temperature dependence and source waveforms.

The numerically hot pieces (:func:`mos_eval`, :func:`wave_value`) are numba
kernels shared with the solver; the public functions wrap them for scalar use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

T_REF = 27.0
ZERO_KELVIN = -273.15


@dataclass(frozen=True)
class MosfetParams:
    polarity: str  # "N" | "P"
    vth0: float
    kp0: float
    lam: float = 0.1
    cg0: float = 0.05e-15
    tc_vth: float = 0.7e-3
    mu_exp: float = -1.5
    t_ref: float = T_REF

    def __post_init__(self):
        if self.polarity not in ("N", "P"):
            raise ValueError(f"bad polarity {self.polarity!r}")
        if not self.kp0 > 0:
            raise ValueError("kp0 must be positive")
        if self.cg0 < 0:
            raise ValueError("cg0 must be non-negative")
        if self.vth0 == 0 or (self.vth0 > 0) != (self.polarity == "N"):
            raise ValueError("vth0 sign must be + for NMOS and - for PMOS")

    def vth_abs(self, env: "EnvCondition") -> float:
        """Threshold magnitude at the given condition."""
        return abs(self.vth0) + env.dvth - self.tc_vth * (env.temperature - self.t_ref)

    def vth(self, env: "EnvCondition") -> float:
        return math.copysign(self.vth_abs(env), self.vth0)

    def kp(self, env: "EnvCondition") -> float:
        ratio = (env.temperature - ZERO_KELVIN) / (self.t_ref - ZERO_KELVIN)
        return self.kp0 * ratio**self.mu_exp


NMOS_DEFAULT = MosfetParams("N", vth0=0.30, kp0=200e-6)
PMOS_DEFAULT = MosfetParams("P", vth0=-0.30, kp0=100e-6)


def default_params(polarity: str) -> MosfetParams:
    return NMOS_DEFAULT if polarity.upper().startswith("N") else PMOS_DEFAULT


@dataclass(frozen=True)
class EnvCondition:
    temperature: float = T_REF
    vdd: float = 0.8
    dvth: float = 0.0

    def __post_init__(self):
        if not self.vdd > 0:
            raise ValueError("vdd must be positive")
        if not -55.0 <= self.temperature <= 175.0:
            raise ValueError("temperature must be within [-55, 175] degC")


NOMINAL = EnvCondition()


# -- MOSFET ------------------------------------------------------------------


@njit(cache=True)
def _forward(vgs, vds, vth, beta, lam):
    """NMOS-normalised current and (gm, gds) for vds >= 0."""
    vov = vgs - vth
    if vov <= 0.0:
        return 0.0, 0.0, 0.0
    clm = 1.0 + lam * vds
    if vds < vov:
        f = vov * vds - 0.5 * vds * vds
        return beta * f * clm, beta * vds * clm, beta * ((vov - vds) * clm + f * lam)
    sq = 0.5 * vov * vov
    return beta * sq * clm, beta * vov * clm, beta * sq * lam


@njit(cache=True)
def mos_eval(pol, vd, vg, vs, vth_abs, beta, lam):
    """Drain-to-source channel current and its partials w.r.t. (vd, vg, vs).

    ``pol`` is +1 for NMOS and -1 for PMOS; drain and source swap roles when
    the channel is reverse biased.
    """
    d = pol * vd
    g = pol * vg
    s = pol * vs
    if d >= s:
        i, gm, gds = _forward(g - s, d - s, vth_abs, beta, lam)
        return pol * i, gds, gm, -gm - gds
    i, gm, gds = _forward(g - d, s - d, vth_abs, beta, lam)
    return -pol * i, gm + gds, -gm, -gds


def _pol(params: MosfetParams) -> float:
    return 1.0 if params.polarity == "N" else -1.0


def mosfet_ids(params: MosfetParams, env: EnvCondition, vgs: float, vds: float, w_over_l: float = 1.0) -> float:
    """Drain current (A, drain to source) with the source as reference."""
    beta = params.kp(env) * w_over_l
    i, _, _, _ = mos_eval(_pol(params), float(vds), float(vgs), 0.0, params.vth_abs(env), beta, params.lam)
    return i


def mosfet_gds_gm(params: MosfetParams, env: EnvCondition, vgs: float, vds: float, w_over_l: float = 1.0):
    """Return ``(gm, gds)``, the partials of :func:`mosfet_ids` w.r.t. vgs and vds."""
    beta = params.kp(env) * w_over_l
    _, dd, dg, _ = mos_eval(_pol(params), float(vds), float(vgs), 0.0, params.vth_abs(env), beta, params.lam)
    return dg, dd


# -- waveforms ---------------------------------------------------------------

W_DC, W_PULSE, W_PWL, W_DEXP = 0, 1, 2, 3
N_WPARAMS = 7


@njit(cache=True)
def wave_value(kind, p, pwl_t, pwl_v, t):
    if kind == 0:
        return p[0]
    if kind == 1:
        v1, v2, td, tr, tf, pw, per = p[0], p[1], p[2], p[3], p[4], p[5], p[6]
        if t < td:
            return v1
        tau = (t - td) % per
        if tau < tr:
            return v1 + (v2 - v1) * tau / tr
        if tau < tr + pw:
            return v2
        if tau < tr + pw + tf:
            return v2 + (v1 - v2) * (tau - tr - pw) / tf
        return v1
    if kind == 2:
        lo = int(p[0])
        n = int(p[1])
        if t <= pwl_t[lo]:
            return pwl_v[lo]
        last = lo + n - 1
        if t >= pwl_t[last]:
            return pwl_v[last]
        k = lo
        while pwl_t[k + 1] < t:
            k += 1
        frac = (t - pwl_t[k]) / (pwl_t[k + 1] - pwl_t[k])
        return pwl_v[k] + frac * (pwl_v[k + 1] - pwl_v[k])
    # double exponential
    q, tau1, tau2, t0, sign = p[0], p[1], p[2], p[3], p[4]
    if t < t0:
        return 0.0
    x = t - t0
    return sign * q / (tau1 - tau2) * (math.exp(-x / tau1) - math.exp(-x / tau2))


def encode_waveform(w, pwl_t: list, pwl_v: list) -> tuple[int, np.ndarray]:
    """Flatten a waveform into (kind, params), appending PWL knots to the shared lists."""
    from .netlist import DC, PWL, DoubleExp, Pulse

    p = np.zeros(N_WPARAMS)
    if isinstance(w, DC):
        p[0] = w.v
        return W_DC, p
    if isinstance(w, Pulse):
        p[:] = (w.v1, w.v2, w.t_delay, w.t_rise, w.t_fall, w.t_width, w.period)
        return W_PULSE, p
    if isinstance(w, PWL):
        p[0], p[1] = len(pwl_t), len(w.points)
        for t, v in w.points:
            pwl_t.append(t)
            pwl_v.append(v)
        return W_PWL, p
    if isinstance(w, DoubleExp):
        p[:5] = (w.q_inj, w.tau1, w.tau2, w.t_start, w.sign)
        return W_DEXP, p
    raise TypeError(f"unsupported waveform {w!r}")


def waveform_value(w, t: float) -> float:
    """Value of a source waveform at time ``t`` (V for voltage, A for current sources)."""
    pt, pv = [], []
    kind, p = encode_waveform(w, pt, pv)
    return wave_value(kind, p, np.asarray(pt + [0.0]), np.asarray(pv + [0.0]), float(t))


def waveform_breakpoints(w, t_stop: float) -> list[float]:
    """Times in [0, t_stop] where the waveform has a slope discontinuity."""
    from .netlist import PWL, DoubleExp, Pulse

    out = []
    if isinstance(w, Pulse):
        offsets = (0.0, w.t_rise, w.t_rise + w.t_width, w.t_rise + w.t_width + w.t_fall)
        k = 0
        while w.t_delay + k * w.period <= t_stop:
            base = w.t_delay + k * w.period
            out.extend(base + o for o in offsets)
            k += 1
    elif isinstance(w, PWL):
        out = [t for t, _ in w.points]
    elif isinstance(w, DoubleExp):
        out = [w.t_start]
    return sorted(t for t in set(out) if 0.0 <= t <= t_stop)


def double_exp_peak_time(tau1: float, tau2: float) -> float:
    """Time after onset at which the double-exponential pulse peaks."""
    return tau1 * tau2 / (tau2 - tau1) * math.log(tau2 / tau1)
