"""Modified nodal analysis: Newton DC operating point and fixed-grid transient.

Nodes pinned to ground by a voltage source ("rails") are eliminated from the
unknowns and take their source value exactly; any other voltage source gets a
branch-current unknown.  Every non-rail node carries GMIN to ground and a
floor capacitance; every MOSFET adds ``cg0 * W/L`` from gate to ground.

The transient integrator is trapezoidal on a deterministic grid (coarse step,
fine step inside requested windows and around every double-exponential
source, with all source breakpoints placed exactly).  A step whose Newton
solve fails is redone with backward Euler at a quarter of the step, halving
further on failure.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np
from numba import njit

from .devices import (
    NOMINAL, EnvCondition, encode_waveform, mos_eval, wave_value, waveform_breakpoints, waveform_value,
)
from .netlist import GROUND, Capacitor, DoubleExp, ISource, Mosfet, Netlist, VSource, floating_vsources, rail_nodes

logger = logging.getLogger(__name__)

METHOD_DC, METHOD_TRAP, METHOD_BE = 0, 1, 2


class SimulationError(RuntimeError):
    pass


class NonConvergence(SimulationError):
    def __init__(self, message, time=None, node=None, residual=None):
        self.time = time
        self.node = node
        self.residual = residual
        super().__init__(message)


class StepUnderflow(SimulationError):
    def __init__(self, message, time=None):
        self.time = time
        super().__init__(message)


@dataclass(frozen=True)
class SimConfig:
    env: EnvCondition = NOMINAL
    t_stop: float = 1e-9
    dt_nominal: float = 50e-15
    dt_fine: float = 1e-15
    fine_windows: tuple = ()
    v_tol: float = 1e-6
    i_tol: float = 1e-9
    max_newton_iters: int = 100
    gmin: float = 1e-12
    node_cap_floor: float = 0.1e-15

    def __post_init__(self):
        object.__setattr__(self, "fine_windows", tuple(tuple(w) for w in self.fine_windows))
        if not 0 < self.dt_fine <= self.dt_nominal:
            raise ValueError("need 0 < dt_fine <= dt_nominal")
        if min(self.v_tol, self.i_tol, self.gmin) <= 0:
            raise ValueError("v_tol, i_tol and gmin must be positive")
        for a, b in self.fine_windows:
            if not 0 <= a <= b <= self.t_stop:
                raise ValueError(f"fine window ({a}, {b}) outside [0, t_stop]")

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "env"}
        d["fine_windows"] = [list(w) for w in self.fine_windows]
        d["env"] = {"temperature": self.env.temperature, "vdd": self.env.vdd, "dvth": self.env.dvth}
        return d


@dataclass
class OperatingPoint:
    voltages: dict
    branch_currents: dict = field(default_factory=dict)
    supply_currents: dict = field(default_factory=dict)

    def __getitem__(self, node):
        return self.voltages[node]


# -- elaboration ---------------------------------------------------------------


@dataclass
class Compiled:
    node_names: list
    index: dict
    row: np.ndarray
    n_unknowns: int
    fixed_src: np.ndarray
    fixed_sign: np.ndarray
    mos_i: np.ndarray
    mos_f: np.ndarray
    cap_i: np.ndarray
    cap_c: np.ndarray
    vs_i: np.ndarray
    vs_par: np.ndarray
    vs_names: list
    is_i: np.ndarray
    is_par: np.ndarray
    pwl_t: np.ndarray
    pwl_v: np.ndarray


def compile_netlist(netlist: Netlist, config: SimConfig) -> Compiled:
    """Lower a netlist into flat arrays for the numba kernels."""
    rails = rail_nodes(netlist)
    names = [GROUND] + sorted(n for n in netlist.nodes if n != GROUND)
    index = {n: i for i, n in enumerate(names)}
    n_nodes = len(names)

    fixed_src = np.full(n_nodes, -1, dtype=np.int64)
    fixed_sign = np.zeros(n_nodes)
    vsources = [d for d in netlist.devices if isinstance(d, VSource)]
    floating = floating_vsources(netlist)
    branch_of = {}
    for k, vs in enumerate(vsources):
        if vs.name in floating:
            branch_of[k] = None
        elif vs.n_minus == GROUND:
            fixed_src[index[vs.n_plus]] = k
            fixed_sign[index[vs.n_plus]] = 1.0
        else:
            fixed_src[index[vs.n_minus]] = k
            fixed_sign[index[vs.n_minus]] = -1.0

    row = np.full(n_nodes, -1, dtype=np.int64)
    n_unk = 0
    for i, n in enumerate(names):
        if i == 0 or fixed_src[i] >= 0:
            continue
        row[i] = n_unk
        n_unk += 1
    for k in sorted(branch_of):
        branch_of[k] = n_unk
        n_unk += 1

    env = config.env
    mos = netlist.mosfets
    mos_i = np.array([[index[m.drain], index[m.gate], index[m.source]] for m in mos], dtype=np.int64).reshape(-1, 3)
    mos_f = np.zeros((len(mos), 4))
    caps = {}  # (a, b) -> farads, with grounded caps merged per node

    def add_cap(a, b, c):
        if a == b or c == 0.0:
            return
        if a == 0:
            a, b = b, a
        elif b != 0 and a > b:
            a, b = b, a
        caps[(a, b)] = caps.get((a, b), 0.0) + c

    for k, m in enumerate(mos):
        p = netlist.model_params(m)
        vth = p.vth_abs(env)
        mos_f[k] = (1.0 if m.polarity == "N" else -1.0, vth, p.kp(env) * m.w_over_l, p.lam)
        add_cap(index[m.gate], 0, p.cg0 * m.w_over_l)
    for d in netlist.devices:
        if isinstance(d, Capacitor):
            add_cap(index[d.n1], index[d.n2], d.value)
    for i, n in enumerate(names):
        if row[i] >= 0 and n not in rails:
            add_cap(i, 0, config.node_cap_floor)
    cap_keys = sorted(caps)
    cap_i = np.array(cap_keys, dtype=np.int64).reshape(-1, 2)
    cap_c = np.array([caps[k] for k in cap_keys], dtype=float)

    pwl_t, pwl_v = [], []
    vs_i = np.zeros((len(vsources), 4), dtype=np.int64)
    vs_par = np.zeros((len(vsources), 7))
    for k, vs in enumerate(vsources):
        kind, p = encode_waveform(vs.waveform, pwl_t, pwl_v)
        br = branch_of.get(k)
        vs_i[k] = (index[vs.n_plus], index[vs.n_minus], kind, -1 if br is None else br)
        vs_par[k] = p
    isources = [d for d in netlist.devices if isinstance(d, ISource)]
    is_i = np.zeros((len(isources), 3), dtype=np.int64)
    is_par = np.zeros((len(isources), 7))
    for k, src in enumerate(isources):
        kind, p = encode_waveform(src.waveform, pwl_t, pwl_v)
        is_i[k] = (index[src.n_plus], index[src.n_minus], kind)
        is_par[k] = p

    return Compiled(
        node_names=names, index=index, row=row, n_unknowns=n_unk,
        fixed_src=fixed_src, fixed_sign=fixed_sign,
        mos_i=mos_i, mos_f=mos_f, cap_i=cap_i, cap_c=cap_c,
        vs_i=vs_i, vs_par=vs_par, vs_names=[v.name for v in vsources],
        is_i=is_i, is_par=is_par,
        pwl_t=np.array(pwl_t + [0.0]), pwl_v=np.array(pwl_v + [0.0]),
    )


# -- numba kernels -----------------------------------------------------------


@njit(cache=True)
def _lu_solve(a, b, x):
    """Solve a x = b by Gaussian elimination with partial pivoting (a, b clobbered)."""
    n = b.shape[0]
    for k in range(n):
        p = k
        big = abs(a[k, k])
        for i in range(k + 1, n):
            if abs(a[i, k]) > big:
                big = abs(a[i, k])
                p = i
        if big == 0.0:
            return False
        if p != k:
            for j in range(k, n):
                tmp = a[k, j]
                a[k, j] = a[p, j]
                a[p, j] = tmp
            tmp = b[k]
            b[k] = b[p]
            b[p] = tmp
        piv = a[k, k]
        for i in range(k + 1, n):
            f = a[i, k] / piv
            if f != 0.0:
                a[i, k] = 0.0
                for j in range(k + 1, n):
                    a[i, j] -= f * a[k, j]
                b[i] -= f * b[k]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for j in range(i + 1, n):
            s -= a[i, j] * x[j]
        x[i] = s / a[i, i]
    return True


@njit(cache=True)
def _set_rails(v, t, alpha, fixed_src, fixed_sign, vs_i, vs_par, pwl_t, pwl_v):
    for n in range(v.shape[0]):
        k = fixed_src[n]
        if k >= 0:
            v[n] = fixed_sign[n] * alpha * wave_value(vs_i[k, 2], vs_par[k], pwl_t, pwl_v, t)


@njit(cache=True)
def _assemble(v, ib, t, alpha, gmin, geq_scale, method, v_prev, icap_prev,
              row, mos_i, mos_f, cap_i, cap_c, vs_i, vs_par, is_i, is_par, pwl_t, pwl_v,
              node_i, res, jac):
    """Fill KCL currents leaving each node (node_i), the unknown residual and Jacobian.

    method 0 = DC (capacitors open), 1 = trapezoidal, 2 = backward Euler;
    geq_scale is 2/h or 1/h accordingly.
    """
    node_i[:] = 0.0
    res[:] = 0.0
    jac[:, :] = 0.0
    for k in range(mos_i.shape[0]):
        d = mos_i[k, 0]
        g = mos_i[k, 1]
        s = mos_i[k, 2]
        i, dd, dg, ds = mos_eval(mos_f[k, 0], v[d], v[g], v[s], mos_f[k, 1], mos_f[k, 2], mos_f[k, 3])
        node_i[d] += i
        node_i[s] -= i
        rd = row[d]
        rs = row[s]
        rg = row[g]
        if rd >= 0:
            if rd >= 0:
                jac[rd, rd] += dd
            if rg >= 0:
                jac[rd, rg] += dg
            if rs >= 0:
                jac[rd, rs] += ds
        if rs >= 0:
            if rd >= 0:
                jac[rs, rd] -= dd
            if rg >= 0:
                jac[rs, rg] -= dg
            jac[rs, rs] -= ds
    if method != 0:
        for k in range(cap_i.shape[0]):
            a = cap_i[k, 0]
            b = cap_i[k, 1]
            geq = cap_c[k] * geq_scale
            ic = geq * ((v[a] - v[b]) - (v_prev[a] - v_prev[b]))
            if method == 1:
                ic -= icap_prev[k]
            node_i[a] += ic
            node_i[b] -= ic
            ra = row[a]
            rb = row[b]
            if ra >= 0:
                jac[ra, ra] += geq
                if rb >= 0:
                    jac[ra, rb] -= geq
            if rb >= 0:
                jac[rb, rb] += geq
                if ra >= 0:
                    jac[rb, ra] -= geq
    for k in range(is_i.shape[0]):
        val = alpha * wave_value(is_i[k, 2], is_par[k], pwl_t, pwl_v, t)
        node_i[is_i[k, 0]] += val
        node_i[is_i[k, 1]] -= val
    for k in range(vs_i.shape[0]):
        br = vs_i[k, 3]
        if br < 0:
            continue
        p = vs_i[k, 0]
        m = vs_i[k, 1]
        cur = ib[br]
        node_i[p] -= cur
        node_i[m] += cur
        if row[p] >= 0:
            jac[row[p], br] -= 1.0
            jac[br, row[p]] += 1.0
        if row[m] >= 0:
            jac[row[m], br] += 1.0
            jac[br, row[m]] -= 1.0
        res[br] = v[p] - v[m] - alpha * wave_value(vs_i[k, 2], vs_par[k], pwl_t, pwl_v, t)
    for n in range(v.shape[0]):
        r = row[n]
        if r >= 0:
            res[r] = node_i[n] + gmin * v[n]
            jac[r, r] += gmin


@njit(cache=True)
def _newton(v, ib, t, alpha, gmin, geq_scale, method, v_prev, icap_prev,
            row, fixed_src, fixed_sign, mos_i, mos_f, cap_i, cap_c, vs_i, vs_par,
            is_i, is_par, pwl_t, pwl_v, max_iter, v_tol, i_tol, node_i, res, jac, dx):
    """Damped Newton; returns (converged, iterations, worst row, worst residual)."""
    _set_rails(v, t, alpha, fixed_src, fixed_sign, vs_i, vs_par, pwl_t, pwl_v)
    n_unk = res.shape[0]
    row_node = np.full(n_unk, -1, dtype=np.int64)
    for n in range(row.shape[0]):
        if row[n] >= 0:
            row_node[row[n]] = n
    last_dv = np.inf
    worst = 0
    worst_r = 0.0
    for it in range(max_iter + 1):
        _assemble(v, ib, t, alpha, gmin, geq_scale, method, v_prev, icap_prev,
                  row, mos_i, mos_f, cap_i, cap_c, vs_i, vs_par, is_i, is_par, pwl_t, pwl_v,
                  node_i, res, jac)
        worst_r = 0.0
        for r in range(n_unk):
            if abs(res[r]) > worst_r:
                worst_r = abs(res[r])
                worst = r
        if n_unk == 0 or (last_dv <= v_tol and worst_r <= i_tol):
            return True, it, worst, worst_r
        if it == max_iter:
            break
        for r in range(n_unk):
            res[r] = -res[r]
        if not _lu_solve(jac, res, dx):
            return False, it, worst, worst_r
        last_dv = 0.0
        for r in range(n_unk):
            n = row_node[r]
            step = dx[r]
            if n >= 0:
                if step > 0.3:
                    step = 0.3
                elif step < -0.3:
                    step = -0.3
                v[n] += step
                if abs(step) > last_dv:
                    last_dv = abs(step)
            else:
                ib[r] += step
        if not np.isfinite(last_dv):
            return False, it, worst, worst_r
    return False, max_iter, worst, worst_r


@njit(cache=True)
def _supply(v, ib, node_i, fixed_src, fixed_sign, vs_i, out):
    for n in range(v.shape[0]):
        k = fixed_src[n]
        if k >= 0:
            out[k] = fixed_sign[n] * node_i[n]
    for k in range(vs_i.shape[0]):
        if vs_i[k, 3] >= 0:
            out[k] = ib[vs_i[k, 3]]


@njit(cache=True)
def _update_icap(v, v_prev, icap, geq_scale, method, cap_i, cap_c):
    for k in range(cap_i.shape[0]):
        a = cap_i[k, 0]
        b = cap_i[k, 1]
        ic = cap_c[k] * geq_scale * ((v[a] - v[b]) - (v_prev[a] - v_prev[b]))
        if method == 1:
            ic -= icap[k]
        icap[k] = ic


@njit(cache=True)
def _transient_kernel(grid, v0, ib0, gmin, dt_min, max_iter, v_tol, i_tol,
                      row, fixed_src, fixed_sign, mos_i, mos_f, cap_i, cap_c, vs_i, vs_par,
                      is_i, is_par, pwl_t, pwl_v, sup0):
    n_nodes = v0.shape[0]
    n_unk = ib0.shape[0]
    n_vs = vs_i.shape[0]
    cap = grid.shape[0] + 64
    times = np.empty(cap)
    vv = np.empty((cap, n_nodes))
    ii = np.empty((cap, n_vs))
    meth = np.empty(cap, dtype=np.int8)
    v = v0.copy()
    ib = ib0.copy()
    v_prev = v0.copy()
    ib_prev = ib0.copy()
    icap = np.zeros(cap_i.shape[0])
    icap_save = np.zeros(cap_i.shape[0])
    node_i = np.zeros(n_nodes)
    res = np.zeros(n_unk)
    jac = np.zeros((n_unk, n_unk))
    dx = np.zeros(n_unk)
    sup = np.zeros(n_vs)
    times[0] = grid[0]
    vv[0] = v0
    ii[0] = sup0
    meth[0] = 0
    npts = 1
    status = 0
    fail_t = 0.0
    fail_row = 0
    fail_res = 0.0
    for k in range(1, grid.shape[0]):
        t0 = grid[k - 1]
        t1 = grid[k]
        h = t1 - t0
        v_prev[:] = v
        ib_prev[:] = ib
        ok, it, wr, wres = _newton(v, ib, t1, 1.0, gmin, 2.0 / h, 1, v_prev, icap,
                                   row, fixed_src, fixed_sign, mos_i, mos_f, cap_i, cap_c, vs_i, vs_par,
                                   is_i, is_par, pwl_t, pwl_v, max_iter, v_tol, i_tol, node_i, res, jac, dx)
        if ok:
            _update_icap(v, v_prev, icap, 2.0 / h, 1, cap_i, cap_c)
            _supply(v, ib, node_i, fixed_src, fixed_sign, vs_i, sup)
            if npts == cap:
                cap *= 2
                times2 = np.empty(cap)
                vv2 = np.empty((cap, n_nodes))
                ii2 = np.empty((cap, n_vs))
                meth2 = np.empty(cap, dtype=np.int8)
                times2[:npts] = times[:npts]
                vv2[:npts] = vv[:npts]
                ii2[:npts] = ii[:npts]
                meth2[:npts] = meth[:npts]
                times, vv, ii, meth = times2, vv2, ii2, meth2
            times[npts] = t1
            vv[npts] = v
            ii[npts] = sup
            meth[npts] = 1
            npts += 1
            continue
        # backward-Euler retry on a refined sub-grid
        v[:] = v_prev
        ib[:] = ib_prev
        hs = h / 4.0
        t = t0
        while t < t1:
            last = t + hs >= t1 - 1e-6 * hs
            tn = t1 if last else t + hs
            hh = tn - t
            v_prev[:] = v
            ib_prev[:] = ib
            icap_save[:] = icap
            ok, it, wr, wres = _newton(v, ib, tn, 1.0, gmin, 1.0 / hh, 2, v_prev, icap,
                                       row, fixed_src, fixed_sign, mos_i, mos_f, cap_i, cap_c, vs_i, vs_par,
                                       is_i, is_par, pwl_t, pwl_v, max_iter, v_tol, i_tol, node_i, res, jac, dx)
            if not ok:
                v[:] = v_prev
                ib[:] = ib_prev
                hs = hh / 2.0
                if hs < dt_min:
                    status = 2
                    fail_t = tn
                    fail_row = wr
                    fail_res = wres
                    break
                continue
            _update_icap(v, v_prev, icap, 1.0 / hh, 2, cap_i, cap_c)
            _supply(v, ib, node_i, fixed_src, fixed_sign, vs_i, sup)
            if npts == cap:
                cap *= 2
                times2 = np.empty(cap)
                vv2 = np.empty((cap, n_nodes))
                ii2 = np.empty((cap, n_vs))
                meth2 = np.empty(cap, dtype=np.int8)
                times2[:npts] = times[:npts]
                vv2[:npts] = vv[:npts]
                ii2[:npts] = ii[:npts]
                meth2[:npts] = meth[:npts]
                times, vv, ii, meth = times2, vv2, ii2, meth2
            times[npts] = tn
            vv[npts] = v
            ii[npts] = sup
            meth[npts] = 2
            npts += 1
            t = tn
        if status != 0:
            break
    return times[:npts], vv[:npts], ii[:npts], meth[:npts], status, fail_t, fail_row, fail_res


# -- public API --------------------------------------------------------------


def _run_newton(c: Compiled, v, ib, t, alpha, gmin, config, method=METHOD_DC, geq_scale=0.0,
                v_prev=None, icap=None):
    n = c.n_unknowns
    node_i = np.zeros(len(c.node_names))
    res = np.zeros(n)
    jac = np.zeros((n, n))
    dx = np.zeros(n)
    if v_prev is None:
        v_prev = v.copy()
    if icap is None:
        icap = np.zeros(len(c.cap_c))
    ok, it, worst, wres = _newton(
        v, ib, t, alpha, gmin, geq_scale, method, v_prev, icap,
        c.row, c.fixed_src, c.fixed_sign, c.mos_i, c.mos_f, c.cap_i, c.cap_c, c.vs_i, c.vs_par,
        c.is_i, c.is_par, c.pwl_t, c.pwl_v, config.max_newton_iters, config.v_tol, config.i_tol,
        node_i, res, jac, dx,
    )
    return ok, worst, wres, node_i


def _row_name(c: Compiled, r: int) -> str:
    for n, rr in zip(c.node_names, c.row):
        if rr == r:
            return n
    for k, (_, _, _, br) in enumerate(c.vs_i):
        if br == r:
            return f"i({c.vs_names[k]})"
    return "?"


def _solve_dc(c: Compiled, config: SimConfig, t: float = 0.0):
    """DC solve with gmin- and source-stepping fallbacks; returns (v, ib, node_i)."""
    n_nodes = len(c.node_names)
    n_br = c.n_unknowns

    v = np.zeros(n_nodes)
    ib = np.zeros(n_br)
    ok, worst, wres, node_i = _run_newton(c, v, ib, t, 1.0, config.gmin, config)
    if ok:
        return v, ib, node_i

    logger.info("plain Newton failed (residual %.3g at %s); trying gmin stepping", wres, _row_name(c, worst))
    v[:] = 0.0
    ib[:] = 0.0
    ok = True
    g = 1e-3
    while True:
        g_step = max(g, config.gmin)
        ok, worst, wres, node_i = _run_newton(c, v, ib, t, 1.0, g_step, config)
        if not ok or g_step <= config.gmin:
            break
        g /= 10.0
    if ok:
        return v, ib, node_i

    logger.info("gmin stepping failed; trying source stepping")
    v[:] = 0.0
    ib[:] = 0.0
    for k in range(1, 11):
        ok, worst, wres, node_i = _run_newton(c, v, ib, t, k / 10.0, config.gmin, config)
        if not ok:
            break
    if ok:
        return v, ib, node_i
    raise NonConvergence(
        f"DC operating point did not converge: worst node {_row_name(c, worst)}, residual {wres:.3g} A",
        time=t, node=_row_name(c, worst), residual=wres,
    )


def dc_operating_point(netlist: Netlist, config: SimConfig, t: float = 0.0) -> OperatingPoint:
    """Solve the nonlinear DC system with all sources evaluated at time ``t``."""
    c = compile_netlist(netlist, config)
    v, ib, node_i = _solve_dc(c, config, t)
    sup = np.zeros(len(c.vs_names))
    _supply(v, ib, node_i, c.fixed_src, c.fixed_sign, c.vs_i, sup)
    return OperatingPoint(
        voltages={n: float(v[i]) for i, n in enumerate(c.node_names)},
        branch_currents={c.vs_names[k]: float(ib[br]) for k, (_, _, _, br) in enumerate(c.vs_i) if br >= 0},
        supply_currents={name: float(x) for name, x in zip(c.vs_names, sup)},
    )


def fine_windows_for(netlist: Netlist, config: SimConfig) -> list[tuple[float, float]]:
    wins = [tuple(w) for w in config.fine_windows]
    for dev in netlist.devices:
        if isinstance(dev, (ISource, VSource)) and isinstance(dev.waveform, DoubleExp):
            w = dev.waveform
            a = w.t_start
            if a <= config.t_stop:
                wins.append((a, min(config.t_stop, a + 20.0 * max(w.tau1, w.tau2))))
    return wins


def time_grid(netlist: Netlist, config: SimConfig) -> np.ndarray:
    """Deterministic time grid with every breakpoint placed exactly."""
    wins = fine_windows_for(netlist, config)
    bps = {0.0, float(config.t_stop)}
    for a, b in wins:
        bps.update((a, b))
    for dev in netlist.devices:
        if isinstance(dev, (ISource, VSource)):
            bps.update(waveform_breakpoints(dev.waveform, config.t_stop))
    pts = sorted(bps)
    merged = [pts[0]]
    for t in pts[1:]:
        if t - merged[-1] > 1e-18:
            merged.append(t)
    chunks = []
    for a, b in zip(merged, merged[1:]):
        mid = 0.5 * (a + b)
        fine = any(lo <= mid <= hi for lo, hi in wins)
        step = config.dt_fine if fine else config.dt_nominal
        n = max(1, math.ceil((b - a) / step - 1e-9))
        seg = a + (b - a) * np.arange(n) / n
        chunks.append(seg)
    chunks.append(np.array([merged[-1]]))
    return np.concatenate(chunks)


@dataclass
class Trace:
    times: np.ndarray
    node_names: list
    node_voltages: np.ndarray  # (n_points, n_nodes)
    supply_currents: dict
    methods: np.ndarray
    report_nodes: list

    def __post_init__(self):
        self._col = {n: i for i, n in enumerate(self.node_names)}

    def __len__(self):
        return len(self.times)

    def v(self, node: str) -> np.ndarray:
        return self.node_voltages[:, self._col[node.lower()]]

    @property
    def voltages(self) -> dict:
        return {n: self.v(n) for n in self.report_nodes}

    def value_at(self, node: str, t: float) -> float:
        if not self.times[0] <= t <= self.times[-1]:
            raise ValueError(f"t={t} outside trace [{self.times[0]}, {self.times[-1]}]")
        return float(np.interp(t, self.times, self.v(node)))

    def state_at(self, t: float) -> dict:
        return {n: self.value_at(n, t) for n in self.node_names}

    def point(self, k: int) -> dict:
        return {n: float(self.node_voltages[k, i]) for i, n in enumerate(self.node_names)}

    def write_csv(self, fh) -> None:
        """CSV with columns ``t_s, <node>..., i_<vsource>_a`` at full precision."""
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s"] + list(self.report_nodes) + [f"i_{s}_a" for s in self.supply_currents])
        cols = [self.v(n) for n in self.report_nodes] + list(self.supply_currents.values())
        for k, t in enumerate(self.times):
            w.writerow([f"{t:.17g}"] + [f"{c[k]:.17g}" for c in cols])


def transient(netlist: Netlist, config: SimConfig, report_nodes: Iterable[str] | None = None) -> Trace:
    """Transient analysis from the DC point at t=0 up to ``config.t_stop``."""
    if config.t_stop <= 0:
        raise ValueError("t_stop must be positive")
    c = compile_netlist(netlist, config)
    grid = time_grid(netlist, config)
    v0, ib0, node_i = _solve_dc(c, config, 0.0)
    sup0 = np.zeros(len(c.vs_names))
    _supply(v0, ib0, node_i, c.fixed_src, c.fixed_sign, c.vs_i, sup0)
    times, vv, ii, meth, status, fail_t, fail_row, fail_res = _transient_kernel(
        grid, v0, ib0, config.gmin, config.dt_fine / 64.0, config.max_newton_iters, config.v_tol, config.i_tol,
        c.row, c.fixed_src, c.fixed_sign, c.mos_i, c.mos_f, c.cap_i, c.cap_c, c.vs_i, c.vs_par,
        c.is_i, c.is_par, c.pwl_t, c.pwl_v, sup0,
    )
    if status:
        node = _row_name(c, fail_row)
        raise StepUnderflow(
            f"transient step underflow at t={fail_t:.6g}s (worst {node}, residual {fail_res:.3g} A)",
            time=fail_t,
        )
    reported = [n.lower() for n in report_nodes] if report_nodes is not None else list(c.node_names)
    for n in reported:
        if n not in c.index:
            raise KeyError(f"unknown node {n!r}")
    return Trace(
        times=times, node_names=list(c.node_names), node_voltages=vv,
        supply_currents={name: ii[:, k] for k, name in enumerate(c.vs_names)},
        methods=meth, report_nodes=reported,
    )


# -- independent residual check ---------------------------------------------


def _ids_numpy(pol, vd, vg, vs, vth, beta, lam):
    """Vectorised square-law channel current (drain to source), written independently of the kernel."""
    d, g, s = pol * vd, pol * vg, pol * vs
    fwd = d >= s
    hi = np.where(fwd, d, s)
    lo = np.where(fwd, s, d)
    vgs = g - lo
    vds = hi - lo
    vov = vgs - vth
    on = vov > 0
    sat = vds >= vov
    tri = beta * (vov * vds - 0.5 * vds**2) * (1 + lam * vds)
    satc = 0.5 * beta * vov**2 * (1 + lam * vds)
    i = np.where(on, np.where(sat, satc, tri), 0.0)
    return pol * np.where(fwd, i, -i)


def _static_currents(netlist: Netlist, config: SimConfig, volt: Mapping[str, np.ndarray], t, branch):
    """Per-node currents leaving through channels, GMIN and current sources."""
    rails = rail_nodes(netlist)
    floating = floating_vsources(netlist)
    env = config.env
    out = {n: np.zeros_like(np.asarray(t, dtype=float)) for n in netlist.nodes}
    for dev in netlist.devices:
        if isinstance(dev, Mosfet):
            p = netlist.model_params(dev)
            pol = 1.0 if dev.polarity == "N" else -1.0
            i = _ids_numpy(pol, volt[dev.drain], volt[dev.gate], volt[dev.source],
                           p.vth_abs(env), p.kp(env) * dev.w_over_l, p.lam)
            out[dev.drain] = out[dev.drain] + i
            out[dev.source] = out[dev.source] - i
        elif isinstance(dev, ISource):
            val = _wave_numpy(dev.waveform, t)
            out[dev.n_plus] = out[dev.n_plus] + val
            out[dev.n_minus] = out[dev.n_minus] - val
        elif isinstance(dev, VSource) and dev.name in floating:
            cur = branch[dev.name]
            out[dev.n_plus] = out[dev.n_plus] - cur
            out[dev.n_minus] = out[dev.n_minus] + cur
    for n in netlist.nodes:
        if n not in rails:
            out[n] = out[n] + config.gmin * volt[n]
    return out


def _wave_numpy(w, t):
    t = np.asarray(t, dtype=float)
    if isinstance(w, DoubleExp):
        x = np.maximum(t - w.t_start, 0.0)
        val = w.sign * w.q_inj / (w.tau1 - w.tau2) * (np.exp(-x / w.tau1) - np.exp(-x / w.tau2))
        return np.where(t >= w.t_start, val, 0.0)
    flat = np.array([waveform_value(w, tt) for tt in t.ravel()])
    return flat.reshape(t.shape)


def _capacitances(netlist: Netlist, config: SimConfig) -> list[tuple[str, str, float]]:
    rails = rail_nodes(netlist)
    caps = []
    for dev in netlist.devices:
        if isinstance(dev, Mosfet):
            caps.append((dev.gate, GROUND, netlist.model_params(dev).cg0 * dev.w_over_l))
        elif isinstance(dev, Capacitor):
            caps.append((dev.n1, dev.n2, dev.value))
    caps += [(n, GROUND, config.node_cap_floor) for n in sorted(netlist.nodes) if n not in rails]
    return caps


def _residual_arrays(netlist, config, v1, t1, br1, v0=None, t0=None, br0=None, method=METHOD_TRAP):
    rails = rail_nodes(netlist)
    s1 = _static_currents(netlist, config, v1, t1, br1)
    if v0 is None:
        total = s1
    else:
        h = np.asarray(t1) - np.asarray(t0)
        s0 = _static_currents(netlist, config, v0, t0, br0)
        trap = np.asarray(method) == METHOD_TRAP
        total = {n: np.where(trap, 0.5 * (s1[n] + s0[n]), s1[n]) for n in s1}
        for a, b, cval in _capacitances(netlist, config):
            i = cval * ((v1[a] - v1[b]) - (v0[a] - v0[b])) / h
            total[a] = total[a] + i
            total[b] = total[b] - i
    free = [n for n in netlist.nodes if n not in rails]
    if not free:
        return np.zeros(np.shape(t1))
    return np.max(np.abs(np.stack([np.asarray(total[n], dtype=float) for n in free])), axis=0)


def kcl_residual(netlist: Netlist, config: SimConfig, voltages: Mapping[str, float], t: float,
                 previous: tuple | None = None, method: int = METHOD_TRAP,
                 branch_currents: Mapping[str, float] | None = None) -> float:
    """Largest KCL imbalance (A) over non-rail nodes for a candidate solution.

    Without ``previous`` the point is checked as a DC solution (capacitors
    open).  With ``previous=(voltages_prev, t_prev)`` it is checked as an
    integration step: backward Euler, or for the trapezoidal rule the average
    of both end points' static currents plus C*dV/h, which holds exactly when
    both end points satisfy their own step equations.
    """
    br = {k: np.float64(x) for k, x in (branch_currents or {}).items()}
    v1 = {n: np.float64(voltages[n]) for n in netlist.nodes}
    if previous is None:
        return float(_residual_arrays(netlist, config, v1, np.float64(t), br))
    vp, tp = previous
    v0 = {n: np.float64(vp[n]) for n in netlist.nodes}
    return float(_residual_arrays(netlist, config, v1, np.float64(t), br, v0, np.float64(tp), br, method))


def trace_residuals(netlist: Netlist, config: SimConfig, trace: Trace) -> np.ndarray:
    """Independent per-point residual recheck of a whole trace (vectorised)."""
    col = {n: trace.v(n) for n in netlist.nodes}
    br = {k: v for k, v in trace.supply_currents.items()}
    out = np.empty(len(trace))
    out[0] = _residual_arrays(netlist, config, {n: c[:1] for n, c in col.items()}, trace.times[:1],
                              {k: v[:1] for k, v in br.items()})[0]
    if len(trace) > 1:
        v1 = {n: c[1:] for n, c in col.items()}
        v0 = {n: c[:-1] for n, c in col.items()}
        out[1:] = _residual_arrays(netlist, config, v1, trace.times[1:], {k: v[1:] for k, v in br.items()},
                                   v0, trace.times[:-1], {k: v[:-1] for k, v in br.items()}, trace.methods[1:])
    return out
