"""Command-line front end: ``locosim <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

from . import __version__
from .cells import CellKind, build_cell
from .devices import EnvCondition
from .engine import SimConfig, SimulationError, transient
from .netlist import NetlistError, parse_netlist, parse_value, serialize, validate

logger = logging.getLogger("locosim")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


class UsageError(Exception):
    pass


def _value(text: str) -> float:
    try:
        return parse_value(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _kind(text: str) -> CellKind:
    try:
        return CellKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _latch(text: str) -> CellKind:
    kind = _kind(text)
    if kind not in (CellKind.LOCO, CellKind.STANDARD_LATCH):
        raise argparse.ArgumentTypeError(f"{text!r} is not a latch (use loco or standard)")
    return kind


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--dt", type=_value, default=None, help="nominal time step, e.g. 50f")
    common.add_argument("--out", default=None, help="directory for output files (default: stdout)")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="report container")
    common.add_argument("--long", action="store_true", help="full-size runs (e.g. 2000 Monte Carlo samples)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--vdd", type=float, default=0.8, help="supply voltage in V")
    common.add_argument("--temp", type=float, default=27.0, help="temperature in degC")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="locosim", description="Transistor-level latch simulation and SNU analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    cells = sub.add_parser("cells", parents=[common], help="cell generators")
    cells_sub = cells.add_subparsers(dest="action", required=True)
    dump = cells_sub.add_parser("dump", parents=[common], help="print a cell netlist")
    dump.add_argument("--kind", type=_kind, required=True)

    tt = sub.add_parser("truthtable", parents=[common], help="simulate the OSC truth table")
    tt.add_argument("--cell", default="osc", choices=("osc",))

    sim = sub.add_parser("simulate", parents=[common], help="transient simulation of a netlist file")
    sim.add_argument("--netlist", required=True)
    sim.add_argument("--tstop", type=_value, required=True)
    sim.add_argument("--report", default=None, help="comma-separated nodes (default: all)")

    camp = sub.add_parser("campaign", parents=[common], help="single-node-upset injection campaign")
    camp.add_argument("--latch", type=_latch, required=True)
    camp.add_argument("--qinj", type=_value, default=2.5e-15, help="injected charge, e.g. 2.5f")
    camp.add_argument("--schedule", choices=("default", "hold"), default="default")
    camp.add_argument("--mode", choices=("hold", "transparent"), default="hold")
    camp.add_argument("--nodes", default=None, help="comma-separated node subset")

    met = sub.add_parser("metrics", parents=[common], help="latch figures of merit")
    met.add_argument("--latch", type=_latch, required=True)
    met.add_argument("--no-qcrit", action="store_true", help="skip the critical-charge search")

    cmp_ = sub.add_parser("compare", parents=[common], help="relative deltas against a baseline latch")
    cmp_.add_argument("--latch", type=_latch, required=True)
    cmp_.add_argument("--baseline", type=_latch, required=True)
    cmp_.add_argument("--no-qcrit", action="store_true")

    sc = sub.add_parser("shortcircuit", parents=[common], help="average supply current, CLK held high")
    sc.add_argument("--latch", type=_latch, required=True)

    pvt = sub.add_parser("pvt", parents=[common], help="single-axis PVT sweep")
    pvt.add_argument("--latch", type=_latch, required=True)
    pvt.add_argument("--axis", choices=("vth", "temp", "vdd"), required=True)

    mc = sub.add_parser("mc", parents=[common], help="Monte Carlo spread of power and delay")
    mc.add_argument("--latch", type=_latch, required=True)
    mc.add_argument("--samples", type=int, default=None, help="default 100, or 2000 with --long")
    mc.add_argument("--temp-sigma", type=float, default=20.0, help="temperature sigma in degC")
    return p


def _config(args, dt_default: float = 50e-15) -> SimConfig:
    dt = args.dt if args.dt is not None else dt_default
    return SimConfig(env=EnvCondition(temperature=args.temp, vdd=args.vdd), dt_nominal=dt,
                     dt_fine=min(1e-15, dt))


def _run_header(args, config: SimConfig) -> dict:
    resolved = {k: (v.value if isinstance(v, CellKind) else v) for k, v in sorted(vars(args).items())
                if k not in ("out", "verbose", "jobs")}
    return {"version": __version__, "seed": args.seed, "args": resolved, "config": config.as_dict()}


def _emit(args, name: str, text: str) -> None:
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, name), "w", newline="") as fh:
            fh.write(text)
        logger.info("wrote %s", os.path.join(args.out, name))
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


# -- commands -----------------------------------------------------------------


def cmd_cells(args) -> int:
    _emit(args, f"{args.kind.value}.sp", serialize(build_cell(args.kind).netlist))
    return EXIT_OK


def cmd_truthtable(args) -> int:
    from .experiments import osc_truth_table

    config = _config(args)
    cases = osc_truth_table(config)
    ok = all(c.passed for c in cases)
    if args.format == "json":
        _emit(args, "truthtable.json", _json({"run": _run_header(args, config), "pass": ok,
                                              "cases": [c.as_dict() for c in cases]}))
    else:
        rows = [["i1", "i2", "prior_i1", "prior_i2", "o1", "o2", "v_o1", "v_o2", "result"]]
        for c in cases:
            rows.append([*c.inputs, *c.prior, *c.expected, f"{c.measured[0]:.4f}", f"{c.measured[1]:.4f}",
                         "PASS" if c.passed else "FAIL"])
        _emit(args, "truthtable.csv", _csv(rows))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_simulate(args) -> int:
    with open(args.netlist) as fh:
        netlist = parse_netlist(fh.read())
    errors = [d for d in validate(netlist) if d.severity == "error"]
    for d in validate(netlist):
        logger.warning("%s: %s", d.severity, d.message)
    if errors:
        raise UsageError("; ".join(d.message for d in errors))
    report = args.report.split(",") if args.report else None
    trace = transient(netlist, _config(args).with_(t_stop=args.tstop), report_nodes=report)
    buf = io.StringIO()
    trace.write_csv(buf)
    _emit(args, "waveform.csv", buf.getvalue())
    return EXIT_OK


def cmd_campaign(args) -> int:
    from .fault import CampaignSpec, run_campaign

    config = _config(args)
    nodes = tuple(args.nodes.split(",")) if args.nodes else ()
    spec = CampaignSpec(args.latch, nodes=nodes, q_inj=args.qinj, schedule=args.schedule, mode=args.mode)
    result = run_campaign(spec, config)
    report = result.as_dict()
    report["run"] = _run_header(args, config)
    if args.format == "json":
        _emit(args, "campaign.json", _json(report))
    else:
        keys = ["node", "t_start_ns", "stored", "classification", "v_excursion_mV", "t_recover_ps"]
        _emit(args, "campaign.csv", _csv([keys] + [[o[k] for k in keys] for o in report["outcomes"]]))
    counts = result.counts()
    logger.info("%s: %s", spec.latch.value, counts)
    return EXIT_OK if result.all_recovered else EXIT_FAIL


def _metrics(latch, config, qcrit: bool):
    from .metrics import measure_latch

    return measure_latch(latch, config, with_qcrit=qcrit)


def cmd_metrics(args) -> int:
    config = _config(args)
    m = _metrics(args.latch, config, not args.no_qcrit)
    report = m.as_dict()
    if args.format == "json":
        report["run"] = _run_header(args, config)
        _emit(args, "metrics.json", _json(report))
    else:
        _emit(args, "metrics.csv", _csv([list(report), list(report.values())]))
    return EXIT_OK


def cmd_compare(args) -> int:
    from .metrics import ExceedsBound, relative_delta

    config = _config(args)
    qcrit = not args.no_qcrit
    a = _metrics(args.latch, config, qcrit)
    b = _metrics(args.baseline, config, qcrit)
    fields = {"n_trans": "transistor_count", "power": "power", "t_avg": "t_avg", "pdp": "pdp",
              "t_setup": "t_setup", "t_hold": "t_hold", "q_crit": "q_crit"}
    deltas = {}
    for key, attr in fields.items():
        x, y = getattr(a, attr), getattr(b, attr)
        if x is None or y is None or isinstance(x, ExceedsBound) or isinstance(y, ExceedsBound) or y == 0:
            deltas[key] = None
        else:
            deltas[key] = relative_delta(x, y) * 100
    report = {"latch": a.latch, "baseline": b.latch, "delta_percent": deltas,
              "latch_metrics": a.as_dict(), "baseline_metrics": b.as_dict()}
    if args.format == "json":
        report["run"] = _run_header(args, config)
        _emit(args, "compare.json", _json(report))
    else:
        _emit(args, "compare.csv", _csv([["quantity", "delta_percent"]] + [[k, v] for k, v in deltas.items()]))
    return EXIT_OK


def cmd_shortcircuit(args) -> int:
    from .experiments import short_circuit_protocol

    config = _config(args)
    i_avg = short_circuit_protocol(args.latch, config)
    report = {"latch": args.latch.value, "avg_current_uA": i_avg * 1e6, "t0_ps": 50.0, "t1_ps": 250.0,
              "d_edges_ps": [80.0, 170.0]}
    if args.format == "json":
        report["run"] = _run_header(args, config)
        _emit(args, "shortcircuit.json", _json(report))
    else:
        _emit(args, "shortcircuit.csv", _csv([list(report), list(report.values())]))
    return EXIT_OK


def cmd_pvt(args) -> int:
    from .experiments import pvt_sweep

    config = _config(args)
    res = pvt_sweep(args.latch, args.axis, config, jobs=args.jobs)
    buf = io.StringIO()
    res.write_csv(buf)
    summary = res.summary()
    summary["run"] = _run_header(args, config)
    if args.out:
        _emit(args, f"pvt_{args.axis}.csv", buf.getvalue())
        _emit(args, f"pvt_{args.axis}_summary.json", _json(summary))
    elif args.format == "csv":
        _emit(args, "", buf.getvalue())
    else:
        _emit(args, "", _json(summary))
    return EXIT_OK


def cmd_mc(args) -> int:
    from .experiments import McConfig, monte_carlo

    n = args.samples if args.samples is not None else (2000 if args.long else 100)
    config = _config(args, dt_default=50e-15 if args.long else 100e-15)
    mc = McConfig(n_samples=n, seed=args.seed, temp_sigma=args.temp_sigma, vdd_nominal=args.vdd)
    res = monte_carlo(args.latch, mc, config, jobs=args.jobs)
    buf = io.StringIO()
    res.write_csv(buf)
    summary = res.summary()
    summary["run"] = _run_header(args, config)
    if args.out:
        _emit(args, "mc_samples.csv", buf.getvalue())
        _emit(args, "mc_summary.json", _json(summary))
    elif args.format == "csv":
        _emit(args, "", buf.getvalue())
    else:
        _emit(args, "", _json(summary))
    return EXIT_OK


COMMANDS = {
    "cells": cmd_cells, "truthtable": cmd_truthtable, "simulate": cmd_simulate, "campaign": cmd_campaign,
    "metrics": cmd_metrics, "compare": cmd_compare, "shortcircuit": cmd_shortcircuit, "pvt": cmd_pvt, "mc": cmd_mc,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, NetlistError, SimulationError, ValueError, KeyError, OSError) as exc:
        print(f"locosim: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
