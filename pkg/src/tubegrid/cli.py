"""Command-line front end: run scenarios, compare controllers, emit reports.

Exit codes: 0 clean run, 1 usage or config problem, 2 simulation failure,
3 run finished but monitor violations were recorded.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import gridsim
from .config import ConfigError, ScenarioConfig, parse_config, with_updates

log = logging.getLogger(__name__)

_CONTROLLERS = ("lrmpc", "rmpc", "mpc", "pi")


@dataclass
class RunReport:
    """Summary of one scenario run."""

    controller: str
    thd_percent: float
    fundamental_rms: float
    feasibility_violations: int
    lyapunov_violations: int
    tube_violations: int
    wall_per_step: float

    def as_dict(self):
        return {
            "controller": self.controller,
            "thd_percent": self.thd_percent,
            "fundamental_rms": self.fundamental_rms,
            "feasibility_violations": self.feasibility_violations,
            "lyapunov_violations": self.lyapunov_violations,
            "tube_violations": self.tube_violations,
            "wall_per_step_s": self.wall_per_step,
        }

    @property
    def total_violations(self):
        return (self.feasibility_violations + self.lyapunov_violations
                + self.tube_violations)


def _report_from_trace(trace, scenario, controller):
    counts = trace.monitor_counts(prefix="" if "vd" in trace.columns else "dg1_")
    thd_rep = None
    window = scenario.thd_cycles
    if "vd" in trace.columns:
        thd_rep = trace.voltage_thd(scenario.f0, window)
    else:
        thd_rep = trace.voltage_thd(scenario.f0, window, prefix="dg1_")
    return RunReport(controller=controller,
                     thd_percent=thd_rep.worst,
                     fundamental_rms=thd_rep.fundamental_rms,
                     feasibility_violations=counts["feasibility"],
                     lyapunov_violations=counts["lyapunov"],
                     tube_violations=counts["tube"],
                     wall_per_step=trace.meta.get("wall_per_step", 0.0))


def cmd_run(scenario: ScenarioConfig, controller: str, out_dir: str):
    """Execute one scenario and write the trace CSV plus a JSON report."""
    os.makedirs(out_dir, exist_ok=True)
    if scenario.droop_enabled:
        trace = gridsim.run_two_dg(scenario)
    else:
        trace = gridsim.run_single_dg(scenario, controller)
    trace_path = os.path.join(out_dir, f"trace_{controller}.csv")
    trace.to_csv(trace_path)
    if trace.n_steps == 0:
        report = RunReport(controller=controller, thd_percent=0.0,
                           fundamental_rms=0.0, feasibility_violations=0,
                           lyapunov_violations=0, tube_violations=0,
                           wall_per_step=0.0)
    else:
        report = _report_from_trace(trace, scenario, controller)
    with open(os.path.join(out_dir, f"report_{controller}.json"), "w") as fh:
        json.dump(report.as_dict(), fh, indent=2)
    return report, trace_path


def cmd_compare(scenario: ScenarioConfig, controllers, out_dir: str):
    """Run several controllers on the same seed and scenario; tabulate THD."""
    if len(controllers) < 2:
        raise ConfigError("compare needs at least two controllers")
    os.makedirs(out_dir, exist_ok=True)
    reports = []
    for kind in controllers:
        report, _ = cmd_run(scenario, kind, out_dir)
        reports.append(report)
    table_path = os.path.join(out_dir, "comparison.csv")
    with open(table_path, "w") as fh:
        fh.write("controller,thd_percent,feasibility_violations,"
                 "lyapunov_violations,tube_violations\n")
        for rep in reports:
            fh.write(f"{rep.controller},{rep.thd_percent:.6f},"
                     f"{rep.feasibility_violations},{rep.lyapunov_violations},"
                     f"{rep.tube_violations}\n")
    return reports, table_path


def _format_table(reports):
    lines = ["controller   THD%     feas  lyap  tube"]
    for rep in reports:
        lines.append(f"{rep.controller:<10}  {rep.thd_percent:7.3f}  "
                     f"{rep.feasibility_violations:5d} {rep.lyapunov_violations:5d} "
                     f"{rep.tube_violations:5d}")
    return "\n".join(lines)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tubegrid",
        description="Tube-MPC voltage control simulator for islanded microgrids")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--controller", default="lrmpc", choices=_CONTROLLERS)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default="out")

    p_cmp = sub.add_parser("compare", help="run several controllers on one scenario")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--controllers", default="lrmpc,rmpc,mpc,pi")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--out", default="out")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("TUBEGRID_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0

    try:
        scenario = parse_config(args.config)
        if args.seed is not None:
            scenario = with_updates(scenario, seed=args.seed)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "run":
            report, trace_path = cmd_run(scenario, args.controller, args.out)
            print(_format_table([report]))
            print(f"trace: {trace_path}")
            return 3 if report.total_violations else 0
        controllers = [c.strip() for c in args.controllers.split(",") if c.strip()]
        for c in controllers:
            if c not in _CONTROLLERS:
                print(f"unknown controller '{c}'", file=sys.stderr)
                return 1
        try:
            reports, table_path = cmd_compare(scenario, controllers, args.out)
        except ConfigError as exc:
            print(f"usage error: {exc}", file=sys.stderr)
            return 1
        print(_format_table(reports))
        print(f"table: {table_path}")
        return 3 if any(r.total_violations for r in reports) else 0
    except gridsim.SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return 2
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
