"""Command-line entry points.

Subcommands: `plan` (macroscopic only), `simulate` (full run with CSV,
SVG, plan and metrics artifacts), `metrics` (recompute the report from an
exported CSV) and `render` (redraw the trajectory figure from a CSV).

Exit codes: 0 success, 2 scenario validation or parse failure, 3 planner
infeasibility or timeout, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .gauss import w2_gmm
from .harness import (
    IoError,
    ParseError,
    RunAborted,
    TrajectoryLog,
    ValidationError,
    compute_metrics,
    export,
    load_scenario,
    log_from_csv,
    run,
)
from .lp import LpFailure
from .planner import PlannerError, plan_full

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PLANNER = 3
EXIT_IO = 4


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rover",
        description="Risk-aware macroscopic swarm planning and simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser(
        "plan", help="run the macroscopic planner only")
    p_plan.add_argument("scenario", type=Path)
    p_plan.add_argument("--out", type=Path, default=Path("plan.json"))

    p_sim = sub.add_parser(
        "simulate", help="full run; writes csv, svg, plan and metrics")
    p_sim.add_argument("scenario", type=Path)
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    p_sim.add_argument("--out", type=Path, default=Path("out"),
                       help="output directory")

    p_met = sub.add_parser(
        "metrics", help="recompute metrics from an exported csv")
    p_met.add_argument("log", type=Path)
    p_met.add_argument("scenario", type=Path)

    p_ren = sub.add_parser(
        "render", help="draw the trajectory figure from an exported csv")
    p_ren.add_argument("log", type=Path)
    p_ren.add_argument("scenario", type=Path)
    p_ren.add_argument("--out", type=Path, default=Path("trajectories.svg"))
    return parser


def _cmd_plan(args) -> int:
    scenario = load_scenario(args.scenario)
    run_result = plan_full(scenario)
    log = TrajectoryLog(
        positions=np.empty((0, scenario.robot_count, 2)),
        robot_radius=0.12,
        micro_per_macro=scenario.micro_per_macro,
        macro_steps=len(run_result.steps),
        completed=True,
        planned=tuple(s.next_gmm for s in run_result.steps),
        plans=tuple(s.plan for s in run_result.steps),
        plan_seconds=tuple(s.solve_seconds for s in run_result.steps),
    )
    export(log, "plan-json", args.out, scenario)
    final = w2_gmm(run_result.states[-1], scenario.target)[0]
    print(f"planned {len(run_result.steps)} macro steps; "
          f"final transport distance {final:.3f} m "
          f"(floor {run_result.w2_floor:.3f} m); wrote {args.out}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        log, metrics = run(scenario)
    except RunAborted as exc:
        if exc.log is not None and exc.log.positions.shape[0]:
            export(exc.log, "csv", args.out / "trajectory.csv", scenario)
            export(exc.log, "plan-json", args.out / "plan.json", scenario)
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_PLANNER
    export(log, "csv", args.out / "trajectory.csv", scenario)
    export(log, "svg", args.out / "trajectory.svg", scenario)
    export(log, "plan-json", args.out / "plan.json", scenario)
    payload = metrics.to_dict()
    with open(args.out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    print(json.dumps(payload, indent=1))
    if not log.completed:
        print("macro-step budget exhausted before termination",
              file=sys.stderr)
        return EXIT_PLANNER
    return EXIT_OK


def _cmd_metrics(args) -> int:
    scenario = load_scenario(args.scenario)
    log = log_from_csv(args.log, scenario)
    metrics = compute_metrics(log, scenario)
    print(json.dumps(metrics.to_dict(), indent=1))
    return EXIT_OK


def _cmd_render(args) -> int:
    scenario = load_scenario(args.scenario)
    log = log_from_csv(args.log, scenario)
    export(log, "svg", args.out, scenario)
    print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {
        "plan": _cmd_plan,
        "simulate": _cmd_simulate,
        "metrics": _cmd_metrics,
        "render": _cmd_render,
    }
    try:
        return handlers[args.command](args)
    except (ParseError, ValidationError) as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PlannerError, LpFailure) as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return EXIT_PLANNER
    except IoError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
