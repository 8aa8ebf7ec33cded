"""Scenario files, the end-to-end simulation driver, metrics and exports.

A scenario is one JSON document holding the workspace, obstacles, initial
and target mixtures, the planner and controller parameters, the robot
count and the seed.  run() interleaves one macroscopic planning step with
a fixed number of microscopic control steps until every robot sits inside
the 3-sigma ellipse of some target component and the planned mixture has
converged in transport distance, or until the macro-step budget runs out.

Logged positions are quantized to 12 significant digits at record time, so
exported CSV files round-trip exactly and recomputing metrics from a CSV
reproduces the original report.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .gauss import Gaussian2, Gmm, make_rng, sample, w2_gmm
from .geometry import PolygonError, signed_distance_batch, validate_polygon
from .micro import ApfParams, RobotState, assign_targets, step_swarm
from .planner import (
    FtmpcConfig,
    PlannerError,
    PlannerTables,
    opti_gmm,
    prepare,
    shift_plan,
    target_floor,
)
from .risk import RiskParams, cvar_gmm

__all__ = [
    "ParseError",
    "ValidationError",
    "EmptyLog",
    "UnsupportedFormat",
    "IoError",
    "RunAborted",
    "Scenario",
    "TrajectoryLog",
    "MetricsReport",
    "load_scenario",
    "scenario_from_dict",
    "run",
    "compute_metrics",
    "export",
    "log_from_csv",
]

_SIGMA_BOUND = 9.0          # squared Mahalanobis radius of the 3-sigma region
_CVAR_RECHECK_TOL = 1e-6    # harness allowance when re-verifying planned risk


class ParseError(ValueError):
    """The scenario file is not syntactically valid."""


class ValidationError(ValueError):
    """The scenario violates a structural or probabilistic invariant."""


class EmptyLog(ValueError):
    """Metrics were requested for a log with no position records."""


class UnsupportedFormat(ValueError):
    """export() was asked for an unknown format."""


class IoError(RuntimeError):
    """Reading or writing an artifact failed."""


class RunAborted(RuntimeError):
    """The planner gave up mid-run; partial logs are attached."""

    def __init__(self, message: str, log: "TrajectoryLog | None" = None):
        super().__init__(message)
        self.log = log


# ---- scenario ----------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Everything one experiment needs, validated on construction."""

    workspace: tuple
    spacing: float
    shared_cov: np.ndarray
    obstacles: tuple
    initial: Gmm
    target: Gmm
    robot_count: int
    seed: int
    micro_per_macro: int = 50
    ftmpc: FtmpcConfig = FtmpcConfig()
    apf: ApfParams = ApfParams()

    def __post_init__(self):
        (x0, x1), (y0, y1) = self.workspace
        if not (x1 > x0 and y1 > y0):
            raise ValidationError("workspace must have positive area")
        if self.robot_count < 1:
            raise ValidationError("robot_count must be at least 1")
        if self.micro_per_macro < 1:
            raise ValidationError("micro_per_macro must be at least 1")
        for i, poly in enumerate(self.obstacles):
            v = poly.vertices
            if (np.any(v[:, 0] < x0) or np.any(v[:, 0] > x1)
                    or np.any(v[:, 1] < y0) or np.any(v[:, 1] > y1)):
                raise ValidationError(
                    f"obstacle {i} has a vertex outside the workspace")
        peak = 1.0 / (2.0 * np.pi * np.sqrt(
            np.linalg.det(np.asarray(self.shared_cov, dtype=float))))
        heaviest = float(np.max(self.initial.weights))
        if heaviest * peak > self.ftmpc.density_bound:
            warnings.warn(
                f"initial component weight {heaviest} already exceeds the "
                f"density bound (peak {heaviest * peak:.4g} > "
                f"{self.ftmpc.density_bound}); planning may be infeasible",
                stacklevel=2)


def _require(mapping, field, kind, where):
    if field not in mapping:
        raise ParseError(f"{where}: missing field {field!r}")
    value = mapping[field]
    if kind is float and isinstance(value, (int, float)):
        return float(value)
    if kind is int and isinstance(value, int):
        return value
    if kind is not None and not isinstance(value, kind):
        raise ParseError(
            f"{where}: field {field!r} should be {kind.__name__}, "
            f"got {type(value).__name__}")
    return value


def _parse_gmm(node, where) -> Gmm:
    comps = _require(node, "components", list, where)
    weights = _require(node, "weights", list, where)
    try:
        parts = tuple(
            Gaussian2(np.asarray(_require(c, "mean", list, f"{where}component"),
                                 dtype=float),
                      np.asarray(_require(c, "cov", list, f"{where}component"),
                                 dtype=float))
            for c in comps)
        return Gmm(parts, np.asarray(weights, dtype=float))
    except ValueError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def scenario_from_dict(doc: dict) -> Scenario:
    """Build and validate a Scenario from parsed JSON."""
    where = "scenario"
    ws = _require(doc, "workspace", list, where)
    try:
        workspace = ((float(ws[0][0]), float(ws[0][1])),
                     (float(ws[1][0]), float(ws[1][1])))
    except (TypeError, IndexError, ValueError) as exc:
        raise ParseError(f"{where}: workspace must be [[x0,x1],[y0,y1]]") from exc
    try:
        obstacles = tuple(
            validate_polygon(np.asarray(v, dtype=float))
            for v in _require(doc, "obstacles", list, where))
    except PolygonError as exc:
        raise ValidationError(f"{where}: bad obstacle: {exc}") from exc
    fcfg = dict(doc.get("ftmpc", {}))
    risk = RiskParams(float(fcfg.pop("alpha", 0.05)),
                      float(fcfg.pop("epsilon", -0.2)))
    if "lambdas" in fcfg:
        fcfg["lambdas"] = tuple(float(v) for v in fcfg["lambdas"])
    try:
        ftmpc = FtmpcConfig(risk=risk, **fcfg)
        apf = ApfParams(**doc.get("apf", {}))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc
    cov_node = _require(doc, "shared_cov", list, where)
    try:
        shared_cov = np.asarray(cov_node, dtype=float)
    except ValueError as exc:
        raise ParseError(f"{where}: shared_cov is not numeric: {exc}") from exc
    if shared_cov.shape != (2, 2):
        raise ValidationError(
            f"{where}: shared_cov must be 2x2, got {shared_cov.shape}")
    return Scenario(
        workspace=workspace,
        spacing=_require(doc, "spacing", float, where),
        shared_cov=shared_cov,
        obstacles=obstacles,
        initial=_parse_gmm(_require(doc, "initial", dict, where),
                           f"{where}.initial "),
        target=_parse_gmm(_require(doc, "target", dict, where),
                          f"{where}.target "),
        robot_count=_require(doc, "robot_count", int, where),
        seed=_require(doc, "seed", int, where),
        micro_per_macro=int(doc.get("micro_per_macro", 50)),
        ftmpc=ftmpc,
        apf=apf,
    )


def load_scenario(path) -> Scenario:
    """Read and validate a scenario JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path} line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    return scenario_from_dict(doc)


# ---- trajectory log ------------------------------------------------------------


def _quantize(points: np.ndarray) -> np.ndarray:
    """Round to 12 significant digits, the CSV text precision."""
    flat = [float(f"{v:.12g}") for v in np.asarray(points, dtype=float).ravel()]
    return np.array(flat).reshape(np.shape(points))


@dataclass(frozen=True)
class TrajectoryLog:
    """Position records plus the planned macro-step sequence and timings."""

    positions: np.ndarray       # (n_records, n_robots, 2), quantized
    robot_radius: float
    micro_per_macro: int
    macro_steps: int
    completed: bool
    planned: tuple = ()         # Gmm per macro step
    plans: tuple = ()           # TransportPlan per macro step
    plan_seconds: tuple = ()    # opti_gmm wall clock per macro step
    cvar_worst: tuple = ()      # re-verified worst CVaR per macro step
    prep_seconds: float = 0.0
    loop_seconds: float = 0.0   # planning + control, excludes preparation
    has_timing: bool = True

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 3 or (pos.size and pos.shape[2] != 2):
            raise ValueError("positions must have shape (records, robots, 2)")
        object.__setattr__(self, "positions", pos)
        if self.planned and len(self.planned) != self.macro_steps:
            raise ValueError("one planned mixture per macro step required")


def _within_three_sigma(positions: np.ndarray, target: Gmm) -> bool:
    ok = np.zeros(positions.shape[0], dtype=bool)
    for comp in target.components:
        d = positions - comp.mean
        quad = np.einsum("ni,ij,nj->n", d, np.linalg.inv(comp.cov), d)
        ok |= quad <= _SIGMA_BOUND
        if ok.all():
            return True
    return bool(ok.all())


def _sample_robots(scenario: Scenario) -> list:
    """Rejection-sample starting positions: inside the workspace, clear of
    every obstacle by at least one body radius."""
    (x0, x1), (y0, y1) = scenario.workspace
    radius = RobotState.__dataclass_fields__["radius"].default
    rng = make_rng((scenario.seed, 0))
    out = []
    while len(out) < scenario.robot_count:
        need = scenario.robot_count - len(out)
        draw = sample(scenario.initial, rng, max(4 * need, 32))
        keep = ((draw[:, 0] >= x0) & (draw[:, 0] <= x1)
                & (draw[:, 1] >= y0) & (draw[:, 1] <= y1))
        for poly in scenario.obstacles:
            sd, _, _ = signed_distance_batch(draw, poly)
            keep &= sd > radius
        out.extend(RobotState(p) for p in draw[keep][:need])
    return out


def _recheck_cvar(mix: Gmm, tables: PlannerTables, risk: RiskParams) -> float:
    """Worst-obstacle CVaR of the planned mixture, recomputed from scratch."""
    if tables.sdf_means.size == 0:
        return float("-inf")
    ids = np.array([tables.colloc.snap(c.mean)[0] for c in mix.components])
    worst = -np.inf
    for k in range(tables.sdf_means.shape[0]):
        value, _, _ = cvar_gmm((-tables.sdf_means[k][ids],
                                tables.sdf_stds[k][ids], mix.weights),
                               risk.alpha)
        worst = max(worst, value)
    return worst


def run(scenario: Scenario):
    """Simulate a scenario end to end.

    Returns (TrajectoryLog, MetricsReport).  The macro loop plans with
    opti_gmm (warm-started by plan shifting), re-verifies the planned
    mixture's CVaR, assigns per-robot targets from the planned mixture and
    advances the potential-field controller micro_per_macro times.
    Exhausting the macro budget is reported through the metrics (t = inf),
    not an exception; planner failures raise RunAborted with the partial
    log attached.
    """
    cfg = scenario.ftmpc
    tables = prepare(scenario.workspace, scenario.spacing,
                     scenario.shared_cov, scenario.obstacles,
                     scenario.target, cfg)
    floor = target_floor(tables)
    threshold = floor + cfg.termination_w2
    robots = _sample_robots(scenario)
    records = [_quantize([r.position for r in robots])]
    planned, plans, plan_secs, cvar_worst = [], [], [], []
    current = scenario.initial
    pi_init = None
    completed = False
    t_loop = time.perf_counter()

    def snapshot(done: bool) -> TrajectoryLog:
        return TrajectoryLog(
            positions=np.array(records),
            robot_radius=robots[0].radius,
            micro_per_macro=scenario.micro_per_macro,
            macro_steps=len(planned),
            completed=done,
            planned=tuple(planned),
            plans=tuple(plans),
            plan_seconds=tuple(plan_secs),
            cvar_worst=tuple(cvar_worst),
            prep_seconds=tables.prep_seconds,
            loop_seconds=time.perf_counter() - t_loop,
        )

    for k in range(cfg.max_macro_steps):
        positions = np.array([r.position for r in robots])
        if (w2_gmm(current, tables.target)[0] <= threshold
                and _within_three_sigma(positions, tables.target)):
            completed = True
            break
        t0 = time.perf_counter()
        try:
            result = opti_gmm(current, pi_init, cfg, tables)
        except PlannerError as exc:
            raise RunAborted(f"macro step {k}: {exc}",
                             snapshot(False)) from exc
        elapsed = time.perf_counter() - t0
        worst = _recheck_cvar(result.next_gmm, tables, cfg.risk)
        if worst > cfg.risk.epsilon + _CVAR_RECHECK_TOL:
            raise RunAborted(
                f"macro step {k}: planned mixture fails the risk re-check "
                f"({worst:.6f} > {cfg.risk.epsilon})", snapshot(False))
        plan_secs.append(elapsed)
        cvar_worst.append(worst)
        planned.append(result.next_gmm)
        plans.append(result.plan)
        targets = assign_targets(robots, result.next_gmm,
                                 (scenario.seed, 1, k))
        for _ in range(scenario.micro_per_macro):
            robots = step_swarm(robots, targets, scenario.obstacles,
                                scenario.apf)
            records.append(_quantize([r.position for r in robots]))
        current = result.next_gmm
        try:
            pi_init = shift_plan(result.plan, current, cfg, tables)
        except (ValueError, PlannerError):
            pi_init = None
    log = snapshot(completed)
    return log, compute_metrics(log, scenario)


# ---- metrics -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    """The experiment protocol's five numbers, plus bookkeeping.

    t is the wall-clock duration in minutes (planning plus control,
    preparation excluded; infinite when the run timed out), t_f the mean
    seconds per macro step, d_bar the mean trajectory length, and the two
    min distances are surface-to-surface.  Timing fields are None when the
    log was rebuilt from a CSV file, which records no clocks.
    """

    t: float | None
    t_f: float | None
    d_bar: float
    min_d_ij: float
    min_d_io: float
    completed: bool
    macro_steps: int
    prep_seconds: float | None

    def to_dict(self) -> dict:
        def cell(v):
            if v is None:
                return None
            if np.isinf(v):
                return "inf"
            return v
        return {
            "t_minutes": cell(self.t),
            "t_f_seconds": cell(self.t_f),
            "d_bar_meters": cell(self.d_bar),
            "min_d_ij_meters": cell(self.min_d_ij),
            "min_d_io_meters": cell(self.min_d_io),
            "completed": self.completed,
            "macro_steps": self.macro_steps,
            "prep_seconds": cell(self.prep_seconds),
        }


def compute_metrics(log: TrajectoryLog, scenario: Scenario) -> MetricsReport:
    """Distance metrics from the log, timing metrics from its clocks."""
    pos = log.positions
    if pos.shape[0] == 0:
        raise EmptyLog("no position records")
    hops = np.linalg.norm(np.diff(pos, axis=0), axis=2)
    d_bar = float(hops.sum(axis=0).mean()) if pos.shape[0] > 1 else 0.0
    n = pos.shape[1]
    if n > 1:
        iu = np.triu_indices(n, k=1)
        diff = pos[:, :, None, :] - pos[:, None, :, :]
        dist = np.sqrt(np.einsum("sijk,sijk->sij", diff, diff))
        min_d_ij = float(dist[:, iu[0], iu[1]].min() - 2.0 * log.robot_radius)
    else:
        min_d_ij = float("inf")
    if scenario.obstacles:
        flat = pos.reshape(-1, 2)
        best = np.full(flat.shape[0], np.inf)
        for poly in scenario.obstacles:
            sd, _, _ = signed_distance_batch(flat, poly)
            best = np.minimum(best, sd)
        min_d_io = float(best.min() - log.robot_radius)
    else:
        min_d_io = float("inf")
    if log.has_timing:
        t = float("inf") if not log.completed else log.loop_seconds / 60.0
        t_f = (log.loop_seconds / log.macro_steps if log.macro_steps
               else 0.0)
        prep = log.prep_seconds
    else:
        t = t_f = prep = None
    return MetricsReport(t=t, t_f=t_f, d_bar=d_bar, min_d_ij=min_d_ij,
                         min_d_io=min_d_io, completed=log.completed,
                         macro_steps=log.macro_steps, prep_seconds=prep)


# ---- exports -------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def _export_csv(log: TrajectoryLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "robot_id", "x", "y"])
        for step in range(log.positions.shape[0]):
            for rid in range(log.positions.shape[1]):
                x, y = log.positions[step, rid]
                writer.writerow([step, rid, _fmt(x), _fmt(y)])


def _export_svg(log: TrajectoryLog, path, scenario: Scenario | None) -> None:
    from matplotlib.figure import Figure

    fig = Figure(figsize=(10.0, 8.0))
    ax = fig.add_subplot()
    if scenario is not None:
        (x0, x1), (y0, y1) = scenario.workspace
        ax.plot([x0, x1, x1, x0, x0], [y0, y0, y1, y1, y0],
                color="black", linewidth=1.2)
        for poly in scenario.obstacles:
            ax.fill(poly.vertices[:, 0], poly.vertices[:, 1],
                    color="0.55", zorder=2)
        ax.set_xlim(x0 - 5.0, x1 + 5.0)
        ax.set_ylim(y0 - 5.0, y1 + 5.0)
    pos = log.positions
    cmap = ["tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple",
            "tab:brown", "tab:pink", "tab:gray", "tab:olive", "tab:cyan"]
    for rid in range(pos.shape[1]):
        color = cmap[rid % len(cmap)]
        ax.plot(pos[:, rid, 0], pos[:, rid, 1], color=color,
                linewidth=0.7, alpha=0.8, zorder=3)
        ax.scatter([pos[0, rid, 0]], [pos[0, rid, 1]], marker="o", s=14,
                   color=color, zorder=4)
        ax.scatter([pos[-1, rid, 0]], [pos[-1, rid, 1]], marker="D", s=14,
                   color=color, zorder=4)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.savefig(path, format="svg", bbox_inches="tight")


def _gmm_dict(mix: Gmm) -> dict:
    return {
        "means": [c.mean.tolist() for c in mix.components],
        "covs": [c.cov.tolist() for c in mix.components],
        "weights": mix.weights.tolist(),
    }


def _export_plan_json(log: TrajectoryLog, path) -> None:
    steps = []
    for mix, plan in zip(log.planned, log.plans):
        steps.append({
            "gmm": _gmm_dict(mix),
            "plan": [{
                "row_ids": st.row_ids.tolist(),
                "col_ids": st.col_ids.tolist(),
                "matrix": st.matrix.tolist(),
            } for st in plan.stages],
        })
    doc = {"macro_steps": steps, "completed": log.completed}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def export(log: TrajectoryLog, fmt: str, path,
           scenario: Scenario | None = None) -> None:
    """Write the log as `csv`, `svg` or `plan-json`."""
    writers = {
        "csv": lambda: _export_csv(log, path),
        "svg": lambda: _export_svg(log, path, scenario),
        "plan-json": lambda: _export_plan_json(log, path),
    }
    if fmt not in writers:
        raise UnsupportedFormat(
            f"format {fmt!r} not in {sorted(writers)}")
    try:
        writers[fmt]()
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def log_from_csv(path, scenario: Scenario) -> TrajectoryLog:
    """Rebuild a position-only log from an exported CSV file."""
    rows = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["step", "robot_id", "x", "y"]:
                raise ParseError(f"{path}: unexpected header {header}")
            for line, row in enumerate(reader, start=2):
                try:
                    rows.append((int(row[0]), int(row[1]),
                                 float(row[2]), float(row[3])))
                except (ValueError, IndexError) as exc:
                    raise ParseError(f"{path} line {line}: {exc}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows:
        positions = np.empty((0, scenario.robot_count, 2))
        macro = 0
    else:
        n_steps = max(r[0] for r in rows) + 1
        n_robots = max(r[1] for r in rows) + 1
        positions = np.full((n_steps, n_robots, 2), np.nan)
        for step, rid, x, y in rows:
            positions[step, rid] = (x, y)
        if np.any(np.isnan(positions)):
            raise ParseError(f"{path}: missing (step, robot) records")
        macro = (n_steps - 1) // scenario.micro_per_macro
    radius = RobotState.__dataclass_fields__["radius"].default
    return TrajectoryLog(
        positions=positions,
        robot_radius=radius,
        micro_per_macro=scenario.micro_per_macro,
        macro_steps=macro,
        completed=False,
        has_timing=False,
    )
