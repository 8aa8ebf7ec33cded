"""Macroscopic swarm planning over a fixed Gaussian collocation grid.

The swarm density is a Gaussian mixture whose components ("GCs") are pinned
to a uniform grid and share one covariance, so planning reduces to choosing
transport couplings between consecutive weight vectors.  Each step solves a
finite-horizon program: linear transport costs, marginal-chaining equalities,
per-GC density caps, and tail-risk (CVaR) bounds against every obstacle.
The risk bounds are nonlinear in the weights, so the program is solved by
sequential linear programming: linearize the CVaR rows at the incumbent
coupling, solve the LP inside an element-wise trust region, repeat until the
iterates settle.  A terminal cost table, built from shortest paths on a
risk-gated grid graph, steers the end of the horizon toward the target.
"""

from __future__ import annotations

import heapq
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gauss import Gaussian2, Gmm, w2_gaussian, w2_gmm
from .geometry import ConvexPolygon, signed_distance_batch
from .lp import INFEASIBLE, OPTIMAL, Basis, LinearProgram, solve
from .risk import RiskParams, cvar_bundle, cvar_gaussian

_SNAP_TOL = 1e-6            # meters; means further off-grid than this warn
_SUPPORT_EPS = 1e-12        # weights at or below this leave the support
_UNREACHABLE_SCALE = 1e6    # unreachable terminal cost = scale * diameter^2
_SLACK_PENALTY = 1e4        # objective weight of risk-row relaxation slacks
_MAX_HALVINGS = 5           # trust-region shrinks before relaxing risk rows
_PLATEAU_ABS = 1e-9         # objective progress below this counts as settled
_PLATEAU_REL = 1e-12
_POST_CHECK_TOL = 1e-6      # allowance on the nonlinear risk re-check
_STAGE_TIEBREAK = 1e-7      # later stages cost marginally more, so hops that
                            # are cost-neutral in time happen as early as
                            # possible instead of being re-postponed forever


class PlannerError(RuntimeError):
    """Base class for planning failures."""


class EmptyGrid(ValueError):
    """Raised when no grid cell fits inside the workspace."""


class InfeasibleLinearization(PlannerError):
    """A trust-region subproblem has no feasible point."""


class NoProgress(PlannerError):
    """Recovery (step shrinking, then slack relaxation) did not help."""


class MaxIters(PlannerError):
    """The SLP loop did not settle within the iteration budget."""


class Timeout(PlannerError):
    """The macro-step budget ran out before reaching the target."""

    def __init__(self, message: str, states=(), steps=()):
        super().__init__(message)
        self.states = tuple(states)
        self.steps = tuple(steps)


def worker_count() -> int:
    """Worker cap from the ROVER_THREADS env var (0 or unset = one per CPU)."""
    raw = os.environ.get("ROVER_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, n)


# ---- collocation grid ------------------------------------------------------


@dataclass(frozen=True)
class CollocationSet:
    """Uniform grid of candidate components sharing one covariance.

    Component id = iy * nx + ix, with means offset half a spacing from the
    workspace edges.
    """

    means: np.ndarray       # (N, 2)
    shared_cov: np.ndarray  # (2, 2) SPD
    nx: int
    ny: int
    spacing: float
    origin: np.ndarray      # workspace lower-left corner

    @property
    def n(self) -> int:
        return self.means.shape[0]

    def gaussian(self, gid: int) -> Gaussian2:
        return Gaussian2(self.means[gid], self.shared_cov)

    def snap(self, point) -> tuple[int, float]:
        """Nearest grid component (lowest id on ties) and its distance."""
        p = np.asarray(point, dtype=float)
        delta = self.means - p
        d2 = np.einsum("nd,nd->n", delta, delta)
        best = float(d2.min())
        gid = int(np.flatnonzero(d2 <= best + 1e-12)[0])
        return gid, float(np.sqrt(best))


def build_collocation_set(workspace, spacing: float, shared_cov) -> CollocationSet:
    """Lay a half-spacing-offset grid over ((xmin, xmax), (ymin, ymax))."""
    (xmin, xmax), (ymin, ymax) = workspace
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if xmax <= xmin or ymax <= ymin:
        raise EmptyGrid(f"workspace {workspace} has no area")
    nx = int(np.floor((xmax - xmin) / spacing + 1e-9))
    ny = int(np.floor((ymax - ymin) / spacing + 1e-9))
    if nx < 1 or ny < 1:
        raise EmptyGrid(
            f"spacing {spacing} does not fit the {xmax - xmin} x {ymax - ymin} workspace")
    cov = np.asarray(shared_cov, dtype=float)
    Gaussian2(np.zeros(2), cov)  # borrow the SPD validation
    xs = xmin + spacing * (np.arange(nx) + 0.5)
    ys = ymin + spacing * (np.arange(ny) + 0.5)
    gx, gy = np.meshgrid(xs, ys)
    means = np.column_stack([gx.ravel(), gy.ravel()])
    return CollocationSet(means, cov, nx, ny, float(spacing),
                          np.array([xmin, ymin], dtype=float))


@dataclass(frozen=True)
class Adjacency:
    """Per-GC reachable ids (always including self) within the radius."""

    neighbors: tuple
    radius: float


def build_adjacency(c: CollocationSet, radius: float) -> Adjacency:
    if radius < 0:
        raise ValueError(f"radius must be nonnegative, got {radius}")
    diff = c.means[:, None, :] - c.means[None, :, :]
    d2 = np.einsum("ijd,ijd->ij", diff, diff)
    mask = d2 <= radius * radius + 1e-9
    return Adjacency(tuple(np.flatnonzero(row) for row in mask), float(radius))


@dataclass(frozen=True)
class StageCostTable:
    """Squared transport distance to each neighbor; with a shared covariance
    this is just the squared mean distance."""

    neighbors: tuple
    costs: tuple


def precompute_stage_costs(c: CollocationSet, adj: Adjacency) -> StageCostTable:
    costs = []
    for i, nbr in enumerate(adj.neighbors):
        delta = c.means[nbr] - c.means[i]
        costs.append(np.einsum("nd,nd->n", delta, delta))
    return StageCostTable(adj.neighbors, tuple(costs))


# ---- terminal cost table ---------------------------------------------------


def _sdf_stats(c: CollocationSet, obstacles):
    """Signed distance mean/std of every GC against every obstacle."""
    k = len(obstacles)
    means = np.zeros((k, c.n))
    stds = np.zeros((k, c.n))
    for idx, poly in enumerate(obstacles):
        d, _, normals = signed_distance_batch(c.means, poly)
        var = np.einsum("nd,de,ne->n", normals, c.shared_cov, normals)
        means[idx] = d
        stds[idx] = np.sqrt(np.maximum(var, 0.0))
    return means, stds


def _gate_cvar(c: CollocationSet, obstacles, alpha: float) -> np.ndarray:
    """Worst-obstacle CVaR of the negated distance for a unit-weight GC."""
    if not obstacles:
        return np.full(c.n, -np.inf)
    factor = cvar_gaussian(0.0, 1.0, alpha)
    means, stds = _sdf_stats(c, obstacles)
    return np.max(-means + stds * factor, axis=0)


@dataclass(frozen=True)
class TerminalGraph:
    """Directed transport graph; edges enter only risk-acceptable GCs."""

    heads: tuple            # per GC: edge head ids
    weights: tuple          # per GC: edge weights (squared distances)
    safe: np.ndarray        # (N,) bool gate result
    gate_cvar: np.ndarray   # (N,) worst-obstacle CVaR per unit-weight GC


def build_terminal_graph(c: CollocationSet, adj: Adjacency, obstacles,
                         risk: RiskParams, risk_penalty: float = 0.0) -> TerminalGraph:
    """Adjacency edges gated (or, with risk_penalty > 0, surcharged) by risk.

    The default is a hard gate: an edge into GC j exists only when a
    unit-weight component at j keeps CVaR below epsilon for every obstacle.
    A positive risk_penalty switches to soft mode: all adjacency edges stay,
    and risk_penalty * max(0, cvar - epsilon) is added to the edge weight.
    """
    gate = _gate_cvar(c, tuple(obstacles), risk.alpha)
    safe = gate < risk.epsilon
    costs = precompute_stage_costs(c, adj)
    surcharge = np.maximum(gate - risk.epsilon, 0.0) if risk_penalty > 0 else None
    heads, weights = [], []
    for i, nbr in enumerate(adj.neighbors):
        if risk_penalty > 0:
            h = nbr
            w = costs.costs[i] + risk_penalty * surcharge[h]
        else:
            keep = safe[nbr]
            h = nbr[keep]
            w = costs.costs[i][keep]
        heads.append(h)
        weights.append(np.asarray(w, dtype=float))
    return TerminalGraph(tuple(heads), tuple(weights), safe, gate)


def _dijkstra(source: int, heads, weights, n: int) -> np.ndarray:
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in zip(heads[u], weights[u]):
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, int(v)))
    return dist


@dataclass(frozen=True)
class TerminalCostTable:
    """Cost of finishing at each target component from each GC."""

    q: np.ndarray            # (N, T)
    hosts: np.ndarray        # (T,) GC id hosting each target component
    reachable: np.ndarray    # (N, T) bool
    unreachable_cost: float


def terminal_costs(g: TerminalGraph, target: Gmm, c: CollocationSet) -> TerminalCostTable:
    """Shortest risk-gated path cost to each target's host GC, plus the final
    transport term from the host to the true target component.

    Unreachable pairs get a large finite cost so the LP stays bounded.
    """
    hosts = []
    for comp in target.components:
        gid, snap_d = c.snap(comp.mean)
        if snap_d > _SNAP_TOL:
            warnings.warn(
                f"target mean {comp.mean.tolist()} is {snap_d:.3g} m off-grid; "
                f"snapped to GC {gid}", stacklevel=2)
        hosts.append(gid)
    rev_heads = [[] for _ in range(c.n)]
    rev_weights = [[] for _ in range(c.n)]
    for i, (hs, ws) in enumerate(zip(g.heads, g.weights)):
        for j, w in zip(hs.tolist(), ws.tolist()):
            rev_heads[j].append(i)
            rev_weights[j].append(w)
    rev_heads = [np.asarray(v, dtype=int) for v in rev_heads]
    rev_weights = [np.asarray(v, dtype=float) for v in rev_weights]
    span = c.means.max(axis=0) - c.means.min(axis=0)
    unreachable = _UNREACHABLE_SCALE * float(span @ span)

    def column(n: int):
        dist = _dijkstra(hosts[n], rev_heads, rev_weights, c.n)
        term = w2_gaussian(c.gaussian(hosts[n]), target.components[n]) ** 2
        finite = np.isfinite(dist)
        col = np.where(finite, dist + term, unreachable)
        return col, finite

    n_targ = len(hosts)
    with ThreadPoolExecutor(max_workers=min(worker_count(), n_targ)) as pool:
        cols = list(pool.map(column, range(n_targ)))
    q = np.column_stack([col for col, _ in cols])
    reach = np.column_stack([fin for _, fin in cols])
    return TerminalCostTable(q, np.asarray(hosts, dtype=int), reach, unreachable)


# ---- configuration and tables ----------------------------------------------


@dataclass(frozen=True)
class FtmpcConfig:
    """Finite-horizon planning parameters.

    lambdas has horizon + 1 entries: one per stage coupling plus the
    terminal coupling.  density_mode "per_gc" caps the accumulated weight of
    every GC at every planned stage; "aggregate" keeps the single summed row
    per stage (a literal reading that is only satisfiable when density_bound
    is at least the mixture peak of one component).
    """

    horizon: int = 2
    lambdas: tuple = (1.0, 1.0, 3.0)
    risk: RiskParams = RiskParams(0.05, -0.2)
    density_bound: float = 0.002
    step_bound: float = 0.1
    convergence_eta: float = 1e-5
    transport_radius: float = 15.0
    max_slp_iters: int = 50
    density_mode: str = "per_gc"
    max_macro_steps: int = 3000
    termination_w2: float = 1.0
    risk_penalty: float = 0.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        lam = tuple(float(v) for v in self.lambdas)
        if len(lam) != self.horizon + 1:
            raise ValueError(
                f"need horizon + 1 = {self.horizon + 1} lambdas, got {len(lam)}")
        if any(v <= 0 for v in lam):
            raise ValueError("lambdas must be positive")
        object.__setattr__(self, "lambdas", lam)
        for name in ("density_bound", "step_bound", "convergence_eta",
                     "transport_radius", "max_slp_iters", "max_macro_steps",
                     "termination_w2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.density_mode not in ("per_gc", "aggregate"):
            raise ValueError(f"density_mode must be per_gc or aggregate, "
                             f"got {self.density_mode!r}")
        if self.risk_penalty < 0:
            raise ValueError("risk_penalty must be nonnegative")


@dataclass(frozen=True)
class PlannerTables:
    """Everything precomputable before the first planning step."""

    colloc: CollocationSet
    adjacency: Adjacency
    stage_costs: StageCostTable
    graph: TerminalGraph
    terminal: TerminalCostTable
    target: Gmm
    obstacles: tuple
    sdf_means: np.ndarray   # (n_obstacles, N)
    sdf_stds: np.ndarray
    prep_seconds: float


def prepare(workspace, spacing, shared_cov, obstacles, target: Gmm,
            config: FtmpcConfig) -> PlannerTables:
    """Build the grid, cost tables and obstacle statistics, timing the work."""
    t0 = time.perf_counter()
    obstacles = tuple(obstacles)
    colloc = build_collocation_set(workspace, spacing, shared_cov)
    adj = build_adjacency(colloc, config.transport_radius)
    costs = precompute_stage_costs(colloc, adj)
    graph = build_terminal_graph(colloc, adj, obstacles, config.risk,
                                 config.risk_penalty)
    table = terminal_costs(graph, target, colloc)
    sdf_means, sdf_stds = _sdf_stats(colloc, obstacles)
    return PlannerTables(colloc, adj, costs, graph, table, target, obstacles,
                         sdf_means, sdf_stds, time.perf_counter() - t0)


def target_floor(tables: PlannerTables) -> float:
    """Transport distance between the target and its best grid projection.

    Planned mixtures live on the grid covariance, so this is the tightest
    value the planning sequence can reach; termination thresholds are
    measured above it.
    """
    ids, wts = _canonical_weights(tables.target, tables.colloc, warn=False)
    projected = Gmm(tuple(tables.colloc.gaussian(g) for g in ids), wts)
    return w2_gmm(projected, tables.target)[0]


# ---- transport plans ---------------------------------------------------------


@dataclass(frozen=True)
class StageCoupling:
    """One joint PMF of the plan; rows and columns are labeled by GC id
    (target component index for the terminal coupling)."""

    row_ids: np.ndarray
    col_ids: np.ndarray
    matrix: np.ndarray
    var_rows: np.ndarray    # local row index per flattened variable
    var_cols: np.ndarray

    def flatten(self) -> np.ndarray:
        return self.matrix[self.var_rows, self.var_cols]


@dataclass(frozen=True)
class TransportPlan:
    """Stack of stage couplings plus the terminal coupling.

    Validates non-negativity, unit mass per matrix, and marginal chaining
    between consecutive matrices.
    """

    stages: tuple

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a transport plan needs at least one coupling")
        for st in self.stages:
            if np.any(st.matrix < -1e-9):
                raise ValueError("coupling entries must be nonnegative")
            if abs(st.matrix.sum() - 1.0) > 1e-8:
                raise ValueError(f"coupling mass {st.matrix.sum()} is not 1")
        for a, b in zip(self.stages, self.stages[1:]):
            if not np.array_equal(a.col_ids, b.row_ids):
                raise ValueError("consecutive couplings disagree on their support")
            gap = np.max(np.abs(a.matrix.sum(axis=0) - b.matrix.sum(axis=1)))
            if gap > 1e-8:
                raise ValueError(f"marginal chaining violated by {gap:.3g}")

    @property
    def horizon(self) -> int:
        return len(self.stages) - 1

    def flatten(self) -> np.ndarray:
        return np.concatenate([st.flatten() for st in self.stages])


# ---- subproblem structure ----------------------------------------------------


def _canonical_weights(gmm: Gmm, colloc: CollocationSet, warn: bool = True):
    """Snap a mixture onto the grid: sorted GC ids and merged weights."""
    acc: dict[int, float] = {}
    for comp, w in zip(gmm.components, gmm.weights):
        gid, snap_d = colloc.snap(comp.mean)
        if warn and snap_d > _SNAP_TOL:
            warnings.warn(
                f"component mean {comp.mean.tolist()} is {snap_d:.3g} m "
                f"off-grid; snapped to GC {gid}", stacklevel=3)
        acc[gid] = acc.get(gid, 0.0) + float(w)
    ids = np.array(sorted(acc), dtype=int)
    wts = np.array([acc[g] for g in ids])
    keep = wts > _SUPPORT_EPS
    ids, wts = ids[keep], wts[keep]
    if ids.size == 0:
        raise ValueError("mixture has no weight above the support threshold")
    return ids, wts / wts.sum()


class _Structure:
    """Variable and row layout of one horizon subproblem.

    Fixed for a given current support; only the risk rows, the trust-region
    bounds and (in slack mode) the relaxation columns change across SLP
    iterations.
    """

    def __init__(self, ids, weights, config: FtmpcConfig, tables: PlannerTables):
        self.config = config
        self.tables = tables
        colloc, adj = tables.colloc, tables.adjacency
        h = config.horizon
        n_targ = tables.terminal.hosts.size
        supports = [np.asarray(ids, dtype=int)]
        for _ in range(h):
            supports.append(np.unique(np.concatenate(
                [adj.neighbors[i] for i in supports[-1]])))
        pos = []
        for sup in supports:
            lookup = np.full(colloc.n, -1, dtype=int)
            lookup[sup] = np.arange(sup.size)
            pos.append(lookup)

        var_rows, var_cols, offsets, c_parts = [], [], [], []
        off = 0
        for p in range(h):
            rows, cols, cost = [], [], []
            for local_i, i in enumerate(supports[p]):
                nbr = adj.neighbors[i]
                rows.append(np.full(nbr.size, local_i, dtype=int))
                cols.append(pos[p + 1][nbr])
                cost.append(tables.stage_costs.costs[i])
            var_rows.append(np.concatenate(rows))
            var_cols.append(np.concatenate(cols))
            offsets.append(off)
            off += var_rows[-1].size
            c_parts.append(config.lambdas[p] * (1.0 + _STAGE_TIEBREAK * p)
                           * np.concatenate(cost))
        sh = supports[h]
        var_rows.append(np.repeat(np.arange(sh.size), n_targ))
        var_cols.append(np.tile(np.arange(n_targ), sh.size))
        offsets.append(off)
        off += sh.size * n_targ
        c_parts.append(config.lambdas[h] * tables.terminal.q[sh].ravel())

        self.h = h
        self.n_targ = n_targ
        self.supports = supports
        self.pos = pos
        self.var_rows = var_rows
        self.var_cols = var_cols
        self.offsets = offsets
        self.n_vars = off
        self.c = np.concatenate(c_parts)
        self.weights = np.asarray(weights, dtype=float)
        self.target_weights = np.asarray(tables.target.weights, dtype=float)
        self.peak = 1.0 / (2.0 * np.pi * np.sqrt(np.linalg.det(colloc.shared_cov)))
        self._build_equalities()
        self._build_density_rows()
        # Pair index for building identity couplings.
        self.pair_index = []
        for p in range(h + 1):
            self.pair_index.append({
                (int(r), int(cc)): k
                for k, (r, cc) in enumerate(zip(var_rows[p], var_cols[p]))})

    def stage_slice(self, p: int) -> slice:
        end = self.offsets[p + 1] if p + 1 < len(self.offsets) else self.n_vars
        return slice(self.offsets[p], end)

    def _build_equalities(self):
        h, n_targ = self.h, self.n_targ
        # base[p] for p in 0..h addresses the row block of stage p's support.
        base = [0]
        for p in range(h + 1):
            base.append(base[-1] + self.supports[p].size)
        targ_base = base[h + 1]
        n_eq = targ_base + n_targ
        A = np.zeros((n_eq, self.n_vars))
        b = np.zeros(n_eq)
        b[:self.supports[0].size] = self.weights
        b[targ_base:] = self.target_weights
        for p in range(h + 1):
            gvars = np.arange(*self.stage_slice(p).indices(self.n_vars))
            np.add.at(A, (base[p] + self.var_rows[p], gvars), 1.0)
            if p < h:
                np.add.at(A, (base[p + 1] + self.var_cols[p], gvars), -1.0)
            else:
                np.add.at(A, (targ_base + self.var_cols[p], gvars), 1.0)
        self.A_eq = A
        self.b_eq = b
        self._eq_base = base

    def _build_density_rows(self):
        h = self.h
        cap = self.config.density_bound
        if self.config.density_mode == "per_gc":
            n_rows = sum(self.supports[p].size for p in range(1, h + 1))
            A = np.zeros((n_rows, self.n_vars))
            r = 0
            for p in range(1, h + 1):
                gvars = np.arange(*self.stage_slice(p - 1).indices(self.n_vars))
                np.add.at(A, (r + self.var_cols[p - 1], gvars), self.peak)
                r += self.supports[p].size
        else:
            A = np.zeros((h, self.n_vars))
            for p in range(1, h + 1):
                A[p - 1, self.stage_slice(p - 1)] = self.peak
        self.A_dens = A
        self.b_dens = np.full(A.shape[0], cap)

    # -- iteration-dependent pieces --

    def stage_weights(self, x: np.ndarray, p: int) -> np.ndarray:
        """Accumulated weights at stage p (column marginal of matrix p-1)."""
        w = np.zeros(self.supports[p].size)
        np.add.at(w, self.var_cols[p - 1], x[self.stage_slice(p - 1)])
        return w

    def risk_rows(self, x: np.ndarray, sdf_means, sdf_stds):
        """Linearized CVaR rows at x: (A, rhs, values) with one row per
        (stage, obstacle) in a fixed order."""
        k_obs = sdf_means.shape[0]
        n_rows = self.h * k_obs
        A = np.zeros((n_rows, self.n_vars))
        rhs = np.zeros(n_rows)
        values = np.zeros(n_rows)
        alpha = self.config.risk.alpha
        eps = self.config.risk.epsilon
        for p in range(1, self.h + 1):
            w_stage = self.stage_weights(x, p)
            sup = self.supports[p]
            sl = self.stage_slice(p - 1)
            for k in range(k_obs):
                row = (p - 1) * k_obs + k
                cvar, _, _, grad, degenerate = cvar_bundle(
                    (-sdf_means[k][sup], sdf_stds[k][sup], w_stage), alpha)
                values[row] = cvar
                if degenerate:
                    # Gradient undefined: keep the row as a constant so the
                    # structure (and any warm basis) survives.
                    rhs[row] = eps - cvar if cvar > eps else 1.0
                else:
                    A[row, sl] = grad[self.var_cols[p - 1]]
                    rhs[row] = eps - cvar + float(grad @ w_stage)
        return A, rhs, values

    def build_lp(self, x: np.ndarray, step: float, A_risk, rhs_risk,
                 slack: bool) -> LinearProgram:
        lb = np.maximum(0.0, x - step)
        ub = x + step
        A_ub = np.vstack([self.A_dens, A_risk])
        b_ub = np.concatenate([self.b_dens, rhs_risk])
        if not slack:
            return LinearProgram(self.c, self.A_eq, self.b_eq, A_ub, b_ub,
                                 np.column_stack([lb, ub]))
        n_risk = A_risk.shape[0]
        c = np.concatenate([self.c, np.full(n_risk, _SLACK_PENALTY)])
        A_eq = np.hstack([self.A_eq, np.zeros((self.A_eq.shape[0], n_risk))])
        pad_dens = np.zeros((self.A_dens.shape[0], n_risk))
        relax = np.hstack([A_risk, -np.eye(n_risk)])
        A_ub = np.vstack([np.hstack([self.A_dens, pad_dens]), relax])
        bounds = np.vstack([
            np.column_stack([lb, ub]),
            np.column_stack([np.zeros(n_risk), np.full(n_risk, np.inf)]),
        ])
        return LinearProgram(c, A_eq, self.b_eq, A_ub, b_ub, bounds)

    # -- plan conversion --

    def initial_vector(self) -> np.ndarray:
        """Stay-in-place couplings plus a cheapest-first terminal fill."""
        x = np.zeros(self.n_vars)
        for p in range(self.h):
            for gid, w in zip(self.supports[0], self.weights):
                key = (int(self.pos[p][gid]), int(self.pos[p + 1][gid]))
                x[self.offsets[p] + self.pair_index[p][key]] = w
        sh = self.supports[self.h]
        cap = np.zeros(sh.size)
        cap[self.pos[self.h][self.supports[0]]] = self.weights
        need = self.target_weights.copy()
        q = self.tables.terminal.q[sh]
        order = np.argsort(q, axis=None, kind="stable")
        for flat in order:
            m, n = divmod(int(flat), self.n_targ)
            amount = min(cap[m], need[n])
            if amount > 0.0:
                x[self.offsets[self.h] + flat] = amount
                cap[m] -= amount
                need[n] -= amount
        if float(need.sum()) > 1e-9:
            raise PlannerError("terminal fill left unassigned target mass")
        return x

    def vector_from_plan(self, plan: TransportPlan) -> np.ndarray:
        if len(plan.stages) != self.h + 1:
            raise ValueError(
                f"plan has {len(plan.stages)} couplings, expected {self.h + 1}")
        parts = []
        for p, st in enumerate(plan.stages):
            want_rows = self.supports[p]
            want_cols = (self.supports[p + 1] if p < self.h
                         else np.arange(self.n_targ))
            if not (np.array_equal(st.row_ids, want_rows)
                    and np.array_equal(st.col_ids, want_cols)):
                raise ValueError(f"coupling {p} does not match the current support")
            parts.append(st.matrix[self.var_rows[p], self.var_cols[p]])
        return np.concatenate(parts)

    def plan_from_vector(self, x: np.ndarray) -> TransportPlan:
        stages = []
        for p in range(self.h + 1):
            rows = self.supports[p]
            cols = (self.supports[p + 1] if p < self.h
                    else np.arange(self.n_targ))
            m = np.zeros((rows.size, cols.size))
            m[self.var_rows[p], self.var_cols[p]] = x[self.stage_slice(p)]
            stages.append(StageCoupling(rows, cols, m,
                                        self.var_rows[p], self.var_cols[p]))
        return TransportPlan(tuple(stages))


def shift_plan(prev: TransportPlan, current: Gmm, config: FtmpcConfig,
               tables: PlannerTables) -> TransportPlan:
    """Time-shift an accepted plan one macro step for warm starting.

    Stage couplings move up one slot, a stay-in-place coupling fills the
    freed final stage, and the terminal coupling is re-indexed onto the new
    support.  When the previous plan was feasible its shift is too (every
    shifted stage reproduces a marginal that already passed the same risk
    and density rows), and the trust region around it keeps committed
    movement committed: without the shift, a horizon with equal stage
    weights can postpone a cost-neutral hop to the last stage on every
    macro step and never execute it.
    """
    if len(prev.stages) != config.horizon + 1:
        raise ValueError(
            f"plan has {len(prev.stages)} couplings, expected "
            f"{config.horizon + 1}")
    ids, weights = _canonical_weights(current, tables.colloc, warn=False)
    st = _Structure(ids, weights, config, tables)
    h = st.h
    x = np.zeros(st.n_vars)
    for p in range(h - 1):
        old = prev.stages[p + 1]
        sl = st.stage_slice(p)
        part = np.zeros(sl.stop - sl.start)
        pos_r, pos_c = st.pos[p], st.pos[p + 1]
        for r_l, c_l, val in zip(old.var_rows, old.var_cols, old.flatten()):
            if val <= 0.0:
                continue
            li = int(pos_r[old.row_ids[r_l]])
            lj = int(pos_c[old.col_ids[c_l]])
            if li < 0 or lj < 0:
                continue  # row fell below the support threshold
            k = st.pair_index[p].get((li, lj))
            if k is not None:
                part[k] = val
        total = part.sum()
        if total <= 0.0:
            raise PlannerError("shifted coupling lost all of its mass")
        x[sl] = part / total
    # Freed final stage: stay in place at the shifted marginal.
    w_last = st.weights if h == 1 else st.stage_weights(x, h - 1)
    pos_h = st.pos[h]
    for j, g in enumerate(st.supports[h - 1]):
        if w_last[j] <= 0.0:
            continue
        k = st.pair_index[h - 1][(j, int(pos_h[g]))]
        x[st.offsets[h - 1] + k] = w_last[j]
    # Terminal coupling, re-indexed and rescaled onto the target weights.
    old = prev.stages[-1]
    sl = st.stage_slice(h)
    mat = np.zeros((st.supports[h].size, st.n_targ))
    for r_l, c_l, val in zip(old.var_rows, old.var_cols, old.flatten()):
        if val <= 0.0:
            continue
        li = int(pos_h[old.row_ids[r_l]])
        if li >= 0:
            mat[li, c_l] = val
    colsum = mat.sum(axis=0)
    if np.any(colsum <= 0.0):
        raise PlannerError("shifted terminal coupling lost a target column")
    x[sl] = (mat * (st.target_weights / colsum)).ravel()
    return st.plan_from_vector(x)


def assemble_subproblem(current: Gmm, pi_v: TransportPlan, config: FtmpcConfig,
                        tables: PlannerTables, obstacles=None) -> LinearProgram:
    """One trust-region LP linearized at pi_v (no relaxation columns)."""
    ids, weights = _canonical_weights(current, tables.colloc)
    st = _Structure(ids, weights, config, tables)
    sdf_means, sdf_stds = _resolve_stats(tables, obstacles)
    x = st.vector_from_plan(pi_v)
    A_r, rhs_r, _ = st.risk_rows(x, sdf_means, sdf_stds)
    return st.build_lp(x, config.step_bound, A_r, rhs_r, slack=False)


def _resolve_stats(tables: PlannerTables, obstacles):
    if obstacles is None or obstacles is tables.obstacles:
        return tables.sdf_means, tables.sdf_stds
    return _sdf_stats(tables.colloc, tuple(obstacles))


# ---- the SLP loop ------------------------------------------------------------


@dataclass(frozen=True)
class OptiResult:
    """One macro step: the next mixture, the accepted plan and diagnostics.

    cvar_report lists (stage, obstacle index, CVaR value) at the accepted
    plan; objectives is the LP objective per SLP iterate.
    """

    next_gmm: Gmm
    plan: TransportPlan
    iterations: int
    objectives: tuple
    cvar_report: tuple
    slack_used: bool
    step_bound_final: float
    solve_seconds: float

    def __iter__(self):
        return iter((self.next_gmm, self.plan, self.iterations))


def opti_gmm(current: Gmm, pi_init: TransportPlan | None, config: FtmpcConfig,
             tables: PlannerTables, obstacles=None) -> OptiResult:
    """Plan one macro step by sequential linear programming.

    Starting from pi_init (or a stay-in-place plan), repeatedly linearize
    the risk rows at the incumbent, solve the trust-region LP, and accept
    the optimum, until consecutive iterates differ by at most
    convergence_eta or the objective stops improving.  Infeasible
    subproblems shrink the trust region up to five times, then relax the
    risk rows with penalized slacks.  The accepted plan must pass the
    nonlinear CVaR re-check.
    """
    t_start = time.perf_counter()
    ids, weights = _canonical_weights(current, tables.colloc)
    st = _Structure(ids, weights, config, tables)
    sdf_means, sdf_stds = _resolve_stats(tables, obstacles)
    x = st.initial_vector() if pi_init is None else st.vector_from_plan(pi_init)
    step = config.step_bound
    halvings_left = _MAX_HALVINGS
    slack_mode = False
    basis: Basis | None = None
    objectives: list[float] = []
    j_prev: float | None = None
    iterations = 0
    converged = False
    while iterations < config.max_slp_iters:
        A_r, rhs_r, _ = st.risk_rows(x, sdf_means, sdf_stds)
        while True:
            lp = st.build_lp(x, step, A_r, rhs_r, slack=slack_mode)
            sol = solve(lp, None if slack_mode else basis)
            if sol.status == OPTIMAL:
                break
            if sol.status != INFEASIBLE:
                raise NoProgress(f"subproblem came back {sol.status}")
            if halvings_left > 0:
                step *= 0.5
                halvings_left -= 1
            elif not slack_mode:
                slack_mode = True
                basis = None
            else:
                raise NoProgress(
                    "subproblem infeasible even with relaxed risk rows")
        x_new = sol.x[:st.n_vars]
        j_val = float(st.c @ x_new)
        iterations += 1
        diff = float(np.linalg.norm(x_new - x))
        if j_prev is not None and j_val >= j_prev - max(
                _PLATEAU_ABS, _PLATEAU_REL * abs(j_prev)):
            # Plateau: keep the better of the final two iterates so the
            # recorded objective sequence stays non-increasing even when
            # the last subproblem returns solver noise above the previous
            # value.
            if j_val < j_prev:
                objectives.append(j_val)
                x = x_new
            converged = True
            break
        objectives.append(j_val)
        x = x_new
        if diff <= config.convergence_eta:
            converged = True
            break
        j_prev = j_val
        if not slack_mode:
            basis = sol.basis
    if not converged:
        raise MaxIters(
            f"SLP did not settle in {config.max_slp_iters} iterations")

    _, _, cvar_values = st.risk_rows(x, sdf_means, sdf_stds)
    k_obs = sdf_means.shape[0]
    report = []
    for p in range(1, st.h + 1):
        for k in range(k_obs):
            report.append((p, k, float(cvar_values[(p - 1) * k_obs + k])))
    worst = max((v for _, _, v in report), default=-np.inf)
    if worst >= config.risk.epsilon + _POST_CHECK_TOL:
        raise NoProgress(
            f"risk re-check failed: worst CVaR {worst:.6g} exceeds "
            f"{config.risk.epsilon} + {_POST_CHECK_TOL}")

    w_next = st.stage_weights(x, 1)
    keep = w_next > _SUPPORT_EPS
    ids_next = st.supports[1][keep]
    wts_next = w_next[keep]
    wts_next = wts_next / wts_next.sum()
    next_gmm = Gmm(tuple(tables.colloc.gaussian(int(g)) for g in ids_next),
                   wts_next)
    return OptiResult(
        next_gmm=next_gmm,
        plan=st.plan_from_vector(x),
        iterations=iterations,
        objectives=tuple(objectives),
        cvar_report=tuple(report),
        slack_used=slack_mode,
        step_bound_final=step,
        solve_seconds=time.perf_counter() - t_start,
    )


# ---- receding-horizon driver ---------------------------------------------------


@dataclass(frozen=True)
class PlanRun:
    """Planned mixture sequence; indexable like a list of Gmm."""

    states: tuple
    steps: tuple
    tables: PlannerTables
    w2_floor: float

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]

    def __iter__(self):
        return iter(self.states)


def plan_with_tables(initial: Gmm, tables: PlannerTables,
                     config: FtmpcConfig) -> PlanRun:
    """Receding-horizon planning until the target (or the step budget).

    Each macro step is warm-started with the previous plan shifted one
    stage forward, so movement the last plan scheduled stays scheduled.
    """
    floor = target_floor(tables)
    threshold = floor + config.termination_w2
    ids, wts = _canonical_weights(initial, tables.colloc)
    current = Gmm(tuple(tables.colloc.gaussian(int(g)) for g in ids), wts)
    states = [current]
    steps: list[OptiResult] = []
    if w2_gmm(current, tables.target)[0] <= threshold:
        return PlanRun(tuple(states), tuple(steps), tables, floor)
    pi_init: TransportPlan | None = None
    for _ in range(config.max_macro_steps):
        result = opti_gmm(current, pi_init, config, tables)
        steps.append(result)
        current = result.next_gmm
        states.append(current)
        if w2_gmm(current, tables.target)[0] <= threshold:
            return PlanRun(tuple(states), tuple(steps), tables, floor)
        try:
            pi_init = shift_plan(result.plan, current, config, tables)
        except (ValueError, PlannerError):
            pi_init = None
    raise Timeout(
        f"target not reached within {config.max_macro_steps} macro steps",
        states=states, steps=steps)


def plan_full(scenario, config: FtmpcConfig | None = None) -> PlanRun:
    """Plan a whole scenario: build tables, then run the macro-step loop.

    The scenario only needs workspace, spacing, shared_cov, obstacles,
    initial and target attributes (plus ftmpc when config is omitted).
    """
    cfg = config if config is not None else scenario.ftmpc
    tables = prepare(scenario.workspace, scenario.spacing, scenario.shared_cov,
                     scenario.obstacles, scenario.target, cfg)
    return plan_with_tables(scenario.initial, tables, cfg)
