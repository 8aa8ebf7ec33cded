"""Dense linear programming via the revised simplex method.

Solves  min c.x  subject to  A_eq x = b_eq,  A_ub x <= b_ub,  lo <= x <= hi
with a bounded-variable revised simplex: phase 1 drives signed artificial
variables to zero, phase 2 optimizes the user objective.  Pricing uses
Dantzig's rule; after a run of degenerate pivots, variables that just left
the basis are briefly barred from re-entering, which breaks the flip-flop
cycles that highly degenerate vertices otherwise sustain in floating point.
Optimality and unboundedness claims are only accepted after repricing
against a freshly factorized basis, since product-form inverse updates can
both fake and hide small reduced costs.  Redundant equality rows are
tolerated (their artificial stays basic at level zero).

Also hosts the discrete optimal-transport form used for mixture couplings:
``solve_transport`` minimizes sum(cost * pi) over joint PMFs with fixed
marginals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

# Internal feasibility/pivot tolerance; reported residuals are well below
# the 1e-7 contract.
_FTOL = 1e-9
_DTOL = 1e-9
_PIVTOL = 1e-10
_REFACTOR_EVERY = 200
# Anti-cycling: once this many consecutive pivots have made no numerical
# progress, a variable that leaves the basis in such a pivot is barred from
# re-entering for the next _TABU_WINDOW pivots (choice only; the optimality
# test always sees every candidate).
_DEGEN_TRIGGER = 8
_TABU_WINDOW = 40
# Progress is tracked as a strict objective watermark: a pivot counts only
# if it pushes the objective below the best seen by more than _IMP_REL
# relative to its magnitude.  Ill-conditioned instances otherwise sustain
# endless "nondegenerate" pivots whose combined gain underflows.
_IMP_REL = 1e-13
# After this many consecutive no-progress pivots, remaining reduced-cost
# violations are measured against their per-column computation scale
# |c_j| + |y|.|A_j|; if all are below _NOISE_REL of that scale they are
# rounding noise and the current vertex is accepted as optimal.
_STUCK_LIMIT = 200
_NOISE_REL = 1e-7

_LOWER, _UPPER, _BASIC, _FREE = 0, 1, 2, 3


class DimensionMismatch(ValueError):
    """Raised on malformed solver input (shape or bound errors)."""


class MassMismatch(ValueError):
    """Raised when transport marginals disagree in total mass."""


class LpFailure(RuntimeError):
    """Raised when a solve that must succeed does not."""


@dataclass
class LinearProgram:
    """min c.x  s.t.  A_eq x = b_eq, A_ub x <= b_ub, bounds[:,0] <= x <= bounds[:,1]."""

    c: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    bounds: np.ndarray | None = None  # (n, 2), +-inf allowed; default [0, inf)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if n == 0:
            raise DimensionMismatch("objective has no variables")

        def check_block(A, b, name):
            if A is None and b is None:
                return None, None
            if A is None or b is None:
                raise DimensionMismatch(f"{name} matrix and rhs must come together")
            A = np.atleast_2d(np.asarray(A, dtype=float))
            b = np.asarray(b, dtype=float).ravel()
            if A.shape != (b.size, n):
                raise DimensionMismatch(
                    f"{name} block is {A.shape}, expected ({b.size}, {n})")
            return A, b

        self.A_eq, self.b_eq = check_block(self.A_eq, self.b_eq, "equality")
        self.A_ub, self.b_ub = check_block(self.A_ub, self.b_ub, "inequality")
        if self.bounds is None:
            self.bounds = np.column_stack([np.zeros(n), np.full(n, np.inf)])
        else:
            self.bounds = np.asarray(self.bounds, dtype=float)
            if self.bounds.shape != (n, 2):
                raise DimensionMismatch(f"bounds must be ({n}, 2), got {self.bounds.shape}")
            if np.any(self.bounds[:, 0] > self.bounds[:, 1]):
                j = int(np.argmax(self.bounds[:, 0] > self.bounds[:, 1]))
                raise DimensionMismatch(f"bounds[{j}] has lower > upper")

    @property
    def n_vars(self) -> int:
        return self.c.size


@dataclass
class Basis:
    """Opaque warm-start token: basic column set plus nonbasic rest state."""

    basic: np.ndarray
    state: np.ndarray


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None
    objective: float
    eq_duals: np.ndarray | None = None
    ub_duals: np.ndarray | None = None
    basis: Basis | None = None
    iterations: int = 0


# ---- simplex core --------------------------------------------------------


class _Simplex:
    """Bounded-variable revised simplex over the augmented column set
    [user vars | ub slacks | artificials]."""

    def __init__(self, lp: LinearProgram):
        n = lp.n_vars
        me = 0 if lp.A_eq is None else lp.b_eq.size
        mu = 0 if lp.A_ub is None else lp.b_ub.size
        m = me + mu
        blocks = []
        rhs = []
        if me:
            blocks.append(lp.A_eq)
            rhs.append(lp.b_eq)
        if mu:
            blocks.append(lp.A_ub)
            rhs.append(lp.b_ub)
        A_struct = np.vstack(blocks) if blocks else np.zeros((0, n))
        self.b = np.concatenate(rhs) if rhs else np.zeros(0)
        self.m, self.me, self.n_user = m, me, n
        self.n_slack = mu
        self.n_total = n + mu + m
        self.A = np.zeros((m, self.n_total))
        self.A[:, :n] = A_struct
        if mu:
            self.A[me:, n:n + mu] = np.eye(mu)
        if m:
            self.A[:, n + mu:] = np.eye(m)
        self.lo = np.concatenate([lp.bounds[:, 0], np.zeros(mu), np.zeros(m)])
        self.hi = np.concatenate([lp.bounds[:, 1], np.full(mu, np.inf), np.zeros(m)])
        self.c2 = np.zeros(self.n_total)
        self.c2[:n] = lp.c
        self.x = np.zeros(self.n_total)
        self.state = np.full(self.n_total, _LOWER, dtype=np.int8)
        self.basic = np.zeros(m, dtype=int)
        self.Binv = np.eye(m)
        self.pivots = 0
        self.fresh = 0  # pivot count at the last exact factorization

    # -- setup --

    def _rest_nonbasic(self, j):
        if np.isfinite(self.lo[j]):
            self.state[j] = _LOWER
            self.x[j] = self.lo[j]
        elif np.isfinite(self.hi[j]):
            self.state[j] = _UPPER
            self.x[j] = self.hi[j]
        else:
            self.state[j] = _FREE
            self.x[j] = 0.0

    def start_cold(self):
        for j in range(self.n_user + self.n_slack):
            self._rest_nonbasic(j)
        resid = self.b - self.A[:, :self.n_user + self.n_slack] @ self.x[:self.n_user + self.n_slack]
        art0 = self.n_user + self.n_slack
        c1 = np.zeros(self.n_total)
        for i in range(self.m):
            j = art0 + i
            self.basic[i] = j
            self.state[j] = _BASIC
            self.x[j] = resid[i]
            if resid[i] >= 0.0:
                self.lo[j], self.hi[j] = 0.0, np.inf
                c1[j] = 1.0
            else:
                self.lo[j], self.hi[j] = -np.inf, 0.0
                c1[j] = -1.0
        self.Binv = np.eye(self.m)
        return c1

    def try_warm(self, basis: Basis) -> bool:
        if basis.basic.shape != (self.m,) or basis.state.shape != (self.n_total,):
            return False
        if np.unique(basis.basic).size != self.m:
            return False
        if basis.basic.min(initial=0) < 0 or basis.basic.max(initial=-1) >= self.n_total:
            return False
        art0 = self.n_user + self.n_slack
        self.lo[art0:] = 0.0
        self.hi[art0:] = 0.0
        B = self.A[:, basis.basic]
        try:
            Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            return False
        if not np.all(np.isfinite(Binv)):
            return False
        if np.count_nonzero(basis.state == _BASIC) != self.m:
            return False
        if not np.array_equal(np.sort(np.where(basis.state == _BASIC)[0]), np.sort(basis.basic)):
            return False
        self.basic = basis.basic.copy()
        self.state = basis.state.copy()
        for j in range(self.n_total):
            if self.state[j] == _BASIC:
                continue
            if self.state[j] == _LOWER and np.isfinite(self.lo[j]):
                self.x[j] = self.lo[j]
            elif self.state[j] == _UPPER and np.isfinite(self.hi[j]):
                self.x[j] = self.hi[j]
            else:
                self._rest_nonbasic(j)
        self.Binv = Binv
        nonbasic = self.state != _BASIC
        rhs = self.b - self.A[:, nonbasic] @ self.x[nonbasic]
        xb = Binv @ rhs
        if np.any(xb < self.lo[self.basic] - 1e-7) or np.any(xb > self.hi[self.basic] + 1e-7):
            return False
        self.x[self.basic] = np.clip(xb, self.lo[self.basic], self.hi[self.basic])
        return True

    # -- iteration --

    def _refactor(self):
        B = self.A[:, self.basic]
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:
            raise LpFailure("basis matrix became singular") from exc
        nonbasic = self.state != _BASIC
        rhs = self.b - self.A[:, nonbasic] @ self.x[nonbasic]
        self.x[self.basic] = self.Binv @ rhs
        self.fresh = self.pivots

    def run(self, c: np.ndarray, phase: int, max_pivots: int) -> str:
        m = self.m
        tabu: dict[int, int] = {}  # var -> pivot count when it left without progress
        mark_obj = float(c @ self.x)  # best objective seen, the progress watermark
        mark_pivots = self.pivots
        while True:
            no_prog = self.pivots - mark_pivots
            if self.pivots >= max_pivots:
                raise LpFailure(f"pivot limit exceeded in phase {phase}")
            y = c[self.basic] @ self.Binv if m else np.zeros(0)
            d = c - y @ self.A if m else c.copy()
            viol = np.zeros(self.n_total)
            at_lo = self.state == _LOWER
            at_hi = self.state == _UPPER
            free = self.state == _FREE
            viol[at_lo] = np.maximum(0.0, -d[at_lo])
            viol[at_hi] = np.maximum(0.0, d[at_hi])
            viol[free] = np.abs(d[free])
            eligible = viol > _DTOL
            if not np.any(eligible):
                if self.pivots != self.fresh:
                    self._refactor()  # confirm before accepting optimality
                    continue
                return OPTIMAL
            if no_prog > _STUCK_LIMIT:
                # Long certified stall.  Against a fresh factorization,
                # accept the vertex if every remaining violation is rounding
                # noise at its own computation scale; otherwise grant a new
                # window and let the tabu rule keep attacking the real ones.
                if self.pivots != self.fresh:
                    self._refactor()
                    continue
                scale = np.abs(c) + np.abs(y) @ np.abs(self.A)
                if np.all(viol <= _NOISE_REL * (1.0 + scale)):
                    return OPTIMAL
                mark_pivots = self.pivots
            if no_prog > _DEGEN_TRIGGER and tabu:
                masked = viol.copy()
                cutoff = self.pivots - _TABU_WINDOW
                for v, when in list(tabu.items()):
                    if when <= cutoff:
                        del tabu[v]
                    else:
                        masked[v] = 0.0
                if np.any(masked > _DTOL):
                    q = int(np.argmax(masked))
                else:
                    q = int(np.argmax(viol))
            else:
                q = int(np.argmax(viol))
            sigma = 1.0 if (self.state[q] == _LOWER or (self.state[q] == _FREE and d[q] < 0)) else -1.0
            w = self.Binv @ self.A[:, q] if m else np.zeros(0)
            delta = -sigma * w  # movement of basic values per unit step

            t_best = np.inf
            leave = -1  # -1 means the entering variable hits its own far bound
            if np.isfinite(self.lo[q]) and np.isfinite(self.hi[q]):
                t_best = self.hi[q] - self.lo[q]
            xb = self.x[self.basic]
            lo_b = self.lo[self.basic]
            hi_b = self.hi[self.basic]
            down = delta < -_PIVTOL
            up = delta > _PIVTOL
            ratios = np.full(m, np.inf)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios[down] = (xb[down] - lo_b[down]) / -delta[down]
                ratios[up] = (hi_b[up] - xb[up]) / delta[up]
            ratios = np.maximum(ratios, 0.0)
            if m:
                rmin = ratios.min()
                if rmin < t_best:
                    ties = np.where(ratios <= rmin + 1e-12)[0]
                    leave = int(ties[np.argmax(np.abs(delta[ties]))])
                    t_best = rmin
            if not np.isfinite(t_best):
                if self.pivots != self.fresh:
                    self._refactor()  # confirm before declaring a ray
                    continue
                if phase == 1:
                    raise LpFailure("phase 1 objective unbounded")
                return UNBOUNDED

            self.x[q] += sigma * t_best
            if m:
                self.x[self.basic] = xb + t_best * delta
            if leave < 0:
                self.state[q] = _UPPER if self.state[q] == _LOWER else _LOWER
                if no_prog > 0:
                    tabu[q] = self.pivots
            else:
                out = self.basic[leave]
                hit_lower = delta[leave] < 0
                self.state[out] = _LOWER if hit_lower else _UPPER
                self.x[out] = self.lo[out] if hit_lower else self.hi[out]
                self.basic[leave] = q
                self.state[q] = _BASIC
                piv = w[leave]
                if abs(piv) < _PIVTOL:
                    self._refactor()
                else:
                    eta = self.Binv[leave] / piv
                    self.Binv -= np.outer(w, eta)
                    self.Binv[leave] = eta
                if no_prog > 0:
                    tabu[out] = self.pivots
            self.pivots += 1
            if self.pivots % _REFACTOR_EVERY == 0:
                self._refactor()
            obj = float(c @ self.x)
            if obj <= mark_obj - _IMP_REL * (1.0 + abs(mark_obj)):
                mark_obj = obj
                mark_pivots = self.pivots


def solve(lp: LinearProgram, basis: Basis | None = None) -> LpSolution:
    """Solve an LP; optionally warm-start from a previous solution's basis.

    A stale basis (wrong shape, singular, or bound-infeasible for the new
    data) silently falls back to a cold phase-1 start.
    """
    sx = _Simplex(lp)
    max_pivots = 20000 + 50 * (sx.m + sx.n_total)
    warm_ok = basis is not None and sx.try_warm(basis)
    if not warm_ok:
        c1 = sx.start_cold()
        if sx.m:
            sx.run(c1, phase=1, max_pivots=max_pivots)
            art0 = sx.n_user + sx.n_slack
            infeas = float(np.abs(sx.x[art0:]).sum())
            if infeas > 1e-7:
                return LpSolution(INFEASIBLE, None, np.inf, iterations=sx.pivots)
            # Pin artificials to zero; redundant rows keep theirs basic.
            sx.lo[art0:] = 0.0
            sx.hi[art0:] = 0.0
            sx.x[art0:] = np.where(np.abs(sx.x[art0:]) <= 1e-7, 0.0, sx.x[art0:])
    status = sx.run(sx.c2, phase=2, max_pivots=max_pivots)
    if status == UNBOUNDED:
        return LpSolution(UNBOUNDED, None, -np.inf, iterations=sx.pivots)
    sx._refactor()
    n = sx.n_user
    x = sx.x[:n].copy()
    # Snap to bounds within tolerance for clean downstream marginals.
    lo, hi = lp.bounds[:, 0], lp.bounds[:, 1]
    snap_lo = np.isfinite(lo) & (np.abs(x - lo) < 1e-9)
    snap_hi = np.isfinite(hi) & (np.abs(x - hi) < 1e-9)
    x[snap_lo] = lo[snap_lo]
    x[snap_hi] = hi[snap_hi]
    y = sx.c2[sx.basic] @ sx.Binv if sx.m else np.zeros(0)
    return LpSolution(
        status=OPTIMAL,
        x=x,
        objective=float(lp.c @ x),
        eq_duals=y[:sx.me].copy(),
        ub_duals=y[sx.me:].copy(),
        basis=Basis(sx.basic.copy(), sx.state.copy()),
        iterations=sx.pivots,
    )


# ---- optimal transport ---------------------------------------------------


@dataclass(frozen=True)
class CouplingMatrix:
    """Joint PMF whose marginals match two weight vectors within 1e-8."""

    matrix: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if np.any(m < -1e-9):
            raise ValueError("coupling has negative entries")
        if np.max(np.abs(m.sum(axis=1) - self.row_marginals)) > 1e-8:
            raise ValueError("row marginals do not match")
        if np.max(np.abs(m.sum(axis=0) - self.col_marginals)) > 1e-8:
            raise ValueError("column marginals do not match")


def solve_transport(cost: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Minimize sum(cost * pi) over couplings of marginals a and b.

    Returns (objective, CouplingMatrix).  Raises MassMismatch when the
    marginals' totals differ by more than 1e-8, LpFailure if the LP solve
    does not come back optimal (it always should: the polytope is nonempty
    and bounded).
    """
    cost = np.asarray(cost, dtype=float)
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if cost.shape != (a.size, b.size):
        raise DimensionMismatch(f"cost is {cost.shape}, expected ({a.size}, {b.size})")
    if np.any(a < 0) or np.any(b < 0):
        raise MassMismatch("marginals must be nonnegative")
    if abs(a.sum() - b.sum()) > 1e-8:
        raise MassMismatch(f"marginal masses differ: {a.sum()} vs {b.sum()}")
    m, n = a.size, b.size
    A_eq = np.zeros((m + n, m * n))
    for i in range(m):
        A_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A_eq[m + j, j::n] = 1.0
    lp = LinearProgram(c=cost.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]))
    sol = solve(lp)
    if sol.status != OPTIMAL:
        raise LpFailure(f"transport solve returned {sol.status}")
    pi = np.maximum(sol.x.reshape(m, n), 0.0)
    return sol.objective, CouplingMatrix(pi, a.copy(), b.copy())
