"""Microscopic swarm tracking with artificial potential fields.

The macroscopic planner outputs a mixture per macro step; this module turns
it into per-robot goals and steers each robot with a quadratic attractive
field plus barrier-style repulsion from obstacles and neighbors.  The
controller is a deliberately simple stand-in for a dedicated
collision-avoidance layer, kept behind assign_targets/step_swarm so an
alternative tracker can be swapped in.  Updates are synchronous: every
robot reads the same snapshot, which makes a step independent of robot
ordering and bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .gauss import Gmm, make_rng
from .geometry import signed_distance_batch

__all__ = [
    "RobotState",
    "ApfParams",
    "apportion",
    "assign_targets",
    "apf_step",
    "step_swarm",
]

_D_FLOOR = 1e-6     # barrier distances are clamped here to keep forces finite


@dataclass(frozen=True)
class RobotState:
    """One omnidirectional robot: position, body radius and speed cap."""

    position: np.ndarray
    radius: float = 0.12
    vmax: float = 1.5

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(2)
        object.__setattr__(self, "position", pos)
        if self.radius <= 0.0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.vmax <= 0.0:
            raise ValueError(f"vmax must be positive, got {self.vmax}")


@dataclass(frozen=True)
class ApfParams:
    """Potential-field gains and ranges.

    The defaults are not taken from any reference; they were tuned until a
    head-on encounter between two default robots keeps a positive surface
    gap at every step (see the test suite) and then frozen.  The barrier
    magnitude is gain * (1/d - 1/range) / d**2 for surface distance d below
    the influence range, so repulsion overwhelms any workspace-scale
    attraction before the gap can close within one step.
    """

    attract_gain: float = 1.0
    obstacle_repulse_gain: float = 10.0
    obstacle_influence_range: float = 3.0
    robot_repulse_gain: float = 10.0
    robot_influence_range: float = 1.0
    dt: float = 0.1

    def __post_init__(self):
        for name in ("attract_gain", "obstacle_repulse_gain",
                     "obstacle_influence_range", "robot_repulse_gain",
                     "robot_influence_range", "dt"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


# ---- target assignment -------------------------------------------------------


def apportion(weights, n: int) -> np.ndarray:
    """Integer split of n items proportional to weights (largest remainder).

    Ties go to the lowest component index, so the split is deterministic.
    """
    w = np.asarray(weights, dtype=float)
    if n < 0:
        raise ValueError("cannot apportion a negative count")
    quota = w / w.sum() * n
    base = np.floor(quota).astype(int)
    short = n - int(base.sum())
    if short > 0:
        order = np.argsort(-(quota - base), kind="stable")
        base[order[:short]] += 1
    return base


def assign_targets(robots, mix: Gmm, seed) -> np.ndarray:
    """Per-robot goal points drawn from the planned mixture.

    Component sample counts follow the mixture weights (largest-remainder
    rounding); robots are then matched to the pooled samples greedily by
    ascending pair distance.  Fixed seed, fixed result.
    """
    if not robots:
        raise ValueError("cannot assign targets to an empty swarm")
    n = len(robots)
    counts = apportion(mix.weights, n)
    rng = make_rng(seed)
    points = np.empty((n, 2))
    at = 0
    for comp, count in zip(mix.components, counts):
        if count == 0:
            continue
        z = rng.standard_normal((int(count), 2))
        chol = np.linalg.cholesky(comp.cov)
        points[at:at + count] = comp.mean + z @ chol.T
        at += count
    positions = np.array([r.position for r in robots])
    diff = positions[:, None, :] - points[None, :, :]
    dist2 = np.einsum("rpk,rpk->rp", diff, diff)
    order = np.argsort(dist2, axis=None, kind="stable")
    targets = np.empty((n, 2))
    robot_free = np.ones(n, dtype=bool)
    point_free = np.ones(n, dtype=bool)
    remaining = n
    for flat in order:
        r, p = divmod(int(flat), n)
        if robot_free[r] and point_free[p]:
            targets[r] = points[p]
            robot_free[r] = False
            point_free[p] = False
            remaining -= 1
            if remaining == 0:
                break
    return targets


# ---- potential-field stepping -------------------------------------------------


def _barrier(d: np.ndarray, influence: float, gain: float) -> np.ndarray:
    """Repulsion magnitude at surface distance d (zero beyond influence)."""
    d = np.maximum(d, _D_FLOOR)
    mag = gain * (1.0 / d - 1.0 / influence) / (d * d)
    return np.where(d < influence, mag, 0.0)


def _velocities(positions, targets, obstacles, radii, params: ApfParams):
    """Raw potential-field velocities for a position snapshot (no cap)."""
    vel = params.attract_gain * (targets - positions)
    for poly in obstacles:
        sd, _, normal = signed_distance_batch(positions, poly)
        mag = _barrier(sd - radii, params.obstacle_influence_range,
                       params.obstacle_repulse_gain)
        vel += mag[:, None] * normal
    n = positions.shape[0]
    if n > 1:
        diff = positions[:, None, :] - positions[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        gap = dist - (radii[:, None] + radii[None, :])
        mag = _barrier(gap, params.robot_influence_range,
                       params.robot_repulse_gain)
        np.fill_diagonal(mag, 0.0)
        # robots at the exact same point have no defined direction; skip them
        safe = np.where(dist > 0.0, dist, np.inf)
        vel += np.einsum("ij,ijk->ik", mag / safe, diff)
    return vel


def _advance(positions, vel, vmaxes, dt: float) -> np.ndarray:
    speed = np.sqrt(np.einsum("ik,ik->i", vel, vel))
    with np.errstate(invalid="ignore"):
        scale = np.where(speed > vmaxes, vmaxes / np.maximum(speed, 1e-300),
                         1.0)
    return positions + scale[:, None] * vel * dt


def apf_step(robot: RobotState, target, obstacles, neighbors,
             params: ApfParams) -> RobotState:
    """Advance one robot a single time step against a neighbor snapshot."""
    everyone = [robot, *neighbors]
    positions = np.array([r.position for r in everyone])
    radii = np.array([r.radius for r in everyone])
    targets = np.vstack([np.asarray(target, dtype=float).reshape(1, 2),
                         positions[1:]])
    vel = _velocities(positions, targets, obstacles, radii, params)
    new = _advance(positions[:1], vel[:1], np.array([robot.vmax]), params.dt)
    return replace(robot, position=new[0])


def step_swarm(robots, targets, obstacles, params: ApfParams):
    """Advance every robot one time step from the same snapshot."""
    robots = list(robots)
    if not robots:
        return []
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (len(robots), 2):
        raise ValueError(
            f"need one 2-d target per robot, got shape {targets.shape}")
    positions = np.array([r.position for r in robots])
    radii = np.array([r.radius for r in robots])
    vmaxes = np.array([r.vmax for r in robots])
    vel = _velocities(positions, targets, obstacles, radii, params)
    new = _advance(positions, vel, vmaxes, params.dt)
    return [replace(r, position=p) for r, p in zip(robots, new)]
