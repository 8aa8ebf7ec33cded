"""Gaussians, Gaussian mixtures and Wasserstein-2 geometry.

The distance between two Gaussians has the closed form

    W2(g1, g2)^2 = |mu1 - mu2|^2
                   + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})

and the mixture-level distance used here is the discrete optimal-transport
relaxation over component couplings: the squared distance is the optimal
value of  min_pi sum_ij pi(i,j) W2(g1_i, g2_j)^2  with the mixture weights
as marginals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lp import CouplingMatrix, solve_transport

__all__ = [
    "Gaussian2", "Gmm", "CouplingMatrix", "NonSpd",
    "sqrtm_spd", "w2_gaussian", "w2_gmm", "density", "sample", "make_rng",
]


class NonSpd(ValueError):
    """Raised when a covariance is not symmetric positive definite."""


def _check_spd(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2):
        raise NonSpd(f"covariance must be 2x2, got {cov.shape}")
    if abs(cov[0, 1] - cov[1, 0]) > 1e-9 * max(1.0, abs(cov[0, 1])):
        raise NonSpd("covariance is not symmetric")
    # 2x2 SPD iff positive diagonal and positive determinant.
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if cov[0, 0] <= 0.0 or cov[1, 1] <= 0.0 or det <= 0.0:
        raise NonSpd(f"covariance is not positive definite (det={det})")
    return cov


@dataclass(frozen=True)
class Gaussian2:
    """Planar Gaussian: mean (2,) and SPD covariance (2, 2)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        if mean.shape != (2,):
            raise ValueError(f"mean must have 2 entries, got {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _check_spd(self.cov))


@dataclass(frozen=True)
class Gmm:
    """Finite Gaussian mixture; weights on the probability simplex."""

    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size != len(comps):
            raise ValueError(f"{len(comps)} components but {w.size} weights")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()}, not 1")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    def means(self) -> np.ndarray:
        return np.stack([g.mean for g in self.components])

    def covs(self) -> np.ndarray:
        return np.stack([g.cov for g in self.components])


# ---- matrix square root and W2 -------------------------------------------


def sqrtm_spd(m: np.ndarray) -> np.ndarray:
    """Principal square root of a 2x2 SPD matrix, in closed form.

    With s = sqrt(det M) and r = sqrt(tr M + 2 s), the root is
    (M + s I) / r (Cayley-Hamilton).
    """
    m = _check_spd(m)
    s = np.sqrt(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])
    r = np.sqrt(m[0, 0] + m[1, 1] + 2.0 * s)
    out = (m + s * np.eye(2)) / r
    return out


def w2_gaussian(g1: Gaussian2, g2: Gaussian2) -> float:
    """Wasserstein-2 distance between two planar Gaussians."""
    dmu = g1.mean - g2.mean
    mean_term = float(dmu @ dmu)
    if np.array_equal(g1.cov, g2.cov):
        # Equal covariances cancel exactly; keep the result exact too.
        return float(np.sqrt(mean_term))
    s1 = sqrtm_spd(g1.cov)
    inner = s1 @ g2.cov @ s1
    inner = (inner + inner.T) / 2.0
    cross = sqrtm_spd(inner)
    trace_term = float(np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross))
    return float(np.sqrt(mean_term + max(trace_term, 0.0)))


def w2_gmm(m1: Gmm, m2: Gmm):
    """Mixture-level W2 via optimal transport over component pairs.

    Returns (distance, CouplingMatrix).  The squared distance is the
    transport optimum with squared component distances as costs.
    """
    n1, n2 = len(m1.components), len(m2.components)
    cost = np.empty((n1, n2))
    for i, gi in enumerate(m1.components):
        for j, gj in enumerate(m2.components):
            cost[i, j] = w2_gaussian(gi, gj) ** 2
    obj, plan = solve_transport(cost, m1.weights, m2.weights)
    return float(np.sqrt(max(obj, 0.0))), plan


# ---- density and sampling --------------------------------------------------


def density(mix: Gmm, points: np.ndarray) -> np.ndarray:
    """Mixture PDF evaluated at one or many points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros(pts.shape[0])
    for w, g in zip(mix.weights, mix.components):
        det = g.cov[0, 0] * g.cov[1, 1] - g.cov[0, 1] * g.cov[1, 0]
        inv = np.array([[g.cov[1, 1], -g.cov[0, 1]], [-g.cov[1, 0], g.cov[0, 0]]]) / det
        d = pts - g.mean
        quad = np.einsum("ni,ij,nj->n", d, inv, d)
        out += w * np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(det))
    return out if np.asarray(points).ndim > 1 else float(out[0])


def make_rng(seed) -> np.random.Generator:
    """Deterministic counter-based generator; seed may be an int or tuple."""
    if isinstance(seed, np.random.Generator):
        return seed
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def sample(mix: Gmm, seed, n: int) -> np.ndarray:
    """Draw n points from the mixture, deterministically per seed."""
    rng = make_rng(seed)
    comps = rng.choice(len(mix.components), size=n, p=mix.weights)
    z = rng.standard_normal((n, 2))
    chols = np.stack([np.linalg.cholesky(g.cov) for g in mix.components])
    means = mix.means()
    return means[comps] + np.einsum("nij,nj->ni", chols[comps], z)
