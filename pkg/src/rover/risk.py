"""Collision risk as CVaR of signed-distance distributions.

A Gaussian position pushed through a signed distance field is treated via
first-order linearization: if X ~ N(mu, S) then sd(X, O) is approximately
N(sd(mu, O), n.S.n) with n the outward SDF normal at mu.  A mixture of
positions therefore yields a univariate Gaussian mixture of distances.

Risk is measured on the *loss* orientation the caller supplies: CVaR_a(Y)
is the mean of the worst (largest) tail of probability a.  For collision
checks the caller passes Y = -sd, so "large" means "deep inside the
obstacle"; this module itself is orientation-agnostic.

Tail levels: with z* = VaR_a(Y) and a_j = P(Y_j > z*), the mixture CVaR
decomposes as  CVaR_a(Y) = (1/a) sum_j w_j a_j CVaR_{a_j}(Y_j)  and the
raw partial derivative with respect to w_j (no renormalization) is
(1/a) a_j (CVaR_{a_j}(Y_j) - z*).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .gauss import Gaussian2, Gmm
from .geometry import ConvexPolygon, signed_distance

_ATOM_STD = 1e-12          # below this a component is treated as a point mass
_ATOM_MATCH = 1e-9         # how close to the VaR an atom must sit to straddle it
_VAR_BISECT_TOL = 1e-12    # absolute tolerance on the VaR location
_DENSITY_FLOOR = 1e-12     # mixture density under which the gradient is ill-posed
_SQRT_2PI = np.sqrt(2.0 * np.pi)


class AlphaOutOfRange(ValueError):
    """Raised when a tail level is outside (0, 1]."""


class DegenerateDensity(RuntimeError):
    """Raised when the mixture density at the VaR is numerically zero."""


@dataclass(frozen=True)
class RiskParams:
    """Tail level alpha in (0, 1] and CVaR bound epsilon (meters)."""

    alpha: float
    epsilon: float

    def __post_init__(self):
        _check_alpha(self.alpha)


@dataclass(frozen=True)
class GaussianSdf:
    """Univariate Gaussian distance: mean, std and (optionally) the SDF
    normal at the expansion point."""

    mean: float
    std: float
    normal: np.ndarray | None = None

    def __post_init__(self):
        if self.std < 0.0:
            raise ValueError(f"std must be nonnegative, got {self.std}")


@dataclass(frozen=True)
class GmmSdf:
    """Mixture of univariate distance Gaussians; weights on the simplex."""

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

    def arrays(self):
        means = np.array([c.mean for c in self.components])
        stds = np.array([c.std for c in self.components])
        return means, stds, self.weights


def negated(y: GmmSdf) -> GmmSdf:
    """Mixture of -Y; used to turn distances into losses."""
    return GmmSdf(tuple(GaussianSdf(-c.mean, c.std) for c in y.components), y.weights)


def _check_alpha(alpha: float):
    if not (0.0 < alpha <= 1.0):
        raise AlphaOutOfRange(f"alpha must be in (0, 1], got {alpha}")


def _as_arrays(y):
    """Accept a GmmSdf or a (means, stds, weights) triple."""
    if isinstance(y, GmmSdf):
        return y.arrays()
    means, stds, weights = y
    means = np.asarray(means, dtype=float).ravel()
    stds = np.asarray(stds, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if not (means.size == stds.size == weights.size):
        raise ValueError("means, stds and weights must have equal length")
    if np.any(stds < 0.0) or np.any(weights < 0.0):
        raise ValueError("stds and weights must be nonnegative")
    return means, stds, weights


# ---- distance distributions ------------------------------------------------


def sdf_gaussian(g: Gaussian2, poly: ConvexPolygon) -> GaussianSdf:
    """First-order distance distribution of a Gaussian position."""
    res = signed_distance(g.mean, poly)
    n = res.normal
    var = float(n @ g.cov @ n)
    return GaussianSdf(res.distance, float(np.sqrt(max(var, 0.0))), n)


def sdf_gmm(mix: Gmm, poly: ConvexPolygon) -> GmmSdf:
    """Per-component distance distributions of a position mixture."""
    return GmmSdf(tuple(sdf_gaussian(g, poly) for g in mix.components), mix.weights)


# ---- Gaussian CVaR ----------------------------------------------------------


def _phi(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def cvar_gaussian(mean: float, std: float, alpha: float) -> float:
    """Upper-tail CVaR of N(mean, std^2): mean + std * pdf(isf(a)) / a."""
    _check_alpha(alpha)
    if std < 0.0:
        raise ValueError(f"std must be nonnegative, got {std}")
    if std <= _ATOM_STD:
        return float(mean)
    q = -ndtri(alpha)  # upper-tail quantile of the standard normal
    if not np.isfinite(q):  # alpha == 1
        return float(mean)
    return float(mean + std * _phi(q) / alpha)


# ---- mixture survival machinery ---------------------------------------------


class _MixTail:
    """Survival/pdf/partial-expectation views of one univariate mixture."""

    def __init__(self, means, stds, weights):
        self.means = means
        self.stds = stds
        self.weights = weights
        self.cont = stds > _ATOM_STD
        self.safe = np.where(self.cont, stds, 1.0)

    def survival(self, z: float) -> float:
        u = (z - self.means) / self.safe
        s = np.where(self.cont, ndtr(-u), (self.means > z).astype(float))
        return float(self.weights @ s)

    def pdf(self, z: float) -> float:
        if not np.any(self.cont):
            return 0.0
        u = (z - self.means[self.cont]) / self.stds[self.cont]
        return float(self.weights[self.cont] @ (_phi(u) / self.stds[self.cont]))

    def var(self, alpha: float) -> float:
        """Smallest z with survival(z) <= alpha: bisection plus Newton."""
        pad = 10.0 * np.maximum(self.stds, _ATOM_STD)
        lo = float(np.min(self.means - pad))
        hi = float(np.max(self.means + pad))
        if self.survival(lo) <= alpha:
            return lo
        # Invariant: survival(lo) > alpha >= survival(hi).
        while hi - lo > _VAR_BISECT_TOL:
            mid = 0.5 * (lo + hi)
            if self.survival(mid) <= alpha:
                hi = mid
            else:
                lo = mid
        z = hi
        for _ in range(4):
            s = self.survival(z)
            if abs(s - alpha) < 1e-15:
                break
            p = self.pdf(z)
            if p < _DENSITY_FLOOR:
                break
            step = (s - alpha) / p
            if abs(step) > 1.0:
                break
            z += step
        return float(z)

    def tail_levels(self, z: float, alpha: float) -> np.ndarray:
        """Per-component tail probabilities beyond z.

        Atoms sitting exactly at z receive the fractional share that makes
        sum(w_j a_j) equal alpha (discrete CVaR convention)."""
        u = (z - self.means) / self.safe
        a = np.where(self.cont, ndtr(-u), (self.means > z).astype(float))
        at_var = ~self.cont & (np.abs(self.means - z) <= _ATOM_MATCH * max(1.0, abs(z)))
        if np.any(at_var):
            mass_at = float(self.weights[at_var].sum())
            strict = float(self.weights @ np.where(at_var, 0.0, a))
            if mass_at > 0.0:
                theta = np.clip((alpha - strict) / mass_at, 0.0, 1.0)
                a = np.where(at_var, theta, a)
        return a

    def partial_expectation(self, z: float, a: np.ndarray) -> np.ndarray:
        """T_j = E[Y_j; Y_j > z] given tail levels a_j."""
        u = (z - self.means) / self.safe
        return self.means * a + np.where(self.cont, self.stds * _phi(u), 0.0)


def var_gmm(y, alpha: float) -> float:
    """Value-at-risk of a univariate mixture: the smallest z with
    P(Y > z) <= alpha."""
    _check_alpha(alpha)
    return _MixTail(*_as_arrays(y)).var(alpha)


def cvar_gmm(y, alpha: float):
    """Mixture CVaR decomposed over components.

    Returns (cvar, var, tail_levels): cvar = (1/a) sum_j w_j a_j
    CVaR_{a_j}(Y_j), evaluated through the partial expectation
    T_j = mu_j a_j + s_j pdf((z*-mu_j)/s_j), which is the same quantity in
    a form stable for extreme tail levels.
    """
    _check_alpha(alpha)
    mix = _MixTail(*_as_arrays(y))
    z = mix.var(alpha)
    a = mix.tail_levels(z, alpha)
    t = mix.partial_expectation(z, a)
    cvar = float(mix.weights @ t) / alpha
    return cvar, z, a


def cvar_grad_weights(y, alpha: float) -> np.ndarray:
    """Raw partial derivatives of the mixture CVaR in the weights.

    grad_j = (1/a) a_j (CVaR_{a_j}(Y_j) - z*).  Raises DegenerateDensity
    when the mixture density at the VaR is numerically zero (the VaR, and
    with it the gradient, is then ill-determined).
    """
    _check_alpha(alpha)
    mix = _MixTail(*_as_arrays(y))
    z = mix.var(alpha)
    if mix.pdf(z) < _DENSITY_FLOOR:
        raise DegenerateDensity(f"mixture density at VaR={z} is below {_DENSITY_FLOOR}")
    a = mix.tail_levels(z, alpha)
    t = mix.partial_expectation(z, a)
    return (t - a * z) / alpha


def cvar_bundle(y, alpha: float):
    """One-pass (cvar, var, tail_levels, grad or None) for constraint rows.

    The gradient entry is None when the density at the VaR is degenerate;
    callers that need a usable row may fall back to the raw formula at the
    bisection point via the returned tail levels.
    """
    _check_alpha(alpha)
    mix = _MixTail(*_as_arrays(y))
    z = mix.var(alpha)
    a = mix.tail_levels(z, alpha)
    t = mix.partial_expectation(z, a)
    cvar = float(mix.weights @ t) / alpha
    grad = (t - a * z) / alpha
    degenerate = mix.pdf(z) < _DENSITY_FLOOR
    return cvar, z, a, grad, degenerate
