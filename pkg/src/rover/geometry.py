"""Convex polygon obstacles and signed distance queries.

Obstacles are convex polygons with vertices stored counterclockwise.  The
signed distance of a point is the Euclidean distance to the boundary,
negated when the point lies inside (boundary points count as contained).
For point-vs-polygon queries the GJK/EPA machinery reduces to exact
projections onto edges, which is what this module implements.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Absolute geometric tolerance, in meters.
EPS = 1e-9


class PolygonError(ValueError):
    """Base class for polygon validation failures."""


class NotConvex(PolygonError):
    """Raised when a vertex loop has a reflex corner."""


class TooFewVertices(PolygonError):
    """Raised when fewer than three vertices are supplied."""


class DegenerateEdge(PolygonError):
    """Raised on duplicate vertices, collinear corners or zero area."""


# ---- polygon type -------------------------------------------------------


@dataclass(frozen=True)
class ConvexPolygon:
    """Convex polygon with CCW vertices and precomputed edge data."""

    vertices: np.ndarray
    edge_dirs: np.ndarray = field(init=False, repr=False)
    edge_lens: np.ndarray = field(init=False, repr=False)
    outward_normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise PolygonError(f"vertex array must be (n, 2), got {verts.shape}")
        if verts.shape[0] < 3:
            raise TooFewVertices(f"need at least 3 vertices, got {verts.shape[0]}")
        diffs = verts[:, None, :] - verts[None, :, :]
        dists = np.hypot(diffs[..., 0], diffs[..., 1])
        np.fill_diagonal(dists, np.inf)
        if dists.min() < EPS:
            i, j = np.unravel_index(np.argmin(dists), dists.shape)
            raise DegenerateEdge(f"vertices {min(i, j)} and {max(i, j)} coincide")
        edges = np.roll(verts, -1, axis=0) - verts
        area2 = float(np.sum(verts[:, 0] * np.roll(verts[:, 1], -1)
                             - np.roll(verts[:, 0], -1) * verts[:, 1]))
        if abs(area2) < EPS:
            raise DegenerateEdge("polygon has zero area")
        if area2 < 0.0:
            verts = verts[::-1].copy()
            edges = np.roll(verts, -1, axis=0) - verts
        # Strict convexity: every corner must turn left.  A zero cross
        # product (collinear corner) is degenerate rather than reflex.
        cross = edges[:, 0] * np.roll(edges[:, 1], -1) - edges[:, 1] * np.roll(edges[:, 0], -1)
        lens = np.hypot(edges[:, 0], edges[:, 1])
        turn = cross / (lens * np.roll(lens, -1))
        if np.any(np.abs(turn) < EPS):
            raise DegenerateEdge(f"collinear corner at vertex {int(np.argmin(np.abs(turn)))}")
        if np.any(turn < 0.0):
            raise NotConvex(f"reflex corner at vertex {int(np.argmin(turn))}")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "edge_dirs", edges)
        object.__setattr__(self, "edge_lens", lens)
        normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1) / lens[:, None]
        object.__setattr__(self, "outward_normals", normals)


def validate_polygon(vertices) -> ConvexPolygon:
    """Validate a vertex loop (either orientation) and return the polygon."""
    return ConvexPolygon(np.asarray(vertices, dtype=float))


# ---- signed distance ----------------------------------------------------


@dataclass(frozen=True)
class SdfResult:
    """Signed distance, closest boundary point and outward unit normal."""

    distance: float
    closest_point: np.ndarray
    normal: np.ndarray


def signed_distance_batch(points: np.ndarray, poly: ConvexPolygon):
    """Signed distance of many points at once.

    Returns (distances (n,), closest points (n, 2), normals (n, 2)).  The
    normal is the outward unit normal of the closest feature; on ties the
    lowest edge index wins, and for points on the boundary the outward
    normal of that edge is used.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    verts = poly.vertices
    dirs = poly.edge_dirs
    lens2 = poly.edge_lens ** 2
    rel = pts[:, None, :] - verts[None, :, :]                     # (n, e, 2)
    t = np.einsum("nek,ek->ne", rel, dirs) / lens2[None, :]
    t = np.clip(t, 0.0, 1.0)
    proj = verts[None, :, :] + t[..., None] * dirs[None, :, :]    # (n, e, 2)
    diff = pts[:, None, :] - proj
    d2 = np.einsum("nek,nek->ne", diff, diff)
    best = np.argmin(d2, axis=1)                                  # first min: lowest edge index
    idx = np.arange(pts.shape[0])
    closest = proj[idx, best]
    dist = np.sqrt(d2[idx, best])
    # Containment: inside or on the boundary of every half plane.
    cross = rel[..., 0] * dirs[None, :, 1] - rel[..., 1] * dirs[None, :, 0]
    inside = np.all(-cross >= -EPS * poly.edge_lens[None, :], axis=1)
    sign = np.where(inside, -1.0, 1.0)
    normals = np.empty_like(closest)
    off_boundary = dist > EPS
    nz = np.where(off_boundary)[0]
    if nz.size:
        normals[nz] = sign[nz, None] * (pts[nz] - closest[nz]) / dist[nz, None]
    on = np.where(~off_boundary)[0]
    if on.size:
        normals[on] = poly.outward_normals[best[on]]
    return sign * dist, closest, normals


def signed_distance(p, poly: ConvexPolygon) -> SdfResult:
    """Signed distance of a single point (negative inside the polygon)."""
    d, c, n = signed_distance_batch(np.asarray(p, dtype=float)[None, :], poly)
    return SdfResult(float(d[0]), c[0], n[0])


def contains(p, poly: ConvexPolygon) -> bool:
    """True when the point is inside or on the boundary.

    Defined as signed_distance(p) <= 0 so the two queries can never
    disagree.
    """
    return signed_distance(p, poly).distance <= 0.0
