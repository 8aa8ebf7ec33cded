"""Signed distance checks against brute-force boundary sampling."""

import numpy as np
import pytest

from rover.geometry import (
    ConvexPolygon,
    DegenerateEdge,
    NotConvex,
    TooFewVertices,
    contains,
    signed_distance,
    signed_distance_batch,
    validate_polygon,
)

UNIT_SQUARE = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
CENTERED_SQUARE = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]


# ---- independent oracles -------------------------------------------------


def boundary_min_distance(p, verts, samples_per_edge=4000):
    """Unsigned distance via dense sampling of the boundary."""
    verts = np.asarray(verts, dtype=float)
    t = np.linspace(0.0, 1.0, samples_per_edge)[:, None]
    best = np.inf
    for i in range(len(verts)):
        a, b = verts[i], verts[(i + 1) % len(verts)]
        pts = a[None, :] * (1 - t) + b[None, :] * t
        best = min(best, float(np.min(np.hypot(*(pts - p).T))))
    return best


def raycast_inside(p, verts):
    """Even-odd crossing test, written independently of the library."""
    verts = np.asarray(verts, dtype=float)
    x, y = p
    inside = False
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xi:
                inside = not inside
    return inside


def random_convex_polygon(rng, n_verts, radius):
    """Convex polygon from angle-sorted points on a randomized circle."""
    angles = np.sort(rng.uniform(0.0, 2 * np.pi, n_verts))
    # Keep angular gaps away from zero so edges are non-degenerate.
    while np.min(np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]]))) < 0.05:
        angles = np.sort(rng.uniform(0.0, 2 * np.pi, n_verts))
    r = radius * rng.uniform(0.8, 1.0)
    return np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)


# ---- validation ----------------------------------------------------------


def test_validate_too_few_vertices():
    with pytest.raises(TooFewVertices):
        validate_polygon([(0, 0), (1, 0)])


def test_validate_duplicate_vertices():
    with pytest.raises(DegenerateEdge):
        validate_polygon([(0, 0), (1, 0), (1.0 + 1e-12, 0.0 + 1e-12), (0, 1)])


def test_validate_collinear_points():
    with pytest.raises(DegenerateEdge):
        validate_polygon([(0, 0), (1, 0), (2, 0), (3, 0)])


def test_validate_collinear_corner():
    with pytest.raises(DegenerateEdge):
        validate_polygon([(0, 0), (0.5, 0.0), (1, 0), (1, 1), (0, 1)])


def test_validate_reflex_corner():
    with pytest.raises(NotConvex):
        validate_polygon([(0, 0), (2, 0), (0.5, 0.5), (0, 2)])


def test_clockwise_input_normalized():
    poly = validate_polygon(list(reversed(UNIT_SQUARE)))
    assert signed_distance((0.5, 0.5), poly).distance < 0
    assert signed_distance((2.0, 0.5), poly).distance == pytest.approx(1.0)


# ---- hand-checked distances ---------------------------------------------


def test_square_outside_edge():
    poly = validate_polygon(UNIT_SQUARE)
    res = signed_distance((2.0, 0.5), poly)
    assert res.distance == pytest.approx(1.0)
    assert res.closest_point == pytest.approx([1.0, 0.5])
    assert res.normal == pytest.approx([1.0, 0.0])


def test_square_outside_corner():
    # Closest feature is the corner (0.5, 0.5): distance sqrt(0.5).
    poly = validate_polygon(CENTERED_SQUARE)
    res = signed_distance((1.0, 1.0), poly)
    assert res.distance == pytest.approx(np.sqrt(0.5), abs=1e-12)
    assert res.closest_point == pytest.approx([0.5, 0.5])
    assert res.normal == pytest.approx(np.array([1.0, 1.0]) / np.sqrt(2.0))


def test_square_inside():
    poly = validate_polygon(UNIT_SQUARE)
    res = signed_distance((0.5, 0.25), poly)
    assert res.distance == pytest.approx(-0.25)
    assert res.normal == pytest.approx([0.0, -1.0])


def test_square_center_tie_lowest_edge():
    # All four edges tie at the center; the first edge (bottom) wins.
    poly = validate_polygon(UNIT_SQUARE)
    res = signed_distance((0.5, 0.5), poly)
    assert res.distance == pytest.approx(-0.5)
    assert res.normal == pytest.approx([0.0, -1.0])
    assert res.closest_point == pytest.approx([0.5, 0.0])


def test_boundary_point_outward_edge_normal():
    poly = validate_polygon(UNIT_SQUARE)
    res = signed_distance((0.5, 0.0), poly)
    assert res.distance == pytest.approx(0.0, abs=1e-12)
    assert res.normal == pytest.approx([0.0, -1.0])
    assert contains((0.5, 0.0), poly)


def test_vertex_point_contained():
    poly = validate_polygon(UNIT_SQUARE)
    assert contains((1.0, 1.0), poly)
    assert signed_distance((1.0, 1.0), poly).distance == pytest.approx(0.0, abs=1e-12)


# ---- randomized properties ----------------------------------------------


def test_random_polygons_match_boundary_sampling():
    rng = np.random.default_rng(7)
    for _ in range(40):
        verts = random_convex_polygon(rng, int(rng.integers(3, 9)), rng.uniform(0.5, 4.0))
        verts += rng.uniform(-3, 3, 2)
        poly = validate_polygon(verts)
        pts = rng.uniform(verts.min() - 3, verts.max() + 3, (20, 2))
        d, closest, normals = signed_distance_batch(pts, poly)
        for k, p in enumerate(pts):
            ref = boundary_min_distance(p, verts)
            assert abs(d[k]) == pytest.approx(ref, abs=2e-4)
            want_inside = raycast_inside(p, verts)
            if abs(d[k]) > 1e-6:  # raycast is ambiguous on the boundary
                assert (d[k] < 0) == want_inside
            # Closest point sits on the boundary.
            assert abs(signed_distance(closest[k], poly).distance) < 1e-9
            assert np.hypot(*normals[k]) == pytest.approx(1.0)
            assert contains(p, poly) == (d[k] <= 0.0)


def test_normal_is_distance_gradient():
    rng = np.random.default_rng(11)
    for _ in range(25):
        verts = random_convex_polygon(rng, int(rng.integers(3, 8)), rng.uniform(1.0, 3.0))
        poly = validate_polygon(verts)
        p = rng.uniform(-5, 5, 2)
        res = signed_distance(p, poly)
        if abs(res.distance) < 0.05:
            continue
        h = 1e-6
        ahead = signed_distance(p + h * res.normal, poly).distance
        assert (ahead - res.distance) / h == pytest.approx(1.0, abs=1e-4)


def test_batch_matches_scalar():
    rng = np.random.default_rng(3)
    poly = validate_polygon(CENTERED_SQUARE)
    pts = rng.uniform(-2, 2, (50, 2))
    d, c, n = signed_distance_batch(pts, poly)
    for k, p in enumerate(pts):
        res = signed_distance(p, poly)
        assert res.distance == d[k]
        assert np.array_equal(res.closest_point, c[k])
        assert np.array_equal(res.normal, n[k])
