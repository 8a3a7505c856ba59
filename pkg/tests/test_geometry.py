import numpy as np
import pytest

from polardewarp.geometry import (
    ContourSet,
    MappingGrid,
    augment_grid,
    contour_resample,
    contours_from_grid,
    edge_lengths,
    from_polar,
    grid_rings,
    point_in_polygon,
    polyline_length,
    regular_lattice,
    ring_indices,
    to_polar,
)

ORIGIN = np.zeros(2)


def test_to_polar_axis_cases():
    theta, rho = to_polar(np.array([1.0, 0.0]), ORIGIN)
    assert theta == 0.0 and rho == 1.0
    theta, rho = to_polar(np.array([0.0, 1.0]), ORIGIN)
    assert np.isclose(theta, np.pi / 2) and np.isclose(rho, 1.0)
    theta, rho = to_polar(np.array([-1.0, -1.0]), ORIGIN)
    assert np.isclose(theta, 5 * np.pi / 4) and np.isclose(rho, np.sqrt(2))


def test_to_polar_degenerate_point():
    theta, rho = to_polar(ORIGIN, ORIGIN)
    assert theta == 0.0 and rho == 0.0


def test_from_polar_cases():
    assert np.allclose(from_polar(0.0, 1.0, ORIGIN), [1.0, 0.0])
    assert np.allclose(from_polar(np.pi, 2.0, np.array([0.5, 0.5])), [-1.5, 0.5])


def test_polar_round_trip_random():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-3, 3, size=(1000, 2))
    origin = rng.uniform(-1, 1, size=2)
    theta, rho = to_polar(pts, origin)
    back = from_polar(theta, rho, origin)
    assert np.max(np.abs(back - pts)) < 1e-9
    theta2, rho2 = to_polar(back, origin)
    assert np.max(np.abs(theta2 - theta)) < 1e-9
    assert np.max(np.abs(rho2 - rho)) < 1e-9


def test_augment_grid_unit_lattice():
    grid = augment_grid(regular_lattice(3, 3))
    assert np.allclose(grid.origin, [0.5, 0.5])
    assert grid.rho[1, 1] == 0.0
    # lattice step is 0.5 on the corner diagonal
    assert np.isclose(grid.rho[0, 0], np.sqrt(2) * 0.5)


def test_augment_grid_matches_distance_oracle():
    rng = np.random.default_rng(1)
    xy = rng.uniform(0, 1, size=(5, 5, 2))
    grid = augment_grid(xy)
    origin = xy.reshape(-1, 2).mean(axis=0)
    for i in range(5):
        for j in range(5):
            expected = np.sqrt(
                (xy[i, j, 0] - origin[0]) ** 2 + (xy[i, j, 1] - origin[1]) ** 2
            )
            assert np.isclose(grid.rho[i, j], expected, atol=1e-12)


def test_augment_grid_translation_equivariance():
    rng = np.random.default_rng(2)
    xy = rng.uniform(0, 1, size=(6, 4, 2))
    t = np.array([0.37, -0.21])
    a = augment_grid(xy)
    b = augment_grid(xy + t)
    assert np.allclose(b.origin, a.origin + t, atol=1e-12)
    assert np.allclose(b.rho, a.rho, atol=1e-12)
    assert np.allclose(b.theta, a.theta, atol=1e-12)


def test_augment_grid_rejects_non_finite():
    xy = regular_lattice(3, 3)
    xy[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        augment_grid(xy)


def test_mapping_grid_rejects_inconsistent_channels():
    grid = augment_grid(regular_lattice(4, 4))
    pts = grid.points.copy()
    pts[0, 0, 3] += 1e-6
    with pytest.raises(ValueError, match="rho channel"):
        MappingGrid(points=pts, origin=grid.origin)


@pytest.mark.parametrize(
    "h,w,sizes",
    [(5, 5, [16, 8, 1]), (4, 4, [12, 4]), (3, 7, [16, 5]), (3, 3, [8, 1])],
)
def test_ring_sizes(h, w, sizes):
    rings = ring_indices(h, w)
    assert [r[0].size for r in rings] == sizes
    assert sum(r[0].size for r in rings) == h * w


def test_ring_partition_visits_each_point_once():
    for h, w in [(5, 5), (4, 6), (3, 7), (8, 3)]:
        seen = set()
        for rows, cols in ring_indices(h, w):
            for i, j in zip(rows, cols):
                assert (i, j) not in seen
                seen.add((int(i), int(j)))
        assert len(seen) == h * w


def test_ring_order_hand_enumerated_3x7():
    rings = ring_indices(3, 7)
    outer = list(zip(rings[0][0].tolist(), rings[0][1].tolist()))
    # top row, right column, bottom row, left column, counterclockwise in raw coords
    assert outer == [
        (0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5),
        (0, 6), (1, 6),
        (2, 6), (2, 5), (2, 4), (2, 3), (2, 2), (2, 1),
        (2, 0), (1, 0),
    ]
    inner = list(zip(rings[1][0].tolist(), rings[1][1].tolist()))
    assert inner == [(1, 1), (1, 2), (1, 3), (1, 4), (1, 5)]


def test_grid_rings_ccw_orientation():
    grid = augment_grid(regular_lattice(5, 5))
    ring = grid_rings(grid)[0]
    x, y = ring[:, 0], ring[:, 1]
    area2 = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    assert area2 > 0  # counterclockwise in raw coordinates


SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def test_contour_resample_square_axis_rays():
    radii = contour_resample(SQUARE, np.array([0.5, 0.5]), 4)
    assert np.allclose(radii, 0.5)


def test_contour_resample_square_diagonals():
    radii = contour_resample(SQUARE, np.array([0.5, 0.5]), 8)
    assert np.allclose(radii[0::2], 0.5)
    assert np.allclose(radii[1::2], 0.5 * np.sqrt(2))


def test_contour_resample_circle_any_b():
    rng = np.random.default_rng(3)
    for b in (4, 7, 32):
        r = rng.uniform(0.5, 2.0)
        ang = np.linspace(0, 2 * np.pi, 720, endpoint=False)
        circle = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)
        radii = contour_resample(circle, ORIGIN, b)
        # polygonal approximation of the circle: radius accurate to chord sagitta
        assert np.allclose(radii, r, atol=r * 1e-4)


def test_contour_resample_origin_outside():
    with pytest.raises(ValueError, match="origin-not-enclosed"):
        contour_resample(SQUARE, np.array([2.0, 2.0]), 8)


def _inside_many(points, polygon):
    """Independent vectorized even-odd test used by the ray-march oracle."""
    x, y = points[:, 0], points[:, 1]
    px, py = polygon[:, 0], polygon[:, 1]
    qx, qy = np.roll(px, -1), np.roll(py, -1)
    inside = np.zeros(len(points), dtype=bool)
    for k in range(len(polygon)):
        crosses = (py[k] > y) != (qy[k] > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = px[k] + (y - py[k]) * (qx[k] - px[k]) / (qy[k] - py[k])
        inside ^= crosses & (x < xint)
    return inside


def _ray_march_radius(polygon, origin, angle, rmax=2.0):
    """Boundary distance by marching along the ray and bisecting the last
    inside-to-outside transition; effective resolution far below 1e-6."""
    d = np.array([np.cos(angle), np.sin(angle)])
    ts = np.linspace(0.0, rmax, 10_000)
    inside = _inside_many(origin + ts[:, None] * d, polygon)
    last = np.max(np.nonzero(inside))
    lo, hi = ts[last], ts[min(last + 1, len(ts) - 1)]
    for _ in range(3):
        ts = np.linspace(lo, hi, 100)
        inside = _inside_many(origin + ts[:, None] * d, polygon)
        if not inside.any():
            break
        last = np.max(np.nonzero(inside))
        lo, hi = ts[last], ts[min(last + 1, len(ts) - 1)]
    return 0.5 * (lo + hi)


def test_contour_resample_star_polygon_against_ray_march():
    rng = np.random.default_rng(4)
    verts = 16
    ang = np.arange(verts) * 2 * np.pi / verts
    r = rng.uniform(0.3, 0.9, size=verts)
    polygon = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)
    radii = contour_resample(polygon, ORIGIN, 64)
    for k in range(64):
        expected = _ray_march_radius(polygon, ORIGIN, k * 2 * np.pi / 64)
        assert abs(radii[k] - expected) < 1e-6


def test_contours_from_grid_layers():
    grid = augment_grid(regular_lattice(8, 8))
    contours = contours_from_grid(grid, layers=2, points_per_layer=16)
    assert contours.radii.shape == (2, 16)
    assert np.all(contours.radii[0] > contours.radii[1])  # regular lattice: nested rings


def test_contours_from_grid_too_many_layers():
    grid = augment_grid(regular_lattice(4, 4))
    with pytest.raises(ValueError, match="layers"):
        contours_from_grid(grid, layers=3, points_per_layer=8)


def test_edge_lengths_identity_lattice():
    e = edge_lengths(augment_grid(regular_lattice(5, 5)))
    assert np.allclose(e.as_array(), 1.0)


def test_edge_lengths_scaled_x():
    xy = regular_lattice(5, 5)
    xy[..., 0] *= 2.0
    e = edge_lengths(augment_grid(xy))
    assert np.isclose(e.top, 2.0) and np.isclose(e.bottom, 2.0)
    assert np.isclose(e.left, 1.0) and np.isclose(e.right, 1.0)


def test_edge_length_sinusoid_against_quadrature():
    from scipy.integrate import quad

    w = 64
    amp, freq = 0.03, 2.0
    xy = regular_lattice(4, w)
    xs = xy[0, :, 0]
    xy[0, :, 1] = amp * np.sin(2 * np.pi * freq * xs)
    grid_top = xy[0]
    measured = polyline_length(grid_top)
    exact, _ = quad(
        lambda x: np.sqrt(1 + (amp * 2 * np.pi * freq * np.cos(2 * np.pi * freq * x)) ** 2),
        0.0,
        1.0,
        limit=200,
    )
    assert abs(measured - exact) / exact < 0.01


def test_edge_lengths_rotation_invariance():
    rng = np.random.default_rng(5)
    xy = rng.uniform(0, 1, size=(6, 6, 2))
    phi = 0.7
    R = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    a = edge_lengths(augment_grid(xy)).as_array()
    b = edge_lengths(augment_grid(xy @ R.T)).as_array()
    assert np.max(np.abs(a - b)) < 1e-9


def test_point_in_polygon_basic():
    assert point_in_polygon(np.array([0.5, 0.5]), SQUARE)
    assert not point_in_polygon(np.array([1.5, 0.5]), SQUARE)


def test_contour_set_validation():
    with pytest.raises(ValueError, match="non-negative"):
        ContourSet(radii=np.array([[-0.1, 0.2]]), origin=ORIGIN)
