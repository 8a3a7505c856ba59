"""Control-point geometry: polar conversion, ring peeling, contour resampling.

Coordinates are normalized image coordinates in [0, 1] (x to the right,
y increasing with row index; angles are measured counterclockwise from the
+x axis in these raw coordinates, without flipping the y axis).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .validation import as_finite_array

TWO_PI = 2.0 * np.pi


def to_polar(points: NDArray, origin: NDArray) -> tuple[NDArray, NDArray]:
    """Convert Cartesian points to polar (theta, rho) about ``origin``.

    Parameters
    ----------
    points : array of shape (..., 2)
    origin : array of shape (2,)

    Returns
    -------
    theta : angles in [0, 2*pi), counterclockwise from the +x axis
    rho : Euclidean distances from the origin

    A point coinciding with the origin maps to (0, 0).
    """
    points = np.asarray(points, dtype=float)
    origin = np.asarray(origin, dtype=float)
    d = points - origin
    rho = np.hypot(d[..., 0], d[..., 1])
    theta = np.mod(np.arctan2(d[..., 1], d[..., 0]), TWO_PI)
    theta = np.where(rho == 0.0, 0.0, theta)
    return theta, rho


def from_polar(theta: NDArray, rho: NDArray, origin: NDArray) -> NDArray:
    """Inverse of :func:`to_polar`; returns points of shape (..., 2)."""
    theta = np.asarray(theta, dtype=float)
    rho = np.asarray(rho, dtype=float)
    origin = np.asarray(origin, dtype=float)
    return origin + np.stack([rho * np.cos(theta), rho * np.sin(theta)], axis=-1)


def wrap_angle(a: NDArray) -> NDArray:
    """Wrap angle differences to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), TWO_PI)


@dataclass(frozen=True)
class MappingGrid:
    """h x w grid of 4-channel control points (x, y, theta, rho).

    The polar channels are always the exact polar coordinates of (x, y)
    about the shared ``origin`` (the centroid of the grid).
    """

    points: NDArray  # (h, w, 4) float64
    origin: NDArray  # (2,) float64

    def __post_init__(self) -> None:
        pts = as_finite_array(self.points, "points", dtype=float)
        org = as_finite_array(self.origin, "origin", dtype=float)
        if pts.ndim != 3 or pts.shape[2] != 4:
            raise ValueError(f"points must have shape (h, w, 4), got {pts.shape}")
        if pts.shape[0] < 3 or pts.shape[1] < 3:
            raise ValueError("grid must be at least 3x3")
        if org.shape != (2,):
            raise ValueError("origin must have shape (2,)")
        theta, rho = to_polar(pts[..., :2], org)
        if np.max(np.abs(rho - pts[..., 3])) > 1e-9:
            raise ValueError("rho channel inconsistent with (x, y) and origin")
        dth = np.abs(wrap_angle(theta - pts[..., 2]))
        # at rho=0 the angle is a degenerate convention, skip it
        if np.max(np.where(rho > 0, dth, 0.0)) > 1e-9:
            raise ValueError("theta channel inconsistent with (x, y) and origin")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "origin", org)

    @property
    def h(self) -> int:
        return self.points.shape[0]

    @property
    def w(self) -> int:
        return self.points.shape[1]

    @property
    def xy(self) -> NDArray:
        return self.points[..., :2]

    @property
    def theta(self) -> NDArray:
        return self.points[..., 2]

    @property
    def rho(self) -> NDArray:
        return self.points[..., 3]


@dataclass(frozen=True)
class ContourSet:
    """Radii of ``a`` contour layers sampled at ``b`` equal polar angles.

    Layer 0 is the outermost layer. Ray k has angle k * 2*pi / b about
    ``origin``. Layers of a warped page may interleave, so no cross-layer
    ordering is enforced, only non-negativity.
    """

    radii: NDArray  # (a, b) float64
    origin: NDArray  # (2,) float64

    def __post_init__(self) -> None:
        radii = as_finite_array(self.radii, "radii", dtype=float)
        org = as_finite_array(self.origin, "origin", dtype=float)
        if radii.ndim != 2:
            raise ValueError(f"radii must have shape (a, b), got {radii.shape}")
        if np.any(radii < 0):
            raise ValueError("contour radii must be non-negative")
        if org.shape != (2,):
            raise ValueError("origin must have shape (2,)")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "origin", org)

    @property
    def layers(self) -> int:
        return self.radii.shape[0]

    @property
    def points_per_layer(self) -> int:
        return self.radii.shape[1]

    @property
    def delta_theta(self) -> float:
        return TWO_PI / self.radii.shape[1]

    @property
    def angles(self) -> NDArray:
        return np.arange(self.radii.shape[1]) * self.delta_theta


@dataclass(frozen=True)
class EdgeLengths:
    """Polyline lengths of the four document edges, in normalized units."""

    left: float
    right: float
    top: float
    bottom: float

    def __post_init__(self) -> None:
        for name in ("left", "right", "top", "bottom"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} edge length must be finite and >= 0")

    def as_array(self) -> NDArray:
        return np.array([self.left, self.right, self.top, self.bottom])


def regular_lattice(h: int, w: int) -> NDArray:
    """Corner-inclusive regular lattice on [0, 1]^2, shape (h, w, 2)."""
    ys, xs = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    return np.stack([xs, ys], axis=-1)


def augment_grid(xy: NDArray) -> MappingGrid:
    """Lift an (h, w, 2) Cartesian grid to a 4-channel :class:`MappingGrid`.

    The polar origin is the centroid of all grid points, which makes the
    polar channels translation-equivariant.
    """
    xy = as_finite_array(xy, "xy", dtype=float)
    if xy.ndim != 3 or xy.shape[2] != 2:
        raise ValueError(f"xy must have shape (h, w, 2), got {xy.shape}")
    origin = xy.reshape(-1, 2).mean(axis=0)
    theta, rho = to_polar(xy, origin)
    points = np.concatenate([xy, theta[..., None], rho[..., None]], axis=-1)
    return MappingGrid(points=points, origin=origin)


def ring_indices(h: int, w: int) -> list[tuple[NDArray, NDArray]]:
    """Index paths of the peeled boundary rings of an h x w grid.

    Ring k is the boundary of the subgrid left after peeling k outer rings,
    ordered counterclockwise (in raw coordinates) starting from the subgrid's
    top-left corner: top row left-to-right, right column downward, bottom row
    right-to-left, left column upward. Degenerate single-row or single-column
    remainders are listed once in natural order. Returns ceil(min(h, w) / 2)
    rings whose sizes sum to h * w.
    """
    if h < 1 or w < 1:
        raise ValueError("grid dimensions must be positive")
    rings: list[tuple[NDArray, NDArray]] = []
    k = 0
    while h - 2 * k >= 1 and w - 2 * k >= 1:
        r0, r1 = k, h - 1 - k
        c0, c1 = k, w - 1 - k
        if r0 == r1 and c0 == c1:
            rows, cols = np.array([r0]), np.array([c0])
        elif r0 == r1:
            cols = np.arange(c0, c1 + 1)
            rows = np.full_like(cols, r0)
        elif c0 == c1:
            rows = np.arange(r0, r1 + 1)
            cols = np.full_like(rows, c0)
        else:
            rows = np.concatenate(
                [
                    np.full(c1 - c0, r0),
                    np.arange(r0, r1),
                    np.full(c1 - c0, r1),
                    np.arange(r1, r0, -1),
                ]
            )
            cols = np.concatenate(
                [
                    np.arange(c0, c1),
                    np.full(r1 - r0, c1),
                    np.arange(c1, c0, -1),
                    np.full(r1 - r0, c0),
                ]
            )
        rings.append((rows, cols))
        k += 1
    return rings


def grid_rings(grid: MappingGrid) -> list[NDArray]:
    """Closed (x, y) polylines of the peeled grid rings, outermost first."""
    return [grid.xy[rows, cols] for rows, cols in ring_indices(grid.h, grid.w)]


def point_in_polygon(point: NDArray, polygon: NDArray) -> bool:
    """Even-odd crossing test for a simple closed polygon of shape (n, 2)."""
    x, y = float(point[0]), float(point[1])
    px = polygon[:, 0]
    py = polygon[:, 1]
    qx = np.roll(px, -1)
    qy = np.roll(py, -1)
    crosses = (py > y) != (qy > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = px + (y - py) * (qx - px) / (qy - py)
    return bool(np.count_nonzero(crosses & (x < xint)) % 2)


def _ray_segment_hits(origin: NDArray, direction: NDArray, polygon: NDArray) -> NDArray:
    """Distances t >= 0 at which the ray origin + t*direction crosses edges."""
    p0 = polygon
    p1 = np.roll(polygon, -1, axis=0)
    e = p1 - p0
    rel = p0 - origin
    denom = direction[0] * e[:, 1] - direction[1] * e[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[:, 0] * e[:, 1] - rel[:, 1] * e[:, 0]) / denom
        s = (rel[:, 0] * direction[1] - rel[:, 1] * direction[0]) / denom
    eps = 1e-12
    ok = (np.abs(denom) > 1e-15) & (t >= 0.0) & (s >= -eps) & (s <= 1.0 + eps)
    hits = t[ok]
    # collinear edges: project both endpoints onto the ray
    par = np.abs(denom) <= 1e-15
    if np.any(par):
        on_line = par & (np.abs(rel[:, 0] * direction[1] - rel[:, 1] * direction[0]) < 1e-12)
        if np.any(on_line):
            t0 = rel[on_line] @ direction
            t1 = (p1[on_line] - origin) @ direction
            cand = np.concatenate([t0, t1])
            hits = np.concatenate([hits, cand[cand >= 0.0]])
    return hits


def contour_resample(ring: NDArray, origin: NDArray, b: int) -> NDArray:
    """Resample a closed polyline into ``b`` radii at equal polar angles.

    Ray k has angle k * 2*pi / b. Each radius is the distance from the
    origin to the farthest intersection of the ray with the polygon
    boundary, which keeps the outer boundary when the contour is not
    star-shaped about the origin.

    Raises
    ------
    ValueError
        "origin-not-enclosed" if the origin lies outside the polygon, or a
        numerical-miss error if some ray finds no boundary crossing.
    """
    ring = as_finite_array(ring, "ring", dtype=float)
    origin = as_finite_array(origin, "origin", dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2 or ring.shape[0] < 3:
        raise ValueError("ring must be a closed polyline of shape (n >= 3, 2)")
    if b < 1:
        raise ValueError("b must be >= 1")
    if not point_in_polygon(origin, ring):
        raise ValueError("origin-not-enclosed: polar origin lies outside the contour polygon")
    radii = np.empty(b)
    for k in range(b):
        ang = k * TWO_PI / b
        direction = np.array([np.cos(ang), np.sin(ang)])
        hits = _ray_segment_hits(origin, direction, ring)
        if hits.size == 0:
            raise ValueError(f"ray at angle {ang:.6f} rad misses the contour polygon")
        radii[k] = hits.max()
    return radii


def contours_from_grid(grid: MappingGrid, layers: int, points_per_layer: int) -> ContourSet:
    """Build a :class:`ContourSet` by resampling the outermost grid rings.

    Layer k resamples the k-th peeled ring about the grid's polar origin.
    """
    rings = grid_rings(grid)
    usable = [r for r in rings if r.shape[0] >= 3]
    if layers > len(usable):
        raise ValueError(f"requested {layers} layers but only {len(usable)} rings have >= 3 points")
    radii = np.stack(
        [contour_resample(usable[k], grid.origin, points_per_layer) for k in range(layers)]
    )
    return ContourSet(radii=radii, origin=grid.origin)


def polyline_length(points: NDArray) -> float:
    """Total length of an open polyline of shape (n, 2)."""
    seg = np.diff(np.asarray(points, dtype=float), axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def polyline_length_grad(points: NDArray) -> tuple[float, NDArray]:
    """Length of an open polyline and its gradient w.r.t. the points.

    Zero-length segments contribute a zero subgradient.
    """
    points = np.asarray(points, dtype=float)
    seg = np.diff(points, axis=0)
    norms = np.hypot(seg[:, 0], seg[:, 1])
    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where(norms[:, None] > 0, seg / safe[:, None], 0.0)
    grad = np.zeros_like(points)
    grad[1:] += unit
    grad[:-1] -= unit
    return float(norms.sum()), grad


def edge_lengths(grid: MappingGrid) -> EdgeLengths:
    """Polyline lengths of the four bounding rows/columns of the grid."""
    xy = grid.xy
    return EdgeLengths(
        left=polyline_length(xy[:, 0]),
        right=polyline_length(xy[:, -1]),
        top=polyline_length(xy[0, :]),
        bottom=polyline_length(xy[-1, :]),
    )
