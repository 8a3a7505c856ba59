"""Synthetic warped-document samples with exact ground truth.

Deformations are analytic diffeomorphisms of the unit square with exact
Jacobians, so every sample carries bit-reproducible control points, dense
backward maps and a 3D height surrogate. Families cover the typical capture
conditions: sinusoidal folds, a cylindrical page curl, smooth random bumps
(crumpling) and a perspective tilt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .geometry import ContourSet, MappingGrid, augment_grid, contours_from_grid, regular_lattice
from .validation import as_finite_array
from .warp import BackwardMap, invert_deformation, pixel_centers, sample_bilinear

FAMILIES = ("perspective", "fold-sine", "curl-cylinder", "tps-random", "composite")
_SINE_FAMILIES = ("fold-sine",)


@dataclass(frozen=True)
class DeformationSpec:
    """Seeded description of a synthetic page deformation.

    ``amplitude`` bounds the displacement magnitude in normalized units.
    For sinusoidal families ``amplitude * 2*pi * frequency < 1`` guarantees
    a positive Jacobian and hence invertibility.
    """

    family: str
    amplitude: float
    frequency: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if not 0.0 <= self.amplitude < 1.0:
            raise ValueError("amplitude must lie in [0, 1)")
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")
        amp = self.amplitude / 3.0 if self.family == "composite" else self.amplitude
        if self.family in _SINE_FAMILIES + ("composite",):
            if amp * 2.0 * np.pi * self.frequency >= 1.0:
                raise ValueError("sine deformation not invertible: amplitude * 2*pi*frequency >= 1")


class Deformation:
    """Analytic forward map of the flat page with exact Jacobian.

    ``__call__`` maps flat-page points (..., 2) to their positions in the
    warped image; ``jacobian`` returns the exact (..., 2, 2) derivative and
    ``height`` a per-point out-of-plane surrogate consistent with the family.
    """

    def __call__(self, points: NDArray) -> NDArray:
        raise NotImplementedError

    def jacobian(self, points: NDArray) -> NDArray:
        raise NotImplementedError

    def height(self, points: NDArray) -> NDArray:
        points = np.asarray(points, dtype=float)
        return np.zeros(points.shape[:-1])


class Identity(Deformation):
    def __call__(self, points):
        return np.asarray(points, dtype=float).copy()

    def jacobian(self, points):
        points = np.asarray(points, dtype=float)
        return np.broadcast_to(np.eye(2), points.shape[:-1] + (2, 2)).copy()


class FoldSine(Deformation):
    """Axis-aligned sinusoidal compression waves, one per axis."""

    def __init__(self, ax: float, fx: float, phix: float, ay: float, fy: float, phiy: float):
        for a, f in ((ax, fx), (ay, fy)):
            if a * 2.0 * np.pi * f >= 1.0 and a > 0:
                raise ValueError("fold wave not invertible: a * 2*pi*f >= 1")
        self.ax, self.fx, self.phix = ax, fx, phix
        self.ay, self.fy, self.phiy = ay, fy, phiy

    def __call__(self, points):
        p = np.asarray(points, dtype=float)
        x = p[..., 0] + self.ax * np.sin(2 * np.pi * self.fx * p[..., 0] + self.phix)
        y = p[..., 1] + self.ay * np.sin(2 * np.pi * self.fy * p[..., 1] + self.phiy)
        return np.stack([x, y], axis=-1)

    def jacobian(self, points):
        p = np.asarray(points, dtype=float)
        jxx = 1.0 + self.ax * 2 * np.pi * self.fx * np.cos(2 * np.pi * self.fx * p[..., 0] + self.phix)
        jyy = 1.0 + self.ay * 2 * np.pi * self.fy * np.cos(2 * np.pi * self.fy * p[..., 1] + self.phiy)
        J = np.zeros(p.shape[:-1] + (2, 2))
        J[..., 0, 0] = jxx
        J[..., 1, 1] = jyy
        return J

    def height(self, points):
        p = np.asarray(points, dtype=float)
        return self.ax * np.cos(2 * np.pi * self.fx * p[..., 0] + self.phix) + self.ay * np.cos(
            2 * np.pi * self.fy * p[..., 1] + self.phiy
        )


class CurlCylinder(Deformation):
    """Page wrapped on a cylinder and projected from above.

    Arc length along the curled axis is preserved: a point at arc distance
    ``s`` from the tangent line projects to ``R * sin(s / R)``, with height
    ``R * (1 - cos(s / R))``. The radius is floored so the wrap angle stays
    below one radian, keeping the projection strictly monotone.
    """

    def __init__(self, amplitude: float, center: float = 0.5, axis: int = 0):
        if axis not in (0, 1):
            raise ValueError("axis must be 0 (curl along x) or 1 (curl along y)")
        self.center = center
        self.axis = axis
        d = max(center, 1.0 - center)
        if amplitude <= 0:
            self.radius = np.inf
        else:
            self.radius = max(np.sqrt(d**3 / (6.0 * amplitude)), d)

    def _u(self, coord):
        return (coord - self.center) / self.radius

    def __call__(self, points):
        p = np.asarray(points, dtype=float).copy()
        if np.isinf(self.radius):
            return p
        u = self._u(p[..., self.axis])
        p[..., self.axis] = self.center + self.radius * np.sin(u)
        return p

    def jacobian(self, points):
        p = np.asarray(points, dtype=float)
        J = np.zeros(p.shape[:-1] + (2, 2))
        J[..., 0, 0] = 1.0
        J[..., 1, 1] = 1.0
        if not np.isinf(self.radius):
            J[..., self.axis, self.axis] = np.cos(self._u(p[..., self.axis]))
        return J

    def height(self, points):
        p = np.asarray(points, dtype=float)
        if np.isinf(self.radius):
            return np.zeros(p.shape[:-1])
        return self.radius * (1.0 - np.cos(self._u(p[..., self.axis])))


class TpsBumps(Deformation):
    """Smooth random displacement bumps, a stand-in for crumpled pages.

    Kernel weights are rescaled after sampling so that the displacement
    magnitude stays below the amplitude and the displacement gradient below
    0.45 on a dense probe grid, which keeps the map invertible.
    """

    def __init__(self, amplitude: float, seed: int, sites: int = 9):
        rng = np.random.default_rng(seed)
        self.centers = rng.uniform(0.1, 0.9, size=(sites, 2))
        self.weights = rng.normal(size=(sites, 2))
        self.zweights = rng.normal(size=sites)
        if amplitude <= 0:
            self.weights[:] = 0.0
            self.zweights[:] = 0.0
            self.zscale = 0.0
            return
        probe = regular_lattice(48, 48).reshape(-1, 2) * 1.5 - 0.25
        disp = self._raw(probe)
        grad = self._raw_jac(probe)
        svals = np.linalg.norm(grad, ord=2, axis=(1, 2))
        dmax = np.hypot(disp[:, 0], disp[:, 1]).max()
        gmax = svals.max()
        scale = min(
            amplitude / dmax if dmax > 0 else np.inf,
            0.45 / gmax if gmax > 0 else np.inf,
        )
        self.weights *= scale
        zraw = np.abs(self._raw_height(probe)).max()
        self.zscale = amplitude / zraw if zraw > 0 else 0.0

    def _phi(self, r2):
        out = np.zeros_like(r2)
        np.log(r2, out=out, where=r2 > 0)
        return 0.5 * r2 * out

    def _raw(self, points):
        d = points[..., None, :] - self.centers
        r2 = np.square(d).sum(-1)
        return self._phi(r2) @ self.weights

    def _raw_jac(self, points):
        d = points[..., None, :] - self.centers
        r2 = np.square(d).sum(-1)
        fac = np.zeros_like(r2)
        np.log(r2, out=fac, where=r2 > 0)
        fac = fac + 1.0
        fac[r2 == 0] = 0.0
        # d phi / d p = (2 log r + 1) (p - c); per output dim k: sum_i w_ik fac_i d_i
        return np.einsum("...i,ik,...ij->...kj", fac, self.weights, d)

    def _raw_height(self, points):
        d = points[..., None, :] - self.centers
        r2 = np.square(d).sum(-1)
        return self._phi(r2) @ self.zweights

    def __call__(self, points):
        p = np.asarray(points, dtype=float)
        return p + self._raw(p)

    def jacobian(self, points):
        p = np.asarray(points, dtype=float)
        J = self._raw_jac(p)
        J[..., 0, 0] += 1.0
        J[..., 1, 1] += 1.0
        return J

    def height(self, points):
        p = np.asarray(points, dtype=float)
        return self.zscale * self._raw_height(p)


class Perspective(Deformation):
    """Small projective tilt of a flat page."""

    def __init__(self, amplitude: float, seed: int):
        rng = np.random.default_rng(seed)
        affine = rng.uniform(-1.0, 1.0, size=(2, 2))
        trans = rng.uniform(-0.5, 0.5, size=2)
        proj = rng.uniform(-0.5, 0.5, size=2)
        self.normal = rng.uniform(-1.0, 1.0, size=2)
        n = np.hypot(*self.normal)
        if n > 0:
            self.normal = self.normal / n
        self.amplitude = amplitude
        self.H = np.eye(3)
        if amplitude <= 0:
            return
        # one rescale pass: displacement is ~linear in the perturbation
        scale = amplitude
        for _ in range(2):
            H = np.eye(3)
            H[:2, :2] += scale * affine
            H[:2, 2] += scale * trans
            H[2, :2] += scale * proj
            probe = regular_lattice(17, 17).reshape(-1, 2)
            disp = self._apply(H, probe) - probe
            dmax = np.hypot(disp[:, 0], disp[:, 1]).max()
            if dmax <= amplitude or dmax == 0:
                break
            scale *= amplitude / dmax
        self.H = H

    @staticmethod
    def _apply(H, points):
        p = np.asarray(points, dtype=float)
        den = H[2, 0] * p[..., 0] + H[2, 1] * p[..., 1] + 1.0
        x = (H[0, 0] * p[..., 0] + H[0, 1] * p[..., 1] + H[0, 2]) / den
        y = (H[1, 0] * p[..., 0] + H[1, 1] * p[..., 1] + H[1, 2]) / den
        return np.stack([x, y], axis=-1)

    def __call__(self, points):
        return self._apply(self.H, points)

    def jacobian(self, points):
        p = np.asarray(points, dtype=float)
        H = self.H
        den = H[2, 0] * p[..., 0] + H[2, 1] * p[..., 1] + 1.0
        num_x = H[0, 0] * p[..., 0] + H[0, 1] * p[..., 1] + H[0, 2]
        num_y = H[1, 0] * p[..., 0] + H[1, 1] * p[..., 1] + H[1, 2]
        J = np.empty(p.shape[:-1] + (2, 2))
        J[..., 0, 0] = H[0, 0] / den - num_x * H[2, 0] / den**2
        J[..., 0, 1] = H[0, 1] / den - num_x * H[2, 1] / den**2
        J[..., 1, 0] = H[1, 0] / den - num_y * H[2, 0] / den**2
        J[..., 1, 1] = H[1, 1] / den - num_y * H[2, 1] / den**2
        return J

    def height(self, points):
        p = np.asarray(points, dtype=float)
        return self.amplitude * ((p[..., 0] - 0.5) * self.normal[0] + (p[..., 1] - 0.5) * self.normal[1])


class Composite(Deformation):
    """Perspective after fold after curl, each with a third of the budget."""

    def __init__(self, perspective: Deformation, fold: Deformation, curl: Deformation):
        self.stages = (curl, fold, perspective)

    def __call__(self, points):
        p = np.asarray(points, dtype=float)
        for stage in self.stages:
            p = stage(p)
        return p

    def jacobian(self, points):
        p = np.asarray(points, dtype=float)
        J = np.broadcast_to(np.eye(2), p.shape[:-1] + (2, 2)).copy()
        for stage in self.stages:
            J = stage.jacobian(p) @ J
            p = stage(p)
        return J

    def height(self, points):
        p = np.asarray(points, dtype=float)
        return sum(stage.height(p) for stage in self.stages)


def make_deformation(spec: DeformationSpec) -> Deformation:
    """Instantiate the seeded analytic deformation described by ``spec``."""
    if spec.amplitude == 0.0:
        return Identity()
    rng = np.random.default_rng(spec.seed)
    if spec.family == "fold-sine":
        split = rng.uniform(0.35, 0.65)
        fx, fy = rng.uniform(0.5, 1.0, size=2) * spec.frequency
        phix, phiy = rng.uniform(0.0, 2 * np.pi, size=2)
        return FoldSine(spec.amplitude * split, fx, phix, spec.amplitude * (1 - split), fy, phiy)
    if spec.family == "curl-cylinder":
        center = rng.uniform(0.3, 0.7)
        axis = int(rng.integers(0, 2))
        return CurlCylinder(spec.amplitude, center=center, axis=axis)
    if spec.family == "tps-random":
        return TpsBumps(spec.amplitude, seed=int(rng.integers(0, 2**63)))
    if spec.family == "perspective":
        return Perspective(spec.amplitude, seed=int(rng.integers(0, 2**63)))
    # composite: perspective o fold o curl with a third of the budget each
    a = spec.amplitude / 3.0
    split = rng.uniform(0.35, 0.65)
    fx, fy = rng.uniform(0.5, 1.0, size=2) * spec.frequency
    phix, phiy = rng.uniform(0.0, 2 * np.pi, size=2)
    fold = FoldSine(a * split, fx, phix, a * (1 - split), fy, phiy)
    curl = CurlCylinder(a, center=rng.uniform(0.3, 0.7), axis=int(rng.integers(0, 2)))
    persp = Perspective(a, seed=int(rng.integers(0, 2**63)))
    return Composite(persp, fold, curl)


def make_flat_document(seed: int, height: int, width: int, kind: str = "text") -> NDArray:
    """Deterministic pseudo-document image with values in [0, 1].

    ``text`` renders a white page with dark text-line bands of random length
    and an occasional figure block; ``checkerboard`` renders an exact
    two-intensity tiling for metric calibration.
    """
    if height < 64 or width < 64:
        raise ValueError("document images must be at least 64x64")
    if kind == "checkerboard":
        tile = max(4, min(height, width) // 16)
        ii, jj = np.meshgrid(np.arange(height) // tile, np.arange(width) // tile, indexing="ij")
        return np.where((ii + jj) % 2 == 0, 0.95, 0.15)
    if kind != "text":
        raise ValueError("kind must be 'text' or 'checkerboard'")
    rng = np.random.default_rng(seed)
    img = np.full((height, width), 1.0)
    margin_x = int(0.08 * width)
    margin_y = int(0.08 * height)
    line_h = max(2, int(0.025 * height))
    gap = max(1, int(0.035 * height))
    y = margin_y
    while y + line_h <= height - margin_y:
        if rng.random() < 0.08:  # paragraph break
            y += line_h + gap
            continue
        indent = int(0.06 * width) if rng.random() < 0.2 else 0
        x0 = margin_x + indent
        x1 = width - margin_x - int(rng.integers(0, max(1, int(0.3 * width))))
        if x1 > x0:
            img[y : y + line_h, x0:x1] = 0.1 + 0.15 * rng.random()
        y += line_h + gap
    if rng.random() < 0.5:  # figure block
        bh = int(height * (0.08 + 0.12 * rng.random()))
        bw = int(width * (0.2 + 0.3 * rng.random()))
        by = int(rng.integers(margin_y, max(margin_y + 1, height - margin_y - bh)))
        bx = int(rng.integers(margin_x, max(margin_x + 1, width - margin_x - bw)))
        img[by : by + bh, bx : bx + bw] = 0.35 + 0.3 * rng.random()
    return img


def make_background(seed: int, height: int, width: int) -> NDArray:
    """Seeded procedural backdrop: a soft ramp plus noise, mid-gray range."""
    rng = np.random.default_rng(seed)
    g0 = rng.uniform(0.25, 0.45)
    g1 = rng.uniform(0.45, 0.65)
    cx, cy = rng.uniform(-1.0, 1.0, size=2)
    xs = np.linspace(0.0, 1.0, width)
    ys = np.linspace(0.0, 1.0, height)
    ramp = cx * xs[None, :] + cy * ys[:, None]
    rmin, rmax = ramp.min(), ramp.max()
    if rmax > rmin:
        ramp = (ramp - rmin) / (rmax - rmin)
    base = g0 + (g1 - g0) * ramp
    return np.clip(base + rng.normal(0.0, 0.02, size=(height, width)), 0.0, 1.0)


@dataclass(frozen=True)
class SynthSample:
    """A flat/warped image pair with exact control-point ground truth."""

    flat: NDArray
    warped: NDArray
    mask: NDArray
    gt_grid: MappingGrid
    gt_contours: ContourSet
    gt_shape3d: NDArray
    gt_map: BackwardMap
    spec: DeformationSpec
    doc_seed: int
    background_seed: int


def render_sample(
    spec: DeformationSpec,
    doc_seed: int = 0,
    image_shape: tuple[int, int] = (256, 256),
    grid_shape: tuple[int, int] = (16, 16),
    contour_points: int = 64,
    contour_layers: int = 1,
    background_seed: int = 1,
    doc_kind: str = "text",
    max_invalid_fraction: float = 1e-3,
) -> SynthSample:
    """Render a deterministic warped-document sample with full ground truth.

    The warped image is produced by numerically inverting the forward map at
    every pixel center; the sample is rejected if more than
    ``max_invalid_fraction`` of the inversions fail to converge.
    """
    H, W = image_shape
    gh, gw = grid_shape
    fwd = make_deformation(spec)
    flat = make_flat_document(doc_seed, H, W, kind=doc_kind)

    lattice = regular_lattice(gh, gw)
    gt_xy = fwd(lattice.reshape(-1, 2)).reshape(gh, gw, 2)
    gt_grid = augment_grid(gt_xy)
    gt_contours = contours_from_grid(gt_grid, contour_layers, contour_points)
    z = fwd.height(lattice.reshape(-1, 2)).reshape(gh, gw)
    gt_shape3d = np.concatenate([lattice, z[..., None]], axis=-1)

    centers = pixel_centers(H, W).reshape(-1, 2)
    gt_map = BackwardMap(
        coords=fwd(centers).reshape(H, W, 2), valid=np.ones((H, W), dtype=bool)
    )

    src, converged = invert_deformation(fwd, centers)
    bad = 1.0 - converged.mean()
    if bad > max_invalid_fraction:
        raise ValueError(
            f"sample rejected: {bad:.2%} of pixel inversions failed to converge "
            f"(limit {max_invalid_fraction:.2%})"
        )
    eps = 1e-9
    inside = (
        converged
        & (src[:, 0] >= -eps)
        & (src[:, 0] <= 1 + eps)
        & (src[:, 1] >= -eps)
        & (src[:, 1] <= 1 + eps)
    )
    warped = make_background(background_seed, H, W).reshape(-1)
    warped[inside] = sample_bilinear(flat, src[inside])
    return SynthSample(
        flat=flat,
        warped=np.clip(warped.reshape(H, W), 0.0, 1.0),
        mask=inside.reshape(H, W),
        gt_grid=gt_grid,
        gt_contours=gt_contours,
        gt_shape3d=as_finite_array(gt_shape3d, "gt_shape3d"),
        gt_map=gt_map,
        spec=spec,
        doc_seed=doc_seed,
        background_seed=background_seed,
    )


def make_suite(
    count: int = 20,
    seed: int = 7,
    image_shape: tuple[int, int] = (256, 256),
    grid_shape: tuple[int, int] = (16, 16),
    contour_points: int = 64,
    contour_layers: int = 1,
    max_amplitude: float = 0.05,
    families: tuple[str, ...] = ("fold-sine", "curl-cylinder", "tps-random"),
) -> list[SynthSample]:
    """Deterministic sample suite cycling through the deformation families."""
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        spec = DeformationSpec(
            family=families[i % len(families)],
            amplitude=float(max_amplitude * rng.uniform(0.4, 1.0)),
            frequency=float(rng.uniform(0.6, 1.4)),
            seed=int(rng.integers(0, 2**63)),
        )
        samples.append(
            render_sample(
                spec,
                doc_seed=int(rng.integers(0, 2**63)),
                image_shape=image_shape,
                grid_shape=grid_shape,
                contour_points=contour_points,
                contour_layers=contour_layers,
                background_seed=int(rng.integers(0, 2**63)),
            )
        )
    return samples
