"""Densification of sparse control points into a dewarping map.

A thin plate spline fitted from the regular flat lattice to the grid's
(x, y) points is evaluated on a coarse lattice, bilinearly upsampled to the
output resolution, and used to pull pixels from the warped input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import MappingGrid, regular_lattice
from .validation import as_finite_array, check_image


def _tps_kernel(r2: NDArray) -> NDArray:
    """Biharmonic kernel r^2 * log(r), zero at r = 0, from squared distances."""
    out = np.zeros_like(r2)
    np.log(r2, out=out, where=r2 > 0)
    return 0.5 * r2 * out  # r^2 log r = 0.5 * r^2 * log r^2


class ThinPlateSpline(BaseEstimator, TransformerMixin):
    """Minimum-bending-energy interpolant from 2D sites to d-dimensional values.

    Parameters
    ----------
    lam : float, default 1e-6
        Ridge term added to the kernel block for conditioning. At ``lam=0``
        the spline interpolates the training values exactly; for any ``lam``
        it reproduces affine value fields exactly (the affine part lies in
        the null space of the bending energy).
    """

    def __init__(self, lam: float = 1e-6):
        self.lam = lam

    def fit(self, X: NDArray, y: NDArray) -> "ThinPlateSpline":
        """Solve the interpolation system for sites ``X`` (n, 2) and values ``y`` (n, d)."""
        X = as_finite_array(X, "X")
        y = as_finite_array(y, "y")
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("X must have shape (n, 2)")
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y must have the same number of rows")
        n = X.shape[0]
        if n < 4:
            raise ValueError("need at least 4 control sites")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

        d2 = np.square(X[:, None, :] - X[None, :, :]).sum(-1)
        K = _tps_kernel(d2) + self.lam * np.eye(n)
        P = np.column_stack([np.ones(n), X])
        A = np.zeros((n + 3, n + 3))
        A[:n, :n] = K
        A[:n, n:] = P
        A[n:, :n] = P.T
        rhs = np.vstack([y, np.zeros((3, y.shape[1]))])
        try:
            coef = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(A)
            raise ValueError(
                f"TPS system is singular or ill-conditioned (cond ~ {cond:.3e}); "
                "control sites may be collinear"
            ) from exc
        residual = np.max(np.abs(A @ coef - rhs))
        scale = max(1.0, np.max(np.abs(rhs)))
        if not np.all(np.isfinite(coef)) or residual > 1e-6 * scale:
            cond = np.linalg.cond(A)
            raise ValueError(
                f"TPS system is singular or ill-conditioned (cond ~ {cond:.3e}); "
                "control sites may be collinear"
            )
        self.sites_ = X
        self.weights_ = coef[:n]
        self.affine_ = coef[n:]
        return self

    def transform(self, X: NDArray) -> NDArray:
        """Evaluate the fitted spline at query points of shape (m, 2)."""
        check_is_fitted(self, "weights_")
        Q = as_finite_array(X, "X")
        single = Q.ndim == 1
        Q = np.atleast_2d(Q)
        d2 = np.square(Q[:, None, :] - self.sites_[None, :, :]).sum(-1)
        G = _tps_kernel(d2)
        P = np.column_stack([np.ones(Q.shape[0]), Q])
        out = G @ self.weights_ + P @ self.affine_
        return out[0] if single else out


@dataclass(frozen=True)
class BackwardMap:
    """Per-pixel source coordinates (normalized [0,1] units) with validity flags."""

    coords: NDArray  # (H, W, 2) float64, (x, y) source positions
    valid: NDArray  # (H, W) bool

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise ValueError(f"coords must have shape (H, W, 2), got {coords.shape}")
        if valid.shape != coords.shape[:2]:
            raise ValueError("valid mask shape must match coords")
        if np.any(~np.isfinite(coords[valid])):
            raise ValueError("valid map coordinates must be finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]


def pixel_centers(h: int, w: int) -> NDArray:
    """Normalized coordinates of pixel centers, shape (h, w, 2)."""
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def build_backward_map(
    grid: MappingGrid,
    out_height: int,
    out_width: int,
    coarse: tuple[int, int] = (128, 128),
    lam: float = 1e-6,
) -> BackwardMap:
    """Densify a mapping grid into a per-pixel backward map.

    A TPS is fitted from the regular flat lattice to the grid (x, y) and
    evaluated on a coarse corner-inclusive lattice; the coarse field is then
    bilinearly interpolated at the output pixel centers. All pixels are
    marked valid; document-interior semantics are handled by the caller's
    masks.
    """
    ch, cw = coarse
    if ch < 2 or cw < 2:
        raise ValueError("coarse lattice must be at least 2x2")
    lattice = regular_lattice(grid.h, grid.w).reshape(-1, 2)
    targets = grid.xy.reshape(-1, 2)
    tps = ThinPlateSpline(lam=lam).fit(lattice, targets)

    coarse_pts = regular_lattice(ch, cw).reshape(-1, 2)
    coarse_map = tps.transform(coarse_pts).reshape(ch, cw, 2)

    # interpolate the coarse field (nodes span [0,1] inclusive) at pixel centers
    centers = pixel_centers(out_height, out_width)
    u = centers[..., 0] * (cw - 1)
    v = centers[..., 1] * (ch - 1)
    j0 = np.clip(np.floor(u).astype(int), 0, cw - 2)
    i0 = np.clip(np.floor(v).astype(int), 0, ch - 2)
    fu = (u - j0)[..., None]
    fv = (v - i0)[..., None]
    c00 = coarse_map[i0, j0]
    c01 = coarse_map[i0, j0 + 1]
    c10 = coarse_map[i0 + 1, j0]
    c11 = coarse_map[i0 + 1, j0 + 1]
    coords = (
        c00 * (1 - fu) * (1 - fv) + c01 * fu * (1 - fv) + c10 * (1 - fu) * fv + c11 * fu * fv
    )
    return BackwardMap(coords=coords, valid=np.ones((out_height, out_width), dtype=bool))


def sample_bilinear(image: NDArray, coords: NDArray, fill: float = 0.0) -> NDArray:
    """Bilinear lookup of an image at normalized coordinates.

    ``coords[..., 0]`` is x (column direction), ``coords[..., 1]`` is y.
    Pixel (i, j) is centered at ((j + 0.5) / W, (i + 0.5) / H). Coordinates
    outside [0, 1]^2 return ``fill``; the half-pixel rim inside the image
    extent is border-replicated.
    """
    img = np.asarray(image, dtype=float)
    gray = img.ndim == 2
    if gray:
        img = img[..., None]
    h, w = img.shape[:2]
    x = coords[..., 0]
    y = coords[..., 1]
    inside = (x >= 0.0) & (x <= 1.0) & (y >= 0.0) & (y <= 1.0) & np.isfinite(x) & np.isfinite(y)
    u = np.clip(np.where(inside, x, 0.5) * w - 0.5, 0.0, w - 1.0)
    v = np.clip(np.where(inside, y, 0.5) * h - 0.5, 0.0, h - 1.0)
    j0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else np.zeros_like(u, dtype=int)
    i0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else np.zeros_like(v, dtype=int)
    fu = (u - j0)[..., None]
    fv = (v - i0)[..., None]
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    val = (
        img[i0, j0] * (1 - fu) * (1 - fv)
        + img[i0, j1] * fu * (1 - fv)
        + img[i1, j0] * (1 - fu) * fv
        + img[i1, j1] * fu * fv
    )
    val = np.where(inside[..., None], val, fill)
    return val[..., 0] if gray else val


def resample(image: NDArray, bmap: BackwardMap, fill: float = 0.0) -> NDArray:
    """Pull pixels through a backward map; invalid or out-of-bounds pixels get ``fill``.

    Output intensities are clamped to [0, 1].
    """
    img = check_image(image)
    out = sample_bilinear(img, bmap.coords, fill=fill)
    invalid = ~bmap.valid
    if np.any(invalid):
        out[invalid] = fill
    return np.clip(out, 0.0, 1.0)


def invert_deformation(
    forward: Callable[[NDArray], NDArray],
    queries: NDArray,
    tol: float = 1e-6,
    max_iter: int = 50,
) -> tuple[NDArray, NDArray]:
    """Invert a small-displacement deformation by damped fixed-point iteration.

    Iterates ``x <- x - 0.5 * (F(x) - q)`` until ``|F(x) - q| < tol``.
    Returns the solution points and a convergence flag per query; points
    that fail to converge within ``max_iter`` are flagged invalid.
    """
    q = np.asarray(queries, dtype=float)
    single = q.ndim == 1
    pts = np.atleast_2d(q).astype(float).copy()
    flat = pts.reshape(-1, 2)
    target = flat.copy()
    active = np.ones(flat.shape[0], dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        res = forward(flat[idx]) - target[idx]
        done = np.hypot(res[:, 0], res[:, 1]) < tol
        active[idx[done]] = False
        if np.all(done):
            break
        flat[idx[~done]] -= 0.5 * res[~done]
    valid = ~active
    flat[active] = np.nan
    points = flat.reshape(pts.shape)
    if single:
        return points[0], bool(valid[0])
    return points, valid.reshape(q.shape[:-1])
