"""Loss family for polar control-point regression, with hand-derived gradients.

Every loss returns ``(value, gradient)`` where the gradient is taken with
respect to the predicted quantities. Gradients are exact (subgradients at
the min/max ties and at kinks) and are verified against central finite
differences by :func:`gradient_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .geometry import (
    ContourSet,
    EdgeLengths,
    MappingGrid,
    edge_lengths,
    polyline_length_grad,
    ring_indices,
    wrap_angle,
)
from .validation import as_finite_array, check_positive, check_same_shape

_CHANNEL_INDEX = {"x": 0, "y": 1, "theta": 2, "rho": 3}
_ALL_CHANNELS = ("x", "y", "theta", "rho")

_OFFSETS4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OFFSETS8 = _OFFSETS4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


@dataclass(frozen=True)
class LossWeights:
    """Coefficients and switches of the combined fitting objective.

    ``alpha1..alpha4`` scale the neighbor-difference, global radial-overlap,
    local patch radial-overlap and 3D-shape terms. ``gamma`` is the focal
    exponent (0 disables focal modulation). The component switches exist so
    each regularizer can be ablated independently.
    """

    alpha1: float = 0.1
    alpha2: float = 1.0
    alpha3: float = 1.0
    alpha4: float = 0.5
    gamma: float = 2.0
    focal_mode: str = "iou-focal"
    diff_neighbors: int = 8
    use_mapping_global: bool = True
    use_contour_global: bool = True
    use_edge: bool = True
    mapping_global_scope: str = "all"

    def __post_init__(self) -> None:
        for name in ("alpha1", "alpha2", "alpha3", "alpha4", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.focal_mode not in ("iou-focal", "literal"):
            raise ValueError("focal_mode must be 'iou-focal' or 'literal'")
        if self.diff_neighbors not in (4, 8):
            raise ValueError("diff_neighbors must be 4 or 8")
        if self.mapping_global_scope not in ("all", "outer"):
            raise ValueError("mapping_global_scope must be 'all' or 'outer'")


@dataclass
class LossBreakdown:
    """Per-term values and per-parameter-block gradients.

    ``total = sl1 + alpha1*diff + alpha2*(global_iou + lrtb)
            + alpha3*local_iou + alpha4*shape3d``.
    """

    sl1: float
    diff: float
    global_iou: float
    lrtb: float
    local_iou: float
    shape3d: float
    total: float
    grad_grid_xy: NDArray
    grad_contour: NDArray | None
    grad_shape3d: NDArray | None


def _check_radii(rho: NDArray, rho_star: NDArray) -> tuple[NDArray, NDArray]:
    rho = as_finite_array(rho, "rho")
    rho_star = as_finite_array(rho_star, "rho_star")
    check_same_shape(rho, rho_star, "radius arrays")
    if rho.size < 1:
        raise ValueError("radius arrays must be non-empty")
    check_positive(rho, "rho")
    check_positive(rho_star, "rho_star")
    return rho, rho_star


def polar_iou_integral(rho: NDArray, rho_star: NDArray) -> float:
    """Sector-area overlap of two radius functions sampled at equal angles.

    Inputs are dense samples at angles 2*pi*k/M. The value is the periodic
    trapezoidal quadrature of the min-area over max-area ratio; the angular
    step and the 1/2 sector factor cancel, leaving a ratio of summed squared
    radii.
    """
    rho, rho_star = _check_radii(rho, rho_star)
    if rho.size < 8:
        raise ValueError("need at least 8 angular samples")
    num = np.square(np.minimum(rho, rho_star)).sum()
    den = np.square(np.maximum(rho, rho_star)).sum()
    return float(num / den)


def doc_iou_discrete(rho: NDArray, rho_star: NDArray) -> float:
    """Discrete radial overlap: sum of index-paired minima over maxima."""
    rho, rho_star = _check_radii(rho, rho_star)
    return float(np.minimum(rho, rho_star).sum() / np.maximum(rho, rho_star).sum())


def global_iou_loss(rho: NDArray, rho_star: NDArray) -> tuple[float, NDArray]:
    """Negative log of the discrete radial overlap, with gradient over ``rho``.

    The subgradient at a tie takes the min branch.
    """
    rho, rho_star = _check_radii(rho, rho_star)
    minsum = np.minimum(rho, rho_star).sum()
    maxsum = np.maximum(rho, rho_star).sum()
    value = float(np.log(maxsum) - np.log(minsum))
    grad = np.where(rho <= rho_star, -1.0 / minsum, 1.0 / maxsum)
    return value, grad


def local_iou_loss(grid: MappingGrid, grid_star: MappingGrid) -> tuple[float, NDArray]:
    """Mean patchwise radial-overlap loss over all interior 3x3 patches.

    Each patch measures its 8 neighbor radii about its own center point
    (predicted patch about the predicted center, ground truth about the
    ground-truth center), which cancels any global translation. Returns the
    mean of the per-patch negative-log overlap and its gradient over the
    predicted grid (x, y).
    """
    if (grid.h, grid.w) != (grid_star.h, grid_star.w):
        raise ValueError("grids must have the same shape")
    p = grid.xy
    q = grid_star.xy
    h, w = grid.h, grid.w
    n_patch = (h - 2) * (w - 2)

    # (8, h-2, w-2, 2) neighbor offsets about each patch's own center
    dp = np.stack([p[1 + di : h - 1 + di, 1 + dj : w - 1 + dj] for di, dj in _OFFSETS8])
    dq = np.stack([q[1 + di : h - 1 + di, 1 + dj : w - 1 + dj] for di, dj in _OFFSETS8])
    dp -= p[1:-1, 1:-1]
    dq -= q[1:-1, 1:-1]
    r = np.hypot(dp[..., 0], dp[..., 1])
    r_star = np.hypot(dq[..., 0], dq[..., 1])
    if np.any(r <= 0) or np.any(r_star <= 0):
        raise ValueError("degenerate patch: neighbor coincides with patch center")
    minsum = np.minimum(r, r_star).sum(axis=0)
    maxsum = np.maximum(r, r_star).sum(axis=0)
    value = float(np.mean(np.log(maxsum) - np.log(minsum)))

    g_r = np.where(r <= r_star, -1.0 / minsum, 1.0 / maxsum) / n_patch
    g_vec = (g_r / r)[..., None] * dp
    grad = np.zeros_like(p)
    for o, (di, dj) in enumerate(_OFFSETS8):
        grad[1 + di : h - 1 + di, 1 + dj : w - 1 + dj] += g_vec[o]
    grad[1:-1, 1:-1] -= g_vec.sum(axis=0)
    return value, grad


# lengths closer than this are treated as tied, taking the zero subgradient;
# without the tolerance the +-1 subgradient chatters at fp-scale equality and
# saturates the optimizer's second moments
_EDGE_TIE_TOL = 1e-6


def edge_loss(e: EdgeLengths, e_star: EdgeLengths) -> tuple[float, NDArray]:
    """Sum of absolute edge-length differences and its per-edge subgradient.

    Gradient order matches ``EdgeLengths.as_array()``: left, right, top,
    bottom. The subgradient is 0 at equality (within fp-tie tolerance).
    """
    d = e.as_array() - e_star.as_array()
    return float(np.abs(d).sum()), np.where(np.abs(d) > _EDGE_TIE_TOL, np.sign(d), 0.0)


def grid_edge_loss(grid: MappingGrid, grid_star: MappingGrid) -> tuple[float, NDArray]:
    """Edge-length regression chained to the predicted grid points."""
    target = edge_lengths(grid_star).as_array()
    xy = grid.xy
    selectors = (
        (slice(None), 0),
        (slice(None), -1),
        (0, slice(None)),
        (-1, slice(None)),
    )
    value = 0.0
    grad = np.zeros_like(xy)
    for sel, tgt in zip(selectors, target):
        length, g = polyline_length_grad(xy[sel])
        value += abs(length - tgt)
        if abs(length - tgt) > _EDGE_TIE_TOL:
            grad[sel] += np.sign(length - tgt) * g
    return value, grad


def focal_wrap(loss_value: float, iou_value: float, gamma: float, mode: str = "iou-focal") -> float:
    """Focal modulation of a negative-log overlap loss.

    ``iou-focal`` (default) weights the loss by ``(1 - iou)**gamma`` so that
    poorly aligned contours dominate. ``literal`` uses the loss value itself
    as the modulating argument, ``(1 - loss)**gamma * loss``; with loss > 1
    that base goes negative, so non-integer gamma produces NaN there.
    """
    if not 0.0 < iou_value <= 1.0:
        raise ValueError("iou_value must lie in (0, 1]")
    if loss_value < 0:
        raise ValueError("loss_value must be >= 0")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if mode == "iou-focal":
        return float((1.0 - iou_value) ** gamma * (-np.log(iou_value)))
    if mode == "literal":
        return float(np.power(1.0 - loss_value, gamma) * loss_value)
    raise ValueError("mode must be 'iou-focal' or 'literal'")


def _focal_grad(loss_value: float, gamma: float, mode: str) -> tuple[float, float]:
    """Focal value and derivative w.r.t. the raw loss, taking iou = exp(-loss)."""
    ell = float(loss_value)
    if gamma == 0.0:
        return ell, 1.0
    if mode == "iou-focal":
        if ell <= 0.0:
            return 0.0, 0.0
        u = np.exp(-ell)
        base = 1.0 - u
        value = base**gamma * ell
        deriv = gamma * base ** (gamma - 1.0) * u * ell + base**gamma
        return float(value), float(deriv)
    value = np.power(1.0 - ell, gamma) * ell
    deriv = -gamma * np.power(1.0 - ell, gamma - 1.0) * ell + np.power(1.0 - ell, gamma)
    return float(value), float(deriv)


def smooth_l1(
    pred: NDArray, gt: NDArray, channels: tuple[str, ...] | None = None
) -> tuple[float, NDArray]:
    """Huber loss averaged over entries, with gradient over ``pred``.

    With ``channels`` given, the inputs are (..., 4) point arrays and only
    the named channels among x, y, theta, rho contribute; theta differences
    are wrapped to (-pi, pi]. Without ``channels`` the arrays are compared
    elementwise.
    """
    pred = as_finite_array(pred, "pred")
    gt = as_finite_array(gt, "gt")
    check_same_shape(pred, gt, "pred/gt")
    grad = np.zeros_like(pred)
    if channels is None:
        d = pred - gt
        sel: tuple = (Ellipsis,)
    else:
        if pred.shape[-1] != 4:
            raise ValueError("channel selection requires (..., 4) point arrays")
        idx = [_CHANNEL_INDEX[c] for c in channels]
        d = pred[..., idx] - gt[..., idx]
        if "theta" in channels:
            t = channels.index("theta")
            d[..., t] = wrap_angle(d[..., t])
        sel = (Ellipsis, idx)
    absd = np.abs(d)
    z = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    value = float(z.mean())
    gz = np.where(absd < 1.0, d, np.sign(d)) / d.size
    grad[sel] = gz
    return value, grad


def _neighbor_offsets(k: int) -> tuple[tuple[int, int], ...]:
    if k == 4:
        return _OFFSETS4
    if k == 8:
        return _OFFSETS8
    raise ValueError("neighbor count must be 4 or 8")


def _neighbor_sum(arr: NDArray, offsets) -> tuple[NDArray, NDArray]:
    """Sum of each point's existing neighbors, plus the neighbor count."""
    h, w = arr.shape[:2]
    total = np.zeros_like(arr)
    count = np.zeros((h, w))
    for di, dj in offsets:
        i0, i1 = max(0, -di), h - max(0, di)
        j0, j1 = max(0, -dj), w - max(0, dj)
        total[i0:i1, j0:j1] += arr[i0 + di : i1 + di, j0 + dj : j1 + dj]
        count[i0:i1, j0:j1] += 1
    return total, count


def diff_loss(pred: MappingGrid, gt: MappingGrid, k: int = 8) -> tuple[float, NDArray]:
    """Neighbor-difference coordinate loss on grid (x, y).

    Each point carries the sum of offsets to its k nearest grid neighbors
    (truncated at the boundary); the loss is the mean Euclidean distance
    between predicted and ground-truth offset sums. Invariant under global
    translation of the prediction.
    """
    if (pred.h, pred.w) != (gt.h, gt.w):
        raise ValueError("grids must have the same shape")
    offsets = _neighbor_offsets(k)
    p = pred.xy
    q = gt.xy
    sp, cnt = _neighbor_sum(p, offsets)
    sq, _ = _neighbor_sum(q, offsets)
    delta_p = sp - cnt[..., None] * p
    delta_q = sq - cnt[..., None] * q
    r = delta_p - delta_q
    norms = np.hypot(r[..., 0], r[..., 1])
    n = norms.size
    value = float(norms.mean())
    safe = np.where(norms > 0, norms, 1.0)
    g_delta = np.where(norms[..., None] > 0, r / safe[..., None], 0.0) / n
    back, _ = _neighbor_sum(g_delta, offsets)
    grad = back - cnt[..., None] * g_delta
    return value, grad


def shape3d_loss(c: NDArray, c_star: NDArray) -> tuple[float, NDArray]:
    """Mean absolute error between 3D coordinate fields."""
    c = as_finite_array(c, "c")
    c_star = as_finite_array(c_star, "c_star")
    check_same_shape(c, c_star, "3D fields")
    d = c - c_star
    return float(np.abs(d).mean()), np.sign(d) / d.size


def _polar_chain(xy: NDArray, origin: NDArray, g_theta: NDArray, g_rho: NDArray) -> NDArray:
    """Chain gradients on the polar channels back to grid (x, y).

    The polar origin is the centroid of the grid, so every point's gradient
    also carries a -mean term from the origin's dependence on all points.
    Points at rho == 0 (angle is a convention there) get a zero subgradient.
    """
    u = xy - origin
    rho2 = u[..., 0] ** 2 + u[..., 1] ** 2
    safe = np.where(rho2 > 0, rho2, 1.0)
    rho = np.sqrt(safe)
    unit = u / rho[..., None]
    rot = np.stack([-u[..., 1], u[..., 0]], axis=-1)
    v = g_rho[..., None] * unit + (g_theta / safe)[..., None] * rot
    v = np.where(rho2[..., None] > 0, v, 0.0)
    return v - v.reshape(-1, 2).mean(axis=0)


def _outer_ring_mask(h: int, w: int) -> tuple[NDArray, NDArray]:
    rows, cols = ring_indices(h, w)[0]
    return rows, cols


def total_loss(
    pred_grid: MappingGrid,
    gt_grid: MappingGrid,
    pred_contours: ContourSet | None = None,
    gt_contours: ContourSet | None = None,
    pred_shape3d: NDArray | None = None,
    gt_shape3d: NDArray | None = None,
    weights: LossWeights | None = None,
) -> LossBreakdown:
    """Combined fitting objective with gradients per parameter block.

    The smooth-L1 term averages jointly over every supervised entry: the four
    grid channels plus the contour radii when contours are supplied. The
    global term averages the focal-wrapped overlap losses of its enabled
    components (grid rho and outermost contour radii) and adds the edge
    regression. Polar-channel gradients are chained back to grid (x, y)
    through the centroid origin.
    """
    w = weights if weights is not None else LossWeights()
    if (pred_contours is None) != (gt_contours is None):
        raise ValueError("contours must be supplied for both prediction and ground truth")
    if (pred_shape3d is None) != (gt_shape3d is None):
        raise ValueError("3D fields must be supplied for both prediction and ground truth")

    # smooth L1, averaged jointly over grid channels and contour radii
    v_grid, g_grid4 = smooth_l1(pred_grid.points, gt_grid.points, channels=_ALL_CHANNELS)
    n_grid = pred_grid.points.size
    grad_contour: NDArray | None = None
    if pred_contours is not None:
        v_rad, g_rad = smooth_l1(pred_contours.radii, gt_contours.radii)
        n_rad = pred_contours.radii.size
        n_all = n_grid + n_rad
        sl1 = (v_grid * n_grid + v_rad * n_rad) / n_all
        g_grid4 = g_grid4 * (n_grid / n_all)
        grad_contour = g_rad * (n_rad / n_all)
    else:
        sl1 = v_grid
    grad_xy = g_grid4[..., :2] + _polar_chain(
        pred_grid.xy, pred_grid.origin, g_grid4[..., 2], g_grid4[..., 3]
    )

    # neighbor-difference regularizer (terms report 0 when their weight disables them)
    v_diff = 0.0
    if w.alpha1 != 0.0:
        v_diff, g_diff = diff_loss(pred_grid, gt_grid, k=w.diff_neighbors)
        grad_xy += w.alpha1 * g_diff

    # global term: focal-wrapped overlap components + edge regression
    global_iou = 0.0
    lrtb = 0.0
    if w.alpha2 != 0.0:
        comps = []
        if w.use_mapping_global:
            if w.mapping_global_scope == "outer":
                rows, cols = _outer_ring_mask(pred_grid.h, pred_grid.w)
                rho_p = pred_grid.rho[rows, cols]
                rho_g = gt_grid.rho[rows, cols]
            else:
                rows = cols = None
                rho_p = pred_grid.rho.reshape(-1)
                rho_g = gt_grid.rho.reshape(-1)
            ell, g_rho = global_iou_loss(rho_p, rho_g)
            comps.append(("mapping", ell, g_rho, rows, cols))
        if w.use_contour_global and pred_contours is not None:
            ell, g_rho = global_iou_loss(pred_contours.radii[0], gt_contours.radii[0])
            comps.append(("contour", ell, g_rho, None, None))
        if comps:
            for name, ell, g_rho, rows, cols in comps:
                f_val, f_der = _focal_grad(ell, w.gamma, w.focal_mode)
                global_iou += f_val / len(comps)
                scale = w.alpha2 * f_der / len(comps)
                if name == "mapping":
                    g_full = np.zeros((pred_grid.h, pred_grid.w))
                    if rows is None:
                        g_full = g_rho.reshape(pred_grid.h, pred_grid.w).copy()
                    else:
                        g_full[rows, cols] = g_rho
                    grad_xy += scale * _polar_chain(
                        pred_grid.xy, pred_grid.origin, np.zeros_like(g_full), g_full
                    )
                else:
                    grad_contour[0] += scale * g_rho
        if w.use_edge:
            lrtb, g_edge = grid_edge_loss(pred_grid, gt_grid)
            grad_xy += w.alpha2 * g_edge

    # local term: focal-wrapped mean patch overlap
    local_iou = 0.0
    if w.alpha3 != 0.0:
        ell_local, g_local = local_iou_loss(pred_grid, gt_grid)
        local_iou, f_der = _focal_grad(ell_local, w.gamma, w.focal_mode)
        grad_xy += w.alpha3 * f_der * g_local

    # 3D shape term
    shape3d = 0.0
    grad_shape3d: NDArray | None = None
    if pred_shape3d is not None:
        shape3d, g3 = shape3d_loss(pred_shape3d, gt_shape3d)
        grad_shape3d = w.alpha4 * g3

    total = (
        sl1
        + w.alpha1 * v_diff
        + w.alpha2 * (global_iou + lrtb)
        + w.alpha3 * local_iou
        + w.alpha4 * shape3d
    )
    return LossBreakdown(
        sl1=sl1,
        diff=v_diff,
        global_iou=global_iou,
        lrtb=lrtb,
        local_iou=local_iou,
        shape3d=shape3d,
        total=total,
        grad_grid_xy=grad_xy,
        grad_contour=grad_contour,
        grad_shape3d=grad_shape3d,
    )


def gradient_check(
    fn: Callable[[NDArray], tuple[float, NDArray]], x0: NDArray, epsilon: float = 1e-6
) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``fn`` maps a parameter array to ``(value, gradient)``; the gradient must
    have the same number of entries as the input. The per-coordinate relative
    error is ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if not 1e-8 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-8, 1e-4]")
    x = np.array(x0, dtype=float)
    analytic = np.asarray(fn(x)[1], dtype=float).reshape(-1)
    if analytic.size != x.size:
        raise ValueError("gradient size does not match parameter size")
    numeric = np.empty_like(analytic)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + epsilon
        f_plus = fn(x)[0]
        flat[i] = old - epsilon
        f_minus = fn(x)[0]
        flat[i] = old
        numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)
    rel = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(rel.max())
