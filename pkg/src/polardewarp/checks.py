"""Seeded finite-difference verification of every loss gradient."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

from .geometry import ContourSet, augment_grid, regular_lattice
from .losses import (
    LossWeights,
    _focal_grad,
    diff_loss,
    global_iou_loss,
    grid_edge_loss,
    gradient_check,
    local_iou_loss,
    shape3d_loss,
    smooth_l1,
    total_loss,
)


def _random_instance(seed: int):
    rng = np.random.default_rng(seed)
    lattice = regular_lattice(5, 5)
    xy = lattice + rng.normal(0.0, 0.04, size=lattice.shape)
    xy_star = lattice + rng.normal(0.0, 0.04, size=lattice.shape)
    radii = np.abs(0.4 + rng.normal(0.0, 0.05, size=(1, 16))) + 0.05
    radii_star = np.abs(0.4 + rng.normal(0.0, 0.05, size=(1, 16))) + 0.05
    field = rng.normal(size=(4, 4, 3))
    field_star = field + rng.normal(0.0, 0.3, size=field.shape)
    return xy, xy_star, radii, radii_star, field, field_star


def loss_gradient_errors(seed: int, epsilon: float = 1e-6) -> dict[str, float]:
    """Max relative finite-difference error of each loss term for one seed."""
    xy, xy_star, radii, radii_star, field, field_star = _random_instance(seed)
    gt_grid = augment_grid(xy_star)
    gt_contours = ContourSet(radii=radii_star, origin=gt_grid.origin)
    weights = LossWeights()

    def over_xy(term):
        def fn(flat):
            return term(augment_grid(flat.reshape(xy.shape)), gt_grid)

        return fn

    def focal(term_fn, mode):
        def fn(x):
            ell, g = term_fn(x)
            value, deriv = _focal_grad(ell, 2.0, mode)
            return value, deriv * g

        return fn

    def global_term(rho):
        return global_iou_loss(rho, radii_star[0])

    def sl1_points(flat):
        pred = flat.reshape(xy.shape[:2] + (4,))
        return smooth_l1(pred, gt_points, channels=("x", "y", "theta", "rho"))

    rng = np.random.default_rng([seed, 1])
    gt_points = np.concatenate(
        [xy_star, rng.uniform(0, 2 * np.pi, xy.shape[:2] + (1,)), rng.uniform(0.1, 0.8, xy.shape[:2] + (1,))],
        axis=-1,
    )
    pred_points = gt_points + rng.normal(0.0, 0.1, size=gt_points.shape)

    def total_term(flat):
        n_xy = xy.size
        n_rad = radii.size
        pxy = flat[:n_xy].reshape(xy.shape)
        prad = flat[n_xy : n_xy + n_rad].reshape(radii.shape)
        pfield = flat[n_xy + n_rad :].reshape(field.shape)
        grid = augment_grid(pxy)
        contours = ContourSet(radii=prad, origin=grid.origin)
        bd = total_loss(
            grid,
            gt_grid,
            pred_contours=contours,
            gt_contours=gt_contours,
            pred_shape3d=pfield,
            gt_shape3d=field_star,
            weights=weights,
        )
        grad = np.concatenate(
            [bd.grad_grid_xy.reshape(-1), bd.grad_contour.reshape(-1), bd.grad_shape3d.reshape(-1)]
        )
        return bd.total, grad

    errors = {
        "global_iou": gradient_check(lambda r: global_term(r), radii[0], epsilon),
        "local_iou": gradient_check(over_xy(local_iou_loss), xy.reshape(-1), epsilon),
        "edge": gradient_check(over_xy(grid_edge_loss), xy.reshape(-1), epsilon),
        "focal_global": gradient_check(focal(global_term, "iou-focal"), radii[0], epsilon),
        "focal_global_literal": gradient_check(focal(global_term, "literal"), radii[0], epsilon),
        "focal_local": gradient_check(
            focal(lambda f: local_iou_loss(augment_grid(f.reshape(xy.shape)), gt_grid), "iou-focal"),
            xy.reshape(-1),
            epsilon,
        ),
        "smooth_l1": gradient_check(sl1_points, pred_points.reshape(-1), epsilon),
        "diff": gradient_check(over_xy(lambda g, gs: diff_loss(g, gs, k=8)), xy.reshape(-1), epsilon),
        "diff_k4": gradient_check(over_xy(lambda g, gs: diff_loss(g, gs, k=4)), xy.reshape(-1), epsilon),
        "shape3d": gradient_check(
            lambda f: shape3d_loss(f.reshape(field.shape), field_star), field.reshape(-1), epsilon
        ),
        "total": gradient_check(
            total_term,
            np.concatenate([xy.reshape(-1), radii.reshape(-1), field.reshape(-1)]),
            epsilon,
        ),
    }
    return errors


def run_gradient_checks(seeds: int = 100, epsilon: float = 1e-6) -> dict[str, float]:
    """Worst-case relative error per loss term over ``seeds`` random instances."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for name, err in loss_gradient_errors(seed, epsilon).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
