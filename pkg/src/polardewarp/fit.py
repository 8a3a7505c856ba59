"""Fitting harnesses: per-sample control-point optimization and a tiny
two-head predictor trained end-to-end through the analytic loss gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit
from sklearn.base import BaseEstimator

from .geometry import ContourSet, MappingGrid, augment_grid, contours_from_grid, regular_lattice
from .losses import LossBreakdown, LossWeights, total_loss
from .validation import check_image, to_gray
from .warp import build_backward_map, pixel_centers, resample, sample_bilinear
from .synth import SynthSample


class FitDivergenceError(RuntimeError):
    """Raised when the optimization loss exceeds ten times its initial value."""


class _Adam:
    """Bias-corrected first/second-moment gradient descent over named arrays."""

    def __init__(self, params: dict[str, NDArray], step: float, beta1: float, beta2: float,
                 eps: float = 1e-8):
        self.step = step
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: dict[str, NDArray], grads: dict[str, NDArray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.step * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


class ControlPointFitter(BaseEstimator):
    """Fit mapping points and contour radii to one sample by gradient descent.

    Grid (x, y) and contour radii are the free parameters; the polar channels
    are recomputed from (x, y) at every step so the grid invariant holds
    throughout. Fitted state: ``grid_``, ``contours_``, ``loss_trace_`` and,
    with ``fit_shape3d``, ``shape3d_``.

    Parameters
    ----------
    iterations : number of optimization steps.
    step : base step size of the moment-based optimizer.
    init : "lattice", "perturbed-lattice" or "ground-truth" initialization.
    fit_shape3d : also fit a 3D coordinate field (initialized flat at z=0).
    """

    def __init__(
        self,
        iterations: int = 2000,
        step: float = 1e-2,
        beta1: float = 0.9,
        beta2: float = 0.999,
        weights: LossWeights | None = None,
        init: str = "lattice",
        perturbation: float = 0.02,
        seed: int = 0,
        fit_shape3d: bool = False,
    ):
        self.iterations = iterations
        self.step = step
        self.beta1 = beta1
        self.beta2 = beta2
        self.weights = weights
        self.init = init
        self.perturbation = perturbation
        self.seed = seed
        self.fit_shape3d = fit_shape3d

    def fit(self, sample: SynthSample, y=None) -> "ControlPointFitter":
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be positive")
        weights = self.weights if self.weights is not None else LossWeights()
        gt_grid = sample.gt_grid
        gt_contours = sample.gt_contours
        h, w = gt_grid.h, gt_grid.w
        a, b = gt_contours.radii.shape

        rng = np.random.default_rng(self.seed)
        if self.init == "lattice":
            xy = regular_lattice(h, w)
        elif self.init == "perturbed-lattice":
            xy = regular_lattice(h, w) + rng.normal(0.0, self.perturbation, size=(h, w, 2))
        elif self.init == "ground-truth":
            xy = gt_grid.xy.copy()
        else:
            raise ValueError("init must be 'lattice', 'perturbed-lattice' or 'ground-truth'")
        if self.init == "ground-truth":
            radii = gt_contours.radii.copy()
        else:
            radii = contours_from_grid(augment_grid(xy), a, b).radii.copy()

        params = {"xy": xy, "radii": radii}
        shape3d = None
        gt_shape3d = None
        if self.fit_shape3d:
            gt_shape3d = sample.gt_shape3d
            shape3d = np.concatenate(
                [regular_lattice(*gt_shape3d.shape[:2]), np.zeros(gt_shape3d.shape[:2] + (1,))],
                axis=-1,
            )
            params["shape3d"] = shape3d
        opt = _Adam(params, self.step, self.beta1, self.beta2)

        trace = []
        breakdown: LossBreakdown | None = None
        for it in range(self.iterations):
            # cosine decay: the overlap/edge subgradients keep a constant
            # magnitude near the optimum, so a shrinking step is what makes
            # the iterates settle instead of limit-cycling
            opt.step = self.step * 0.5 * (1.0 + np.cos(np.pi * it / self.iterations))
            grid = augment_grid(params["xy"])
            contours = ContourSet(radii=params["radii"], origin=grid.origin)
            breakdown = total_loss(
                grid,
                gt_grid,
                pred_contours=contours,
                gt_contours=gt_contours,
                pred_shape3d=params.get("shape3d"),
                gt_shape3d=gt_shape3d,
                weights=weights,
            )
            trace.append(breakdown.total)
            if trace[0] > 0 and breakdown.total > 10.0 * trace[0]:
                raise FitDivergenceError(
                    f"diverged: loss {breakdown.total:.3e} exceeds 10x initial {trace[0]:.3e}"
                )
            grads = {"xy": breakdown.grad_grid_xy, "radii": breakdown.grad_contour}
            if "shape3d" in params:
                grads["shape3d"] = breakdown.grad_shape3d
            opt.update(params, grads)
            np.maximum(params["radii"], 1e-6, out=params["radii"])

        grid = augment_grid(params["xy"])
        self.grid_ = grid
        self.contours_ = ContourSet(radii=params["radii"], origin=grid.origin)
        self.loss_trace_ = np.asarray(trace)
        if "shape3d" in params:
            self.shape3d_ = params["shape3d"]
        return self


def _layer_init(rng: np.random.Generator, out_dim: int, in_dim: int) -> tuple[NDArray, NDArray]:
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = rng.uniform(-bound, bound, size=out_dim)
    return w, b


def _softplus(x: NDArray) -> NDArray:
    return np.logaddexp(0.0, x)


class DewarpPredictor(BaseEstimator):
    """Tiny trunk with parallel mapping and contour heads, trained end to end.

    The input image is downsampled to a grayscale square, passed through one
    affine + tanh layer, and read out by two affine heads: one with
    ``4 * h * w`` outputs for the mapping points and one with ``a * b``
    outputs for the contour radii. Predicted (x, y) are squashed into [0, 1]
    by a logistic map and the polar channels recomputed from them (so the
    raw polar head outputs carry no gradient); radii go through softplus.

    Training runs full-batch moment-based gradient descent on the combined
    loss against each sample's ground truth, backpropagated through the
    heads and trunk with hand-chained Jacobians; it is deterministic given
    the seed, the dataset order and the configuration.
    """

    def __init__(
        self,
        grid_shape: tuple[int, int] = (16, 16),
        contour_shape: tuple[int, int] = (1, 64),
        input_side: int = 32,
        hidden: int = 256,
        epochs: int = 30,
        step: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        weights: LossWeights | None = None,
        seed: int = 0,
    ):
        self.grid_shape = grid_shape
        self.contour_shape = contour_shape
        self.input_side = input_side
        self.hidden = hidden
        self.epochs = epochs
        self.step = step
        self.beta1 = beta1
        self.beta2 = beta2
        self.weights = weights
        self.seed = seed

    # -- parameters ----------------------------------------------------
    def _ensure_params(self) -> dict[str, NDArray]:
        if not hasattr(self, "params_"):
            h, w = self.grid_shape
            a, b = self.contour_shape
            n_in = self.input_side**2
            rng = np.random.default_rng(self.seed)
            w1, b1 = _layer_init(rng, self.hidden, n_in)
            wm, bm = _layer_init(rng, 4 * h * w, self.hidden)
            wc, bc = _layer_init(rng, a * b, self.hidden)
            self.params_ = {"w1": w1, "b1": b1, "wm": wm, "bm": bm, "wc": wc, "bc": bc}
        return self.params_

    # -- forward -------------------------------------------------------
    def _input_vector(self, image: NDArray) -> NDArray:
        img = to_gray(check_image(image))
        s = self.input_side
        if img.shape == (s, s):
            return img.reshape(-1)
        return sample_bilinear(img, pixel_centers(s, s)).reshape(-1)

    def _forward(self, x: NDArray) -> dict[str, NDArray]:
        p = self._ensure_params()
        z1 = p["w1"] @ x + p["b1"]
        t = np.tanh(z1)
        m = p["wm"] @ t + p["bm"]
        c = p["wc"] @ t + p["bc"]
        h, w = self.grid_shape
        xy_raw = m[: 2 * h * w].reshape(h, w, 2)
        xy = expit(xy_raw)
        radii = _softplus(c).reshape(self.contour_shape)
        return {"x": x, "t": t, "c": c, "xy_raw": xy_raw, "xy": xy, "radii": radii}

    def predict(self, image: NDArray) -> tuple[MappingGrid, ContourSet]:
        """Predict control points for one image: a mapping grid and contours."""
        cache = self._forward(self._input_vector(image))
        grid = augment_grid(cache["xy"])
        contours = ContourSet(radii=cache["radii"], origin=grid.origin)
        return grid, contours

    # -- backward ------------------------------------------------------
    def _sample_loss_and_grads(
        self, sample: SynthSample, weights: LossWeights
    ) -> tuple[float, dict[str, NDArray]]:
        p = self._ensure_params()
        x = self._input_vector(sample.warped)
        cache = self._forward(x)
        grid = augment_grid(cache["xy"])
        contours = ContourSet(radii=cache["radii"], origin=grid.origin)
        bd = total_loss(
            grid,
            sample.gt_grid,
            pred_contours=contours,
            gt_contours=sample.gt_contours,
            weights=weights,
        )
        h, w = self.grid_shape
        xy = cache["xy"]
        g_m = np.zeros(4 * h * w)
        g_m[: 2 * h * w] = (bd.grad_grid_xy * xy * (1.0 - xy)).reshape(-1)
        g_c = (bd.grad_contour * expit(cache["c"].reshape(self.contour_shape))).reshape(-1)
        t = cache["t"]
        g_t = p["wm"].T @ g_m + p["wc"].T @ g_c
        g_z1 = g_t * (1.0 - t * t)
        grads = {
            "w1": np.outer(g_z1, x),
            "b1": g_z1,
            "wm": np.outer(g_m, t),
            "bm": g_m,
            "wc": np.outer(g_c, t),
            "bc": g_c,
        }
        return bd.total, grads

    def fit(self, samples: list[SynthSample], y=None) -> "DewarpPredictor":
        """Train on a list of samples; records per-epoch mean loss in ``loss_history_``."""
        if len(samples) < 1:
            raise ValueError("need at least one training sample")
        weights = self.weights if self.weights is not None else LossWeights()
        params = self._ensure_params()
        opt = _Adam(params, self.step, self.beta1, self.beta2)
        history = []
        for _ in range(self.epochs):
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            mean_loss = 0.0
            for sample in samples:
                loss, grads = self._sample_loss_and_grads(sample, weights)
                mean_loss += loss
                for k in acc:
                    acc[k] += grads[k]
            n = len(samples)
            mean_loss /= n
            history.append(mean_loss)
            if history[0] > 0 and mean_loss > 10.0 * history[0]:
                raise FitDivergenceError(
                    f"diverged: epoch loss {mean_loss:.3e} exceeds 10x initial {history[0]:.3e}"
                )
            opt.update(params, {k: v / n for k, v in acc.items()})
        self.loss_history_ = np.asarray(history)
        self.n_samples_ = len(samples)
        return self


def dewarp_image(
    image: NDArray,
    predictor: DewarpPredictor | None = None,
    grid: MappingGrid | None = None,
    out_shape: tuple[int, int] | None = None,
    coarse: tuple[int, int] = (128, 128),
    fill: float = 0.0,
) -> NDArray:
    """Full inference path: control points, dense backward map, resampling.

    An explicit ``grid`` overrides the predictor's estimate, which gives an
    oracle upper bound when the ground-truth grid is injected.
    """
    img = check_image(image)
    if grid is None:
        if predictor is None:
            raise ValueError("either a predictor or an explicit grid is required")
        grid, _ = predictor.predict(img)
    h, w = out_shape if out_shape is not None else img.shape[:2]
    bmap = build_backward_map(grid, h, w, coarse=coarse)
    return resample(img, bmap, fill=fill)
