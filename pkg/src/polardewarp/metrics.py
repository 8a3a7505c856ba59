"""Evaluation metrics: multi-scale SSIM, flow distortion, edit distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import convolve1d

from .validation import check_image, to_gray
from .warp import BackwardMap

_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_C1 = 0.01**2
_C2 = 0.03**2


@dataclass
class MetricReport:
    """Bundle of metric values as emitted by the evaluation command."""

    ms_ssim: float | None = None
    ld: float | None = None
    ad: float | None = None
    ed: int | None = None
    cer: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> NDArray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img: NDArray, kernel: NDArray) -> NDArray:
    """Separable correlation keeping only fully-supported (valid) pixels."""
    pad = len(kernel) // 2
    out = convolve1d(img, kernel, axis=0, mode="constant")
    out = convolve1d(out, kernel, axis=1, mode="constant")
    return out[pad:-pad, pad:-pad]


def _ssim_maps(a: NDArray, b: NDArray, kernel: NDArray) -> tuple[NDArray, NDArray]:
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    var_a = _filter_valid(a * a, kernel) - mu_a**2
    var_b = _filter_valid(b * b, kernel) - mu_b**2
    cov = _filter_valid(a * b, kernel) - mu_a * mu_b
    cs = (2.0 * cov + _C2) / (var_a + var_b + _C2)
    lum = (2.0 * mu_a * mu_b + _C1) / (mu_a**2 + mu_b**2 + _C1)
    return lum * cs, cs


def _downsample2(img: NDArray) -> NDArray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def ms_ssim(a: NDArray, b: NDArray) -> float:
    """Five-scale structural similarity on unit-range intensities.

    Uses an 11-tap Gaussian window (sigma 1.5), the standard five scale
    weights, and 2x2 mean downsampling between scales. Inputs must share
    their shape and have min side >= 176 so the smallest scale still
    supports the window. Negative contrast-structure means are clamped to
    zero before the weighted product.
    """
    ga = to_gray(check_image(a, "a"))
    gb = to_gray(check_image(b, "b"))
    if ga.shape != gb.shape:
        raise ValueError(f"images must have the same shape, got {ga.shape} vs {gb.shape}")
    if min(ga.shape) < 176:
        raise ValueError("min side must be >= 176 for 5 dyadic scales with an 11-tap window")
    kernel = _gaussian_window()
    levels = len(_MSSSIM_WEIGHTS)
    factors = []
    for level in range(levels):
        ssim_map, cs_map = _ssim_maps(ga, gb, kernel)
        mean = ssim_map.mean() if level == levels - 1 else cs_map.mean()
        factors.append(max(float(mean), 0.0))
        if level < levels - 1:
            ga = _downsample2(ga)
            gb = _downsample2(gb)
    return float(np.prod([f**w for f, w in zip(factors, _MSSSIM_WEIGHTS)]))


def _masked_coords(pred_map: BackwardMap, gt_map: BackwardMap, mask: NDArray):
    if pred_map.shape != gt_map.shape:
        raise ValueError("maps must have the same shape")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred_map.shape:
        raise ValueError("mask shape must match the maps")
    mask = mask & pred_map.valid & gt_map.valid
    if not mask.any():
        raise ValueError("mask selects no valid pixels")
    return pred_map.coords[mask], gt_map.coords[mask], mask


def ld_exact(
    pred_map: BackwardMap,
    gt_map: BackwardMap,
    mask: NDArray,
    source_shape: tuple[int, int] | None = None,
) -> float:
    """Mean flow error between two backward maps, in source-image pixels.

    The ground-truth map stands in for an estimated flow, which is exact on
    synthetic data. ``source_shape`` gives the (H, W) of the source image
    the normalized coordinates refer to; it defaults to the map shape.
    """
    p, g, _ = _masked_coords(pred_map, gt_map, mask)
    h, w = source_shape if source_shape is not None else pred_map.shape
    d = p - g
    return float(np.hypot(d[:, 0] * w, d[:, 1] * h).mean())


def ad_simplified(
    pred_map: BackwardMap,
    gt_map: BackwardMap,
    reference: NDArray,
    mask: NDArray,
) -> float:
    """Aligned, gradient-weighted residual between two backward maps.

    The least-squares optimal global translation plus uniform scale mapping
    the prediction onto the ground truth is removed first, so the metric is
    exactly invariant under such perturbations. The remaining per-pixel
    residual norms are averaged with weights proportional to the reference
    image's gradient magnitude and normalized by the unit-square diagonal.
    """
    p, g, combined = _masked_coords(pred_map, gt_map, mask)
    ref = to_gray(check_image(reference, "reference"))
    if ref.shape != pred_map.shape:
        raise ValueError("reference image shape must match the maps")

    p_mean = p.mean(axis=0)
    g_mean = g.mean(axis=0)
    pc = p - p_mean
    gc = g - g_mean
    var = float(np.square(pc).sum())
    if var <= 0.0:
        raise ValueError("degenerate alignment: predicted coordinates have zero variance")
    scale = float((pc * gc).sum()) / var
    resid = scale * pc - gc
    norms = np.hypot(resid[:, 0], resid[:, 1])

    gy, gx = np.gradient(ref)
    wmag = np.hypot(gx, gy)[combined]
    total = wmag.sum()
    if total > 0:
        weights = wmag / total
    else:
        weights = np.full(norms.shape, 1.0 / norms.size)
    return float((weights * norms).sum() / np.sqrt(2.0))


def edit_distance(s1: str, s2: str) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if s1 == s2:
        return 0
    if len(s1) < len(s2):
        s1, s2 = s2, s1
    previous = list(range(len(s2) + 1))
    for i, c1 in enumerate(s1, start=1):
        current = [i]
        for j, c2 in enumerate(s2, start=1):
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (c1 != c2))
            )
        previous = current
    return previous[-1]


def cer(hyp: str, ref: str) -> float:
    """Character error rate: edit distance normalized by reference length."""
    return edit_distance(hyp, ref) / max(1, len(ref))
