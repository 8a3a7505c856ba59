"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray


def as_finite_array(a, name: str, dtype=float) -> NDArray:
    """Coerce to an ndarray and reject NaN/inf entries."""
    arr = np.asarray(a, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: NDArray, b: NDArray, names: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{names} must have the same shape, got {a.shape} vs {b.shape}")


def check_positive(a: NDArray, name: str) -> None:
    if np.any(np.asarray(a) <= 0):
        raise ValueError(f"{name} must be strictly positive")


def check_image(img, name: str = "image") -> NDArray:
    """Validate an intensity image: (H, W) or (H, W, C) with C in {1, 3}, values in [0, 1]."""
    arr = as_finite_array(img, name, dtype=float)
    if arr.ndim == 2:
        pass
    elif arr.ndim == 3 and arr.shape[2] in (1, 3):
        pass
    else:
        raise ValueError(f"{name} must have shape (H, W) or (H, W, 1|3), got {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return arr


def to_gray(img: NDArray) -> NDArray:
    """Collapse a validated image to a single luminance channel."""
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
