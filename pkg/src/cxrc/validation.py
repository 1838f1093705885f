"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class InputError(ValueError):
    """Raised when user-supplied data fails validation."""


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate a single grayscale image: 2-D, finite, values in [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise InputError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if arr.size == 0:
        raise InputError(f"{name} is empty")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError(
            f"{name} values must lie in [0, 1], got range "
            f"[{arr.min():.4g}, {arr.max():.4g}]"
        )
    return arr


def check_mask(mask, image: np.ndarray | None = None, name: str = "mask") -> np.ndarray:
    """Validate a binary lung mask; optionally check it matches an image's shape."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InputError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise InputError(f"{name} must be binary (0/1), found values {vals[:5]}")
    if image is not None and arr.shape != np.asarray(image).shape:
        raise InputError(
            f"{name} shape {arr.shape} does not match image shape "
            f"{np.asarray(image).shape}"
        )
    return arr


def check_image_batch(X, name: str = "X") -> np.ndarray:
    """Validate a batch of grayscale images shaped (n, H, W) with values in [0, 1]."""
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise InputError(f"{name} must be 3-D (n, H, W), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InputError(f"{name} is empty")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError(f"{name} values must lie in [0, 1]")
    return arr


def check_probability(p: float, name: str) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise InputError(f"{name} must be in [0, 1], got {p}")
    return p


def check_positive(v: float, name: str) -> float:
    v = float(v)
    if not v > 0.0:
        raise InputError(f"{name} must be positive, got {v}")
    return v
