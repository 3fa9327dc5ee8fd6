"""Input validation helpers shared by the estimators and functions."""

import numbers

import numpy as np


class FundusQAError(Exception):
    """Base class for data errors raised by this package."""


class ImageDecodeError(FundusQAError, ValueError):
    pass


class EmptyMaskError(FundusQAError, ValueError):
    pass


class ZeroVarianceError(FundusQAError, ValueError):
    pass


class FingerprintMismatchError(FundusQAError, ValueError):
    pass


def check_rgb(img, name="image"):
    """Return ``img`` as a float64 (H, W, 3) array with finite values in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return arr


def check_gray(img, name="image"):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D plane, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_mask(mask, shape, name="mask"):
    arr = np.asarray(mask)
    if arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} does not match image shape {tuple(shape)}")
    return arr.astype(bool, copy=False)


def check_odd_window(window, shape):
    if not isinstance(window, numbers.Integral) or window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window!r}")
    if window > min(shape):
        raise ValueError(f"window {window} exceeds image size {shape}")
    return int(window)


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    return float(value)


def check_seed(seed):
    """Seeds are non-negative integers (u64); a ``Generator`` is returned."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, numbers.Integral) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return np.random.default_rng(int(seed))
