"""Foreground weighting maps for the restoration loss.

All providers return a 2-D float64 array with non-negative weights and a peak
of exactly 1, broadcast over colour channels by the loss.
"""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .degrade import resize_to


class MaskError(ValueError):
    pass


def gaussian_profile(n: int, sigma_frac: float) -> np.ndarray:
    c = (n - 1) / 2
    sigma = sigma_frac * n / 2
    return np.exp(-((np.arange(n) - c) ** 2) / (2 * sigma**2))


def gaussian_mask(height: int, width: int, sigma_frac: float = 0.5) -> np.ndarray:
    """Centre-prior mask; with the default the border sits near exp(-2) of the peak."""
    if height < 1 or width < 1:
        raise MaskError("mask dimensions must be positive")
    if sigma_frac <= 0:
        raise MaskError("sigma_frac must be positive")
    m = np.outer(gaussian_profile(height, sigma_frac), gaussian_profile(width, sigma_frac))
    # even sizes have no sample at the exact centre
    return m / m.max()


@lru_cache(maxsize=32)
def cached_gaussian_mask(height: int, width: int, sigma_frac: float = 0.5) -> np.ndarray:
    m = gaussian_mask(height, width, sigma_frac)
    m.setflags(write=False)
    return m


def ones_mask(height: int, width: int) -> np.ndarray:
    if height < 1 or width < 1:
        raise MaskError("mask dimensions must be positive")
    return np.ones((height, width))


def external_mask(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load a grayscale mask and rescale it to peak 1.

    ``size`` is the (H, W) of the sample it will weight. A mismatched file is an
    error unless it is a whole-number multiple of ``size``, in which case it is
    area-averaged down first (e.g. masks drawn on the high-resolution original).
    """
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"), dtype=np.float64)
    if size is not None and raw.shape != tuple(size):
        fy, fx = raw.shape[0] / size[0], raw.shape[1] / size[1]
        if fy != fx or fy < 1 or fy != int(fy):
            raise MaskError(f"mask {raw.shape} does not match sample size {tuple(size)}")
        raw = resize_to(np.repeat(raw[..., None] / 255.0, 3, axis=2), size)[..., 0] * 255.0
    peak = raw.max()
    if peak <= 0:
        raise MaskError(f"all-zero mask: {path}")
    return raw / peak


def make_mask(kind: str, height: int, width: int, sigma_frac: float = 0.5, path: str | None = None) -> np.ndarray:
    if kind == "gaussian":
        return cached_gaussian_mask(height, width, sigma_frac)
    if kind == "ones":
        return ones_mask(height, width)
    if kind == "external":
        if path is None:
            raise MaskError("external masks need a mask_path manifest column")
        return external_mask(path, (height, width))
    raise MaskError(f"unknown mask kind {kind!r}")
