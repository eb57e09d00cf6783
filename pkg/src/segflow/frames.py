"""RGB-D frame container and intensity preprocessing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class RgbdFrame:
    intensity: np.ndarray  # (H, W) luminance in [0, 1], unsmoothed
    smoothed: np.ndarray  # (H, W) Gaussian-smoothed copy used by the data term
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    index: int = 0

    def __post_init__(self):
        if self.intensity.shape != self.depth.shape or self.smoothed.shape != self.depth.shape:
            raise DataError(
                f"frame {self.index}: intensity {self.intensity.shape} and depth {self.depth.shape} differ"
            )

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def to_luminance(color: np.ndarray) -> np.ndarray:
    """Color or gray raster -> float luminance in [0, 1].

    Integer rasters are divided by their dtype maximum; float rasters are
    assumed to be normalized already.
    """
    color = np.asarray(color)
    scale = float(np.iinfo(color.dtype).max) if np.issubdtype(color.dtype, np.integer) else 1.0
    c = color.astype(float) / scale
    if c.ndim == 3:
        c = c[..., :3] @ LUMA
    return c


def gaussian_smooth(img: np.ndarray, sigma: float, valid: np.ndarray | None = None) -> np.ndarray:
    """Normalized Gaussian blur with kernel radius ceil(3 sigma); sigma 0 is the identity.

    With ``valid`` given, only valid pixels contribute (normalized
    convolution) and invalid pixels are set to 0, so intensities of
    depth-less regions do not bleed across silhouettes.
    """
    img = np.asarray(img, dtype=float)
    if sigma <= 0:
        return np.where(valid, img, 0.0) if valid is not None else img.copy()
    radius = math.ceil(3 * sigma)
    if valid is None:
        return ndimage.gaussian_filter(img, sigma, mode="nearest", radius=radius)
    m = np.asarray(valid, dtype=float)
    num = ndimage.gaussian_filter(img * m, sigma, mode="nearest", radius=radius)
    den = ndimage.gaussian_filter(m, sigma, mode="nearest", radius=radius)
    return np.where(valid & (den > 0), num / np.where(den > 0, den, 1.0), 0.0)


def preprocess(raw_frames, sigma: float = 1.0) -> list[RgbdFrame]:
    """Build frames from ``(color, depth_m)`` pairs: luminance, [0, 1], blur; depth untouched.

    The blur is restricted to valid-depth pixels (see ``gaussian_smooth``).
    """
    raw_frames = list(raw_frames)
    if len(raw_frames) < 2:
        raise DataError("at least two frames are required")
    shape = np.asarray(raw_frames[0][1]).shape
    out = []
    for i, (color, depth) in enumerate(raw_frames):
        depth = np.asarray(depth, dtype=float)
        lum = to_luminance(color)
        if depth.shape != shape or lum.shape != shape:
            raise DataError(f"frame {i} has shape {lum.shape}/{depth.shape}, expected {shape}")
        depth = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0)
        out.append(RgbdFrame(lum, gaussian_smooth(lum, sigma, depth > 0), depth, i))
    return out
