"""Training-time geometric augmentation: flips, rotation and central zoom.

Rotation and zoom resample the inverse mapping bilinearly; samples falling
outside the patch take the nearest edge pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataInvariantError


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 20.0
    max_zoom_fraction: float = 0.20
    horizontal_flip: bool = True
    vertical_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_rotation_deg < 0:
            raise DataInvariantError("max rotation must be non-negative")
        if not 0.0 <= self.max_zoom_fraction < 1.0:
            raise DataInvariantError("zoom fraction must lie in [0, 1)")


@dataclass(frozen=True)
class AugmentDraw:
    """One sampled set of transform parameters."""

    angle_deg: float = 0.0
    zoom: float = 1.0
    flip_h: bool = False
    flip_v: bool = False


def flip_h(pixels: np.ndarray) -> np.ndarray:
    """Mirror left-right."""
    return pixels[:, ::-1].copy()


def flip_v(pixels: np.ndarray) -> np.ndarray:
    """Mirror top-bottom."""
    return pixels[::-1].copy()


def _affine_sample(pixels: np.ndarray, angle_deg: float, zoom: float) -> np.ndarray:
    """Rotate counter-clockwise by ``angle_deg`` then zoom by ``zoom`` about the center."""
    if zoom <= 0:
        raise DataInvariantError("zoom factor must be positive")
    h, w = pixels.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # undo the zoom, then undo the rotation
    y = (yy - cy) / zoom
    x = (xx - cx) / zoom
    src_x = x * cos_t - y * sin_t + cx
    src_y = x * sin_t + y * cos_t + cy
    src_x = np.clip(src_x, 0.0, w - 1.0)
    src_y = np.clip(src_y, 0.0, h - 1.0)
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (src_x - x0)[..., None]
    fy = (src_y - y0)[..., None]
    img = pixels.astype(np.float64)
    if img.ndim == 2:
        img = img[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    out = np.clip(np.rint(out), 0, 255).astype(pixels.dtype)
    return out.reshape(pixels.shape)


def rotate(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Counter-clockwise rotation about the patch center; 90 degrees equals ``np.rot90``."""
    return _affine_sample(pixels, angle_deg, 1.0)


def zoom(pixels: np.ndarray, factor: float) -> np.ndarray:
    """Central zoom; factor > 1 magnifies."""
    return _affine_sample(pixels, 0.0, factor)


def draw_params(config: AugmentConfig, rng: np.random.Generator) -> AugmentDraw:
    angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
    z = rng.uniform(1.0 - config.max_zoom_fraction, 1.0 + config.max_zoom_fraction)
    fh = bool(rng.random() < 0.5)
    fv = bool(rng.random() < 0.5)
    return AugmentDraw(float(angle), float(z),
                       fh and config.horizontal_flip, fv and config.vertical_flip)


def apply_draw(pixels: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Flips, then rotation, then zoom (the last two in one resampling pass)."""
    if pixels.ndim < 2 or pixels.shape[0] != pixels.shape[1]:
        raise DataInvariantError("augmentation expects a square patch")
    out = pixels
    if draw.flip_h:
        out = out[:, ::-1]
    if draw.flip_v:
        out = out[::-1]
    if draw.angle_deg == 0.0 and draw.zoom == 1.0:
        return np.array(out, copy=True)
    return _affine_sample(np.ascontiguousarray(out), draw.angle_deg, draw.zoom)


def augment(pixels: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Sample transform parameters from ``rng`` and apply them to one patch."""
    if pixels.ndim < 2 or pixels.shape[0] != pixels.shape[1]:
        raise DataInvariantError("augmentation expects a square patch")
    return apply_draw(pixels, draw_params(config, rng))


def augment_stream(seed: int, worker: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for one training worker."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(worker,)))
