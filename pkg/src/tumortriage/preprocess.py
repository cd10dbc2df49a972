"""Color standardization, HSV conversion, Otsu thresholding and binary
morphology used to find tissue on a slide.

HSV images are float64 arrays of shape (H, W, 3) holding hue in degrees
[0, 360), saturation and value in [0, 1]. Hue is 0 wherever saturation is 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataInvariantError

STD_FLOOR = 1e-3
V_RANGE = (0.1, 0.98)
DEFAULT_SE_RADIUS = 1


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """Hexcone RGB8 -> HSV conversion, exact per pixel in float64."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    h = np.zeros_like(maxc)
    is_r = (maxc == r) & (delta > 0)
    is_g = (maxc == g) & (delta > 0) & ~is_r
    is_b = (delta > 0) & ~is_r & ~is_g
    h = np.where(is_r, np.mod((g - b) / safe, 6.0), h)
    h = np.where(is_g, (b - r) / safe + 2.0, h)
    h = np.where(is_b, (r - g) / safe + 4.0, h)
    h = np.mod(h * 60.0, 360.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`, rounded to RGB8."""
    h = np.mod(hsv[..., 0], 360.0) / 60.0
    s = np.clip(hsv[..., 1], 0.0, 1.0)
    v = np.clip(hsv[..., 2], 0.0, 1.0)
    sector = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(sector, choices_r)
    g = np.choose(sector, choices_g)
    b = np.choose(sector, choices_b)
    rgb = np.stack([r, g, b], axis=-1) * 255.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def otsu_threshold(histogram) -> int:
    """Threshold t maximizing between-class variance of bins <= t vs bins > t.

    Comparisons are done in exact rational arithmetic so that plateaus of equal
    variance resolve to the smallest t.
    """
    counts = [Fraction(c) for c in np.asarray(histogram).ravel().tolist()]
    if len(counts) != 256:
        raise DataInvariantError("histogram must have 256 bins")
    if any(c < 0 for c in counts):
        raise DataInvariantError("histogram counts must be non-negative")
    total = sum(counts)
    if total <= 0 or sum(1 for c in counts if c > 0) < 2:
        raise DataInvariantError("no threshold exists: histogram mass lies in a single bin")
    weighted_total = sum(i * c for i, c in enumerate(counts))
    # sigma_B^2 is proportional to (s0*N - S*n0)^2 / (n0*n1)
    best_t, best_num, best_den = None, Fraction(-1), Fraction(1)
    n0 = s0 = Fraction(0)
    for t in range(255):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (s0 * total - weighted_total * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def _square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def erode(mask: np.ndarray, se_radius: int = DEFAULT_SE_RADIUS) -> np.ndarray:
    return ndimage.binary_erosion(np.asarray(mask, bool), _square(se_radius),
                                  border_value=0).astype(np.uint8)


def dilate(mask: np.ndarray, se_radius: int = DEFAULT_SE_RADIUS) -> np.ndarray:
    return ndimage.binary_dilation(np.asarray(mask, bool), _square(se_radius),
                                   border_value=0).astype(np.uint8)


def morph_open(mask: np.ndarray, se_radius: int = DEFAULT_SE_RADIUS) -> np.ndarray:
    """Erosion then dilation with a square element; outside the image is background."""
    if se_radius < 1:
        raise DataInvariantError("structuring element radius must be >= 1")
    return dilate(erode(mask, se_radius), se_radius)


def morph_close(mask: np.ndarray, se_radius: int = DEFAULT_SE_RADIUS) -> np.ndarray:
    """Dilation then erosion; erosion still treats the outside as background."""
    if se_radius < 1:
        raise DataInvariantError("structuring element radius must be >= 1")
    return erode(dilate(mask, se_radius), se_radius)


def saturation_u8(hsv: np.ndarray) -> np.ndarray:
    return np.rint(hsv[..., 1] * 255.0).astype(np.uint8)


def tissue_mask_from_image(image: np.ndarray, se_radius: int = DEFAULT_SE_RADIUS,
                           v_range: tuple = V_RANGE) -> np.ndarray:
    hsv = rgb_to_hsv(image)
    sat = saturation_u8(hsv)
    hist = np.bincount(sat.ravel(), minlength=256)
    t = otsu_threshold(hist)
    v = hsv[..., 2]
    raw = (sat > t) & (v >= v_range[0]) & (v <= v_range[1])
    return morph_close(morph_open(raw, se_radius), se_radius)


def tissue_mask(slide, se_radius: int = DEFAULT_SE_RADIUS) -> np.ndarray:
    """Binary (uint8 0/1) tissue mask for a whole slide."""
    return tissue_mask_from_image(slide.to_array(), se_radius)


@dataclass(frozen=True)
class ColorTemplate:
    h_mean: float
    h_std: float
    s_mean: float
    s_std: float
    v_mean: float
    v_std: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ColorTemplate":
        t = cls(**{k: float(d[k]) for k in
                   ("h_mean", "h_std", "s_mean", "s_std", "v_mean", "v_std")})
        if min(t.h_std, t.s_std, t.v_std) <= 0:
            raise DataInvariantError("template standard deviations must be positive")
        return t

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "ColorTemplate":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _hue_floor() -> float:
    # the floor is defined on channels normalized to [0, 1]; hue spans 360 degrees
    return STD_FLOOR * 360.0


def _stats_from_hsv(pixels: np.ndarray) -> ColorTemplate:
    theta = np.deg2rad(pixels[:, 0])
    c, s = np.cos(theta).mean(), np.sin(theta).mean()
    h_mean = math.degrees(math.atan2(s, c)) % 360.0
    resultant = min(1.0, math.hypot(c, s))
    h_std = math.degrees(math.sqrt(-2.0 * math.log(resultant))) if resultant > 0 else 180.0
    return ColorTemplate(
        h_mean=float(h_mean),
        h_std=float(max(h_std, _hue_floor())),
        s_mean=float(pixels[:, 1].mean()),
        s_std=float(max(pixels[:, 1].std(), STD_FLOOR)),
        v_mean=float(pixels[:, 2].mean()),
        v_std=float(max(pixels[:, 2].std(), STD_FLOOR)),
    )


def compute_color_stats(image: np.ndarray, mask: np.ndarray) -> ColorTemplate:
    """Per-HSV-channel mean/std over masked pixels (hue is circular)."""
    sel = np.asarray(mask, bool)
    if sel.shape != image.shape[:2]:
        raise DataInvariantError("mask shape does not match image")
    if sel.sum() < 2:
        raise DataInvariantError("color statistics need at least 2 masked pixels")
    return _stats_from_hsv(rgb_to_hsv(image[sel]))


def pooled_color_stats(pairs) -> ColorTemplate:
    """Template over the union of masked pixels of several (image, mask) pairs."""
    chunks = [rgb_to_hsv(img[np.asarray(m, bool)]) for img, m in pairs]
    pixels = np.concatenate(chunks, axis=0)
    if len(pixels) < 2:
        raise DataInvariantError("color statistics need at least 2 masked pixels")
    return _stats_from_hsv(pixels)


def standardize_color(image: np.ndarray, mask: np.ndarray,
                      template: ColorTemplate) -> np.ndarray:
    """Moment-match the masked pixels' HSV channels onto ``template``.

    Unmasked pixels are returned untouched.
    """
    sel = np.asarray(mask, bool)
    out = np.array(image, dtype=np.uint8, copy=True)
    if not sel.any():
        return out
    hsv = rgb_to_hsv(image[sel])
    src = _stats_from_hsv(hsv) if len(hsv) >= 2 else template
    dh = (hsv[:, 0] - src.h_mean + 180.0) % 360.0 - 180.0
    h = (template.h_mean + dh * (template.h_std / src.h_std)) % 360.0
    s = (hsv[:, 1] - src.s_mean) / src.s_std * template.s_std + template.s_mean
    v = (hsv[:, 2] - src.v_mean) / src.v_std * template.v_std + template.v_mean
    mapped = np.stack([h, np.clip(s, 0.0, 1.0), np.clip(v, 0.0, 1.0)], axis=-1)
    out[sel] = hsv_to_rgb(mapped)
    return out
