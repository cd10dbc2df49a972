"""Whole-slide tumor probability heatmaps, thresholding and ground-truth comparison.

One heatmap cell covers one patch-sized window of the slide; cells are laid out
on a regular grid with the configured stride.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import DataInvariantError
from .patcher import center_window


@dataclass(frozen=True)
class HeatmapConfig:
    patch_size_px: int = 64
    stride_px: Optional[int] = None  # defaults to the patch size
    threshold: float = 0.9
    skip_non_tissue: bool = True
    min_tissue_fraction: float = 0.5
    batch_size: int = 256

    @property
    def stride(self) -> int:
        return self.stride_px or self.patch_size_px

    def __post_init__(self):
        if self.patch_size_px < 1 or not 1 <= self.stride <= 4 * self.patch_size_px:
            raise DataInvariantError("stride must lie in [1, 4 * patch size]")
        _check_threshold(self.threshold)


def _check_threshold(threshold: float):
    if not 0.0 < threshold < 1.0:
        raise DataInvariantError("threshold must lie strictly between 0 and 1")


@dataclass
class Heatmap:
    slide_id: str
    stride_px: int
    patch_size_px: int
    probs: np.ndarray            # (rows, cols) float32 in [0, 1]
    evaluated: np.ndarray        # (rows, cols) bool; False where the cell was skipped

    @property
    def shape(self) -> tuple:
        return self.probs.shape

    def cell_origin(self, row: int, col: int) -> tuple:
        return col * self.stride_px, row * self.stride_px

    @property
    def grid_w(self) -> int:
        return self.probs.shape[1]

    @property
    def grid_h(self) -> int:
        return self.probs.shape[0]

    def to_json(self, threshold: float = 0.9) -> str:
        meta = {"slide_id": self.slide_id, "grid_w": self.grid_w, "grid_h": self.grid_h,
                "stride_px": self.stride_px, "patch_size_px": self.patch_size_px,
                "threshold": threshold, "evaluated_cells": int(self.evaluated.sum())}
        return json.dumps(meta, indent=2, sort_keys=True) + "\n"


def grid_shape(width: int, height: int, size: int, stride: int) -> tuple:
    if size > width or size > height:
        raise DataInvariantError(f"patch size {size} exceeds slide {width}x{height}")
    return (height - size) // stride + 1, (width - size) // stride + 1


def cell_tissue(tissue_mask: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Tissue fraction of every grid cell."""
    h, w = tissue_mask.shape
    rows, cols = grid_shape(w, h, size, stride)
    integral = np.zeros((h + 1, w + 1), np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(tissue_mask != 0, axis=0), axis=1)
    ys = np.arange(rows) * stride
    xs = np.arange(cols) * stride
    y0, x0 = np.meshgrid(ys, xs, indexing="ij")
    total = (integral[y0 + size, x0 + size] - integral[y0, x0 + size]
             - integral[y0 + size, x0] + integral[y0, x0])
    return total / float(size * size)


def predict_heatmap(model, slide, tissue_mask: Optional[np.ndarray],
                    config: HeatmapConfig = HeatmapConfig()) -> Heatmap:
    """Score every grid cell of an already color-standardized slide."""
    from .training import to_input

    size, stride = config.patch_size_px, config.stride
    if tuple(model.input_shape[:2]) != (size, size):
        raise DataInvariantError(
            f"model input {model.input_shape} does not match patch size {size}")
    rows, cols = grid_shape(slide.width_px, slide.height_px, size, stride)
    if config.skip_non_tissue:
        if tissue_mask is None:
            raise DataInvariantError("skipping non-tissue cells needs a tissue mask")
        if tissue_mask.shape != (slide.height_px, slide.width_px):
            raise DataInvariantError("tissue mask does not match slide dimensions")
        evaluated = cell_tissue(tissue_mask, size, stride) >= config.min_tissue_fraction
    else:
        evaluated = np.ones((rows, cols), bool)
    probs = np.zeros((rows, cols), np.float32)
    cells = np.argwhere(evaluated)
    image = slide.to_array()
    for start in range(0, len(cells), config.batch_size):
        chunk = cells[start:start + config.batch_size]
        batch = np.stack([image[r * stride:r * stride + size, c * stride:c * stride + size]
                          for r, c in chunk])
        probs[chunk[:, 0], chunk[:, 1]] = model.predict_proba(to_input(batch))
    return Heatmap(slide.id, stride, size, probs, evaluated)


def score_slide(model, slide, template=None,
                config: HeatmapConfig = HeatmapConfig()) -> tuple:
    """Segment a raw slide, standardize its color onto ``template`` (when given)
    and score it. Returns ``(heatmap, tissue_mask)``."""
    from .preprocess import standardize_color, tissue_mask
    from .slide_store import Slide

    tissue = tissue_mask(slide)
    if template is not None:
        image = standardize_color(slide.to_array(), tissue, template)
        slide = Slide.from_array(slide.id, image, slide.tile_size, slide.label)
    return predict_heatmap(model, slide, tissue, config), tissue


def threshold_heatmap(heatmap: Heatmap, threshold: float = 0.9) -> np.ndarray:
    """Cells with probability >= threshold are flagged as tumor."""
    _check_threshold(threshold)
    return (heatmap.probs >= threshold) & heatmap.evaluated


def ground_truth_grid(tumor_mask: np.ndarray, size: int, stride: int) -> np.ndarray:
    """A cell is tumor when its central half-window holds any tumor pixel,
    the same rule that labels training patches."""
    h, w = tumor_mask.shape
    rows, cols = grid_shape(w, h, size, stride)
    off, half = center_window(size)
    integral = np.zeros((h + 1, w + 1), np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(tumor_mask != 0, axis=0), axis=1)
    y0, x0 = np.meshgrid(np.arange(rows) * stride + off, np.arange(cols) * stride + off,
                         indexing="ij")
    total = (integral[y0 + half, x0 + half] - integral[y0, x0 + half]
             - integral[y0 + half, x0] + integral[y0, x0])
    return total > 0


@dataclass
class GridComparison:
    dice: float
    iou: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        return asdict(self)


def compare_to_ground_truth(heatmap: Heatmap, tumor_mask: np.ndarray,
                            threshold: float = 0.9) -> GridComparison:
    """Grid-level overlap of the thresholded heatmap with the annotated tumor."""
    truth = ground_truth_grid(np.asarray(tumor_mask), heatmap.patch_size_px, heatmap.stride_px)
    return grid_overlap(threshold_heatmap(heatmap, threshold), truth)


def grid_overlap(pred: np.ndarray, truth: np.ndarray) -> GridComparison:
    """Overlap statistics between two boolean grids.

    Empty-versus-empty counts as perfect agreement (Dice and IoU of 1).
    """
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    if pred.shape != truth.shape:
        raise DataInvariantError(f"grid shapes differ: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    denom = 2 * tp + fp + fn
    dice = 1.0 if denom == 0 else 2 * tp / denom
    iou = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    sens = 1.0 if tp + fn == 0 else tp / (tp + fn)
    spec = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return GridComparison(dice, iou, sens, spec, tp, fp, fn, tn)


def render_heatmap(heatmap: Heatmap, path, threshold: float = 0.9) -> Path:
    """Grayscale PNG with one pixel per cell (probability * 255) and a
    ``heatmap.json`` geometry sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gray = np.rint(np.clip(heatmap.probs, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)
    path.with_name("heatmap.json").write_text(heatmap.to_json(threshold))
    return path


def read_heatmap_geometry(path) -> dict:
    return json.loads(Path(path).read_text())


def _grid_to_pixels(grid: np.ndarray, heatmap: Heatmap, shape: tuple) -> np.ndarray:
    out = np.zeros(shape, bool)
    s, size = heatmap.stride_px, heatmap.patch_size_px
    for r, c in np.argwhere(grid):
        out[r * s:r * s + size, c * s:c * s + size] = True
    return out


def render_overlay(slide, heatmap: Heatmap, path, threshold: float = 0.9,
                   truth_mask: Optional[np.ndarray] = None, downsample: int = 1) -> Path:
    """Slide thumbnail with flagged cells tinted red and the ground-truth contour in green."""
    from scipy import ndimage

    image = slide.to_array().astype(np.float32)
    flagged = _grid_to_pixels(threshold_heatmap(heatmap, threshold), heatmap, image.shape[:2])
    red = np.array([255, 0, 0], np.float32)
    image[flagged] = 0.55 * image[flagged] + 0.45 * red
    if truth_mask is not None:
        t = truth_mask != 0
        edge = t & ~ndimage.binary_erosion(t, iterations=2, border_value=0)
        image[edge] = (0, 200, 0)
    out = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    if downsample > 1:
        out = out[::downsample, ::downsample]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="RGB").save(path)
    return path
