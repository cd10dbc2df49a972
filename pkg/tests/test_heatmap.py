import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from tumortriage.errors import DataInvariantError
from tumortriage.heatmap import (
    Heatmap,
    HeatmapConfig,
    cell_tissue,
    compare_to_ground_truth,
    grid_overlap,
    grid_shape,
    ground_truth_grid,
    predict_heatmap,
    read_heatmap_geometry,
    render_heatmap,
    render_overlay,
    score_slide,
    threshold_heatmap,
)
from tumortriage.slide_store import Slide
from tumortriage.training import to_input
from tumortriage.zoo import build


class CountingModel:
    """Stands in for a network: records every batch and scores by mean red."""

    input_shape = (16, 16, 3)

    def __init__(self):
        self.seen = []

    def predict_proba(self, x):
        self.seen.extend(x)
        return ((x[..., 0].mean(axis=(1, 2)) + 1) / 2).astype(np.float32)


def _heatmap(probs, evaluated=None):
    probs = np.asarray(probs, np.float32)
    ev = np.ones(probs.shape, bool) if evaluated is None else evaluated
    return Heatmap("h", 16, 16, probs, ev)


@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 64), st.integers(1, 64))
def test_grid_shape_matches_enumeration(w, h, size, stride):
    if size > w or size > h:
        with pytest.raises(DataInvariantError):
            grid_shape(w, h, size, stride)
        return
    xs = [x for x in range(0, w, stride) if x + size <= w]
    ys = [y for y in range(0, h, stride) if y + size <= h]
    assert grid_shape(w, h, size, stride) == (len(ys), len(xs))


def test_grid_shape_examples():
    assert grid_shape(1024, 1024, 256, 256) == (4, 4)
    assert grid_shape(1024, 512, 64, 32) == (15, 31)


def test_cell_tissue_matches_direct_means():
    mask = np.random.default_rng(0).integers(0, 2, (70, 90)).astype(np.uint8)
    frac = cell_tissue(mask, 16, 12)
    for r, c in np.ndindex(frac.shape):
        y, x = r * 12, c * 12
        assert frac[r, c] == pytest.approx(mask[y:y + 16, x:x + 16].mean(), abs=1e-12)


def test_background_slide_gives_all_zero_heatmap():
    slide = Slide.from_array("bg", np.full((64, 64, 3), 245, np.uint8), 32)
    model = CountingModel()
    hm = predict_heatmap(model, slide, np.zeros((64, 64), np.uint8), HeatmapConfig(16))
    assert hm.shape == (4, 4)
    assert not hm.evaluated.any() and not hm.probs.any()
    assert model.seen == []


def test_single_patch_slide_matches_direct_probability():
    model = build("mobile", 32, seed=3)
    image = np.random.default_rng(1).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    slide = Slide.from_array("one", image, 32)
    hm = predict_heatmap(model, slide, None, HeatmapConfig(32, skip_non_tissue=False))
    assert hm.shape == (1, 1)
    assert hm.probs[0, 0] == model.predict_proba(to_input(image[None]))[0]


def test_stride_equal_to_patch_visits_each_tissue_cell_once():
    image = np.random.default_rng(2).integers(0, 256, (64, 80, 3), dtype=np.uint8)
    tissue = np.zeros((64, 80), np.uint8)
    tissue[:32, :48] = 1
    model = CountingModel()
    hm = predict_heatmap(model, Slide.from_array("s", image, 32), tissue, HeatmapConfig(16))
    assert hm.evaluated.sum() == 6 == len(model.seen)
    visited = {tuple(np.asarray(p).ravel()[:8]) for p in model.seen}
    assert len(visited) == 6


def test_unskipped_cells_follow_patch_content():
    image = np.zeros((32, 32, 3), np.uint8)
    image[:16, :16, 0] = 255
    hm = predict_heatmap(CountingModel(), Slide.from_array("s", image, 32), None,
                         HeatmapConfig(16, skip_non_tissue=False))
    np.testing.assert_allclose(hm.probs, [[1.0, 0.0], [0.0, 0.0]])


def test_skip_needs_matching_mask():
    slide = Slide.from_array("s", np.zeros((32, 32, 3), np.uint8), 32)
    with pytest.raises(DataInvariantError):
        predict_heatmap(CountingModel(), slide, None, HeatmapConfig(16))
    with pytest.raises(DataInvariantError):
        predict_heatmap(CountingModel(), slide, np.ones((8, 8), np.uint8), HeatmapConfig(16))
    with pytest.raises(DataInvariantError):
        predict_heatmap(CountingModel(), slide, None, HeatmapConfig(32, skip_non_tissue=False))


def test_threshold_is_inclusive():
    hm = _heatmap([[0.95, 0.9, 0.899999]])
    assert threshold_heatmap(hm, 0.9).tolist() == [[True, True, False]]


@given(st.lists(st.floats(0, 1, width=32), min_size=1, max_size=30),
       st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_threshold_is_monotone(values, a, b):
    lo, hi = min(a, b), max(a, b)
    hm = _heatmap([values])
    assert not (threshold_heatmap(hm, hi) & ~threshold_heatmap(hm, lo)).any()


def test_skipped_cells_are_never_flagged():
    ev = np.array([[True, False]])
    assert threshold_heatmap(_heatmap([[1.0, 1.0]], ev), 0.5).tolist() == [[True, False]]


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_threshold_range(bad):
    with pytest.raises(DataInvariantError):
        threshold_heatmap(_heatmap([[0.5]]), bad)
    with pytest.raises(DataInvariantError):
        HeatmapConfig(threshold=bad)


def test_config_stride_bounds():
    assert HeatmapConfig(64).stride == 64
    assert HeatmapConfig(64, 256).stride == 256
    with pytest.raises(DataInvariantError):
        HeatmapConfig(64, 257)


def test_dice_edge_cases():
    g = np.array([[1, 0], [1, 1]], bool)
    assert grid_overlap(g, g).dice == 1.0
    assert grid_overlap(g, ~g).dice == 0.0
    empty = np.zeros((2, 2), bool)
    assert grid_overlap(empty, empty).dice == 1.0
    with pytest.raises(DataInvariantError):
        grid_overlap(g, np.zeros((3, 2), bool))


@given(st.integers(0, 2**32 - 1))
def test_dice_iou_identity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 9, 7)) < rng.random(2)[:, None, None]
    c = grid_overlap(a, b)
    assert c.tp + c.fp + c.fn + c.tn == a.size
    assert c.dice == pytest.approx(2 * c.iou / (1 + c.iou), abs=1e-12)
    assert grid_overlap(b, a).dice == c.dice


def test_ground_truth_uses_central_window():
    mask = np.zeros((32, 32), np.uint8)
    mask[0, 0] = 1          # corner of cell (0, 0): outside its centre
    mask[24, 24] = 1        # centre of cell (1, 1)
    assert ground_truth_grid(mask, 16, 16).tolist() == [[False, False], [False, True]]


def test_perfect_heatmap_scores_dice_one():
    mask = np.zeros((64, 64), np.uint8)
    mask[20:44, 20:44] = 1
    truth = ground_truth_grid(mask, 16, 16)
    hm = _heatmap(truth.astype(np.float32))
    c = compare_to_ground_truth(hm, mask, 0.9)
    assert c.dice == 1.0 and c.sensitivity == 1.0 and c.specificity == 1.0


def test_render_and_sidecar(tmp_path):
    hm = _heatmap([[1.0, 0.0, 0.5]])
    path = render_heatmap(hm, tmp_path / "hm" / "heatmap.png", 0.9)
    gray = np.asarray(Image.open(path))
    assert gray.tolist() == [[255, 0, 128]]
    meta = read_heatmap_geometry(tmp_path / "hm" / "heatmap.json")
    assert meta == {"slide_id": "h", "grid_w": 3, "grid_h": 1, "stride_px": 16,
                    "patch_size_px": 16, "threshold": 0.9, "evaluated_cells": 3}
    assert json.loads(hm.to_json(0.9)) == meta


def test_overlay_dimensions(tmp_path):
    image = np.full((48, 64, 3), 200, np.uint8)
    slide = Slide.from_array("s", image, 32)
    hm = Heatmap("s", 16, 16, np.array([[1, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]], np.float32),
                 np.ones((3, 4), bool))
    mask = np.zeros((48, 64), np.uint8)
    mask[10:30, 10:30] = 1
    out = np.asarray(Image.open(render_overlay(slide, hm, tmp_path / "o.png", 0.9, mask)))
    assert out.shape == (48, 64, 3)
    assert out[2, 2, 0] > out[2, 2, 1]          # flagged cell tinted red
    assert tuple(out[40, 60]) == (200, 200, 200)
    half = np.asarray(Image.open(render_overlay(slide, hm, tmp_path / "h.png", downsample=2)))
    assert half.shape == (24, 32, 3)


def test_score_slide_on_synthetic(tumor_slide):
    slide, mask = tumor_slide
    model = build("mobile", 32, seed=0)
    hm, tissue = score_slide(model, slide, None, HeatmapConfig(32, 64))
    assert tissue.shape == (slide.height_px, slide.width_px)
    assert hm.shape == grid_shape(512, 512, 32, 64)
    assert hm.evaluated.any() and not hm.evaluated.all()
    assert ((hm.probs >= 0) & (hm.probs <= 1)).all()
    c = compare_to_ground_truth(hm, mask.pixels)
    assert c.tp + c.fp + c.fn + c.tn == hm.probs.size
