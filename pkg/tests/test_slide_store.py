import json
import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tumortriage.errors import DataInvariantError, SlideIOError
from tumortriage.slide_store import (
    AnnotationMask,
    DatasetManifest,
    ManifestEntry,
    Slide,
    SyntheticSlideSpec,
    generate_synthetic_slide,
    read_manifest,
    read_mask,
    read_region,
    read_slide,
    synthesize_corpus,
    synthetic_tissue_footprint,
    write_manifest,
    write_mask,
    write_slide,
)


def _noise_image(h, w, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def test_tile_grid_for_exact_multiple():
    slide = Slide.from_array("s", _noise_image(1024, 1024), 256)
    assert slide.grid_shape == (4, 4)
    assert all(t.shape == (256, 256, 3) for row in slide.tiles for t in row)


def test_edge_tiles_are_smaller_but_not_empty():
    slide = Slide.from_array("s", _noise_image(1000, 1000), 256)
    assert slide.grid_shape == (4, 4)
    assert slide.tiles[3][0].shape[:2] == (232, 256)
    assert slide.tiles[0][3].shape[:2] == (256, 232)
    assert slide.tiles[3][3].shape[:2] == (232, 232)


def test_slide_rejects_wrong_tile_grid():
    tile = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(DataInvariantError):
        Slide("s", 8, 8, 4, ((tile,),))


def test_slide_rejects_non_rgb8_tiles():
    with pytest.raises(DataInvariantError):
        Slide.from_array("s", np.zeros((4, 4, 3), np.float32), 4)


def test_slide_roundtrip_is_pixel_identical(tmp_path):
    slide = Slide.from_array("rt", _noise_image(300, 200, 3), 128, "tumor")
    write_slide(slide, tmp_path / "rt")
    again = read_slide(tmp_path / "rt")
    write_slide(again, tmp_path / "rt2")
    third = read_slide(tmp_path / "rt2")
    for s in (again, third):
        assert (s.id, s.width_px, s.height_px, s.tile_size, s.label) == ("rt", 200, 300, 128,
                                                                         "tumor")
        np.testing.assert_array_equal(s.to_array(), slide.to_array())


def test_slide_meta_layout(tmp_path):
    write_slide(Slide.from_array("m", _noise_image(10, 20), 8), tmp_path / "m")
    meta = json.loads((tmp_path / "m" / "meta.json").read_text())
    assert meta == {"id": "m", "width_px": 20, "height_px": 10, "tile_size": 8, "label": "normal"}
    assert sorted(p.name for p in (tmp_path / "m").glob("tile_*.png")) == [
        "tile_0_0.png", "tile_0_1.png", "tile_0_2.png", "tile_1_0.png", "tile_1_1.png",
        "tile_1_2.png"]


def test_missing_slide_and_tile_errors(tmp_path):
    with pytest.raises(SlideIOError):
        read_slide(tmp_path / "nothing")
    write_slide(Slide.from_array("m", _noise_image(16, 16), 8), tmp_path / "m")
    (tmp_path / "m" / "tile_1_1.png").unlink()
    with pytest.raises(SlideIOError):
        read_slide(tmp_path / "m")


def test_flat_png_reads_as_single_tile(tmp_path):
    from PIL import Image

    img = _noise_image(20, 30)
    Image.fromarray(img).save(tmp_path / "flat.png")
    slide = read_slide(tmp_path / "flat.png")
    assert slide.grid_shape == (1, 1)
    np.testing.assert_array_equal(slide.to_array(), img)


def test_region_aligned_to_tile_is_that_tile():
    slide = Slide.from_array("s", _noise_image(512, 512), 128)
    np.testing.assert_array_equal(read_region(slide, 128, 256, 128, 128), slide.tiles[2][1])


def test_region_straddling_four_tiles():
    image = _noise_image(512, 512, 5)
    slide = Slide.from_array("s", image, 128)
    np.testing.assert_array_equal(read_region(slide, 100, 90, 60, 70), image[90:160, 100:160])


def test_full_slide_region_is_whole_image():
    image = _noise_image(300, 260, 6)
    slide = Slide.from_array("s", image, 128)
    np.testing.assert_array_equal(read_region(slide, 0, 0, 260, 300), image)


@pytest.mark.parametrize("region", [(-1, 0, 4, 4), (0, 0, 0, 4), (60, 0, 5, 4), (0, 0, 64, 65)])
def test_region_out_of_bounds(region):
    slide = Slide.from_array("s", _noise_image(64, 64), 16)
    with pytest.raises(DataInvariantError):
        read_region(slide, *region)


@given(st.data())
def test_read_region_matches_untiled_crop(data):
    h = data.draw(st.integers(1, 90))
    w = data.draw(st.integers(1, 90))
    ts = data.draw(st.integers(1, 40))
    image = _noise_image(h, w, data.draw(st.integers(0, 10)))
    slide = Slide.from_array("p", image, ts)
    x = data.draw(st.integers(0, w - 1))
    y = data.draw(st.integers(0, h - 1))
    rw = data.draw(st.integers(1, w - x))
    rh = data.draw(st.integers(1, h - y))
    np.testing.assert_array_equal(read_region(slide, x, y, rw, rh), image[y:y + rh, x:x + rw])


def test_read_region_is_thread_safe():
    image = _noise_image(256, 256, 9)
    slide = Slide.from_array("s", image, 64)
    regions = np.random.default_rng(0).integers(0, 192, (200, 2))
    failures = []

    def worker(rows):
        for x, y in rows:
            if not np.array_equal(read_region(slide, x, y, 64, 64), image[y:y + 64, x:x + 64]):
                failures.append((x, y))

    threads = [threading.Thread(target=worker, args=(regions[i::4],)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not failures


def test_tiles_are_read_only():
    slide = Slide.from_array("s", _noise_image(32, 32), 16)
    with pytest.raises(ValueError):
        slide.tiles[0][0][0, 0, 0] = 1


def test_no_nodules_gives_normal_slide_and_empty_mask():
    slide, mask = generate_synthetic_slide(SyntheticSlideSpec(256, 256, 128, 0.5, 0, seed=1))
    assert slide.label == "normal"
    assert not mask.pixels.any()


def test_synthetic_generation_is_deterministic():
    spec = SyntheticSlideSpec(384, 320, 128, 0.5, 2, (20, 30), seed=4)
    a, ma = generate_synthetic_slide(spec)
    b, mb = generate_synthetic_slide(spec)
    np.testing.assert_array_equal(a.to_array(), b.to_array())
    np.testing.assert_array_equal(ma.pixels, mb.pixels)


@pytest.mark.parametrize("seed", range(5))
def test_nodule_area_within_disc_bounds(seed):
    slide, mask = generate_synthetic_slide(
        SyntheticSlideSpec(1024, 1024, 256, 0.5, 3, (40, 60), seed=seed))
    n = int(mask.pixels.sum())
    # rasterized discs can carry a few boundary pixels beyond the continuous area
    assert 3 * math.pi * 40 ** 2 * 0.98 <= n <= 3 * math.pi * 60 ** 2 * 1.02
    assert slide.label == "tumor"


@pytest.mark.parametrize("seed", range(3))
def test_nodules_lie_inside_tissue_and_dims_match(seed):
    spec = SyntheticSlideSpec(512, 448, 128, 0.5, 2, (20, 30), seed=seed)
    slide, mask = generate_synthetic_slide(spec)
    footprint = synthetic_tissue_footprint(spec)
    assert mask.pixels.shape == (slide.height_px, slide.width_px) == footprint.shape
    assert not (mask.pixels.astype(bool) & ~footprint).any()
    mask.check_against(slide)


def test_synthetic_colors_follow_regions(tumor_slide):
    slide, mask = tumor_slide
    image = slide.to_array().astype(float)
    tumor = mask.pixels.astype(bool)
    assert np.all(np.abs(image[tumor].mean(axis=0) - (120, 60, 160)) < 15)
    corner = image[:8, :8].reshape(-1, 3)
    assert corner.min() >= 240 - 1


@pytest.mark.parametrize("kwargs", [
    {"tissue_fraction": 0.0}, {"tumor_nodule_count": -1}, {"tumor_nodule_radius_px": (5, 2)},
    {"width_px": 0},
])
def test_spec_validation(kwargs):
    with pytest.raises(DataInvariantError):
        generate_synthetic_slide(SyntheticSlideSpec(**kwargs))


def test_impossible_nodules_raise():
    with pytest.raises(DataInvariantError):
        generate_synthetic_slide(SyntheticSlideSpec(128, 128, 64, 0.1, 5, (60, 60), seed=0))


def test_mask_roundtrip_and_threshold(tmp_path):
    pixels = np.zeros((10, 12), np.uint8)
    pixels[2:5, 3:9] = 1
    write_mask(AnnotationMask("m", pixels), tmp_path / "m.png")
    again = read_mask(tmp_path / "m.png", "m")
    np.testing.assert_array_equal(again.pixels, pixels)

    from PIL import Image

    Image.fromarray(np.array([[0, 127, 128, 255]], np.uint8), mode="L").save(tmp_path / "g.png")
    np.testing.assert_array_equal(read_mask(tmp_path / "g.png").pixels, [[0, 0, 1, 1]])


def test_mask_label_consistency():
    slide = Slide.from_array("s", _noise_image(8, 8), 8, "normal")
    with pytest.raises(DataInvariantError):
        AnnotationMask("s", np.ones((8, 8), np.uint8)).check_against(slide)
    with pytest.raises(DataInvariantError):
        AnnotationMask("s", np.zeros((8, 9), np.uint8)).check_against(slide)
    tumor = Slide.from_array("s", _noise_image(8, 8), 8, "tumor")
    with pytest.raises(DataInvariantError):
        AnnotationMask("s", np.zeros((8, 8), np.uint8)).check_against(tumor)


def test_manifest_roundtrip(tmp_path):
    m = DatasetManifest([ManifestEntry(str(tmp_path / "a"), str(tmp_path / "a.png"), "tumor"),
                         ManifestEntry(str(tmp_path / "b"), None, "normal")], seed=7)
    write_manifest(m, tmp_path / "manifest.json", relative_to=tmp_path)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    assert raw["entries"][0]["slide"] == "a"
    assert read_manifest(tmp_path / "manifest.json") == m


def test_manifest_invariants(tmp_path):
    with pytest.raises(DataInvariantError):
        DatasetManifest([ManifestEntry("x/a", None, "tumor")]).validate()
    with pytest.raises(DataInvariantError):
        DatasetManifest([ManifestEntry("x/a", None, "normal"),
                         ManifestEntry("y/a", None, "normal")]).validate()
    with pytest.raises(SlideIOError):
        read_manifest(tmp_path / "missing.json")


def test_two_hundred_slide_manifest_parses(tmp_path):
    entries = [{"slide": f"slides/s{i:03d}", "mask": f"masks/s{i:03d}.png" if i < 111 else None,
                "label": "tumor" if i < 111 else "normal"} for i in range(222)]
    (tmp_path / "m.json").write_text(json.dumps({"seed": 0, "entries": entries}))
    m = read_manifest(tmp_path / "m.json")
    assert len(m.entries) == 222
    assert sum(e.label == "tumor" for e in m.entries) == 111


def test_synthesize_corpus(tmp_path):
    m = synthesize_corpus(tmp_path, 2, 1, seed=3, size_px=256, tile_size=128,
                          nodule_radius=(20, 25))
    again = read_manifest(tmp_path / "manifest.json")
    assert [e.id for e in again.entries] == [e.id for e in m.entries]
    assert [e.label for e in again.entries] == ["tumor", "tumor", "normal"]
    for e in again.entries:
        slide = read_slide(e.slide)
        assert slide.label == e.label
        if e.mask:
            read_mask(e.mask, slide.id).check_against(slide)
