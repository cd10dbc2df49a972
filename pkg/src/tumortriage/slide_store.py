"""Tiled slide storage, annotation masks, dataset manifests and the synthetic
H&E-like slide generator.

On disk a slide is a directory holding ``meta.json`` plus one PNG per tile
(``tile_R_C.png``, row R, column C). Masks are single grayscale PNGs where any
value >= 128 reads as tumor.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataInvariantError, SlideIOError

SLIDE_LABELS = ("tumor", "normal")

BACKGROUND_RGB = (245, 245, 245)
TISSUE_RGB = (230, 160, 200)
TUMOR_RGB = (120, 60, 160)
BACKGROUND_NOISE = 5
TISSUE_NOISE = 15


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Slide:
    """Immutable tiled RGB8 image. ``tiles[r][c]`` is the tile at row r, column c."""

    id: str
    width_px: int
    height_px: int
    tile_size: int
    tiles: tuple
    label: str = "normal"

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0 or self.tile_size <= 0:
            raise DataInvariantError(f"slide {self.id}: dimensions must be positive")
        if self.label not in SLIDE_LABELS:
            raise DataInvariantError(f"slide {self.id}: unknown label {self.label!r}")
        rows, cols = self.grid_shape
        if len(self.tiles) != rows or any(len(r) != cols for r in self.tiles):
            raise DataInvariantError(
                f"slide {self.id}: expected {rows}x{cols} tile grid")
        for r in range(rows):
            for c in range(cols):
                want = self._tile_dims(r, c)
                t = self.tiles[r][c]
                if t.dtype != np.uint8 or t.ndim != 3 or t.shape[2] != 3:
                    raise DataInvariantError(f"slide {self.id}: tile {r},{c} is not RGB8")
                if t.shape[:2] != want:
                    raise DataInvariantError(
                        f"slide {self.id}: tile {r},{c} has shape {t.shape[:2]}, expected {want}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (math.ceil(self.height_px / self.tile_size),
                math.ceil(self.width_px / self.tile_size))

    def _tile_dims(self, r: int, c: int) -> tuple[int, int]:
        ts = self.tile_size
        return (min(ts, self.height_px - r * ts), min(ts, self.width_px - c * ts))

    @classmethod
    def from_array(cls, slide_id: str, image: np.ndarray, tile_size: int,
                   label: str = "normal") -> "Slide":
        if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
            raise DataInvariantError("slide image must be an HxWx3 uint8 array")
        h, w = image.shape[:2]
        rows, cols = math.ceil(h / tile_size), math.ceil(w / tile_size)
        tiles = tuple(
            tuple(_frozen(image[r * tile_size:(r + 1) * tile_size,
                                c * tile_size:(c + 1) * tile_size].copy())
                  for c in range(cols))
            for r in range(rows))
        return cls(slide_id, w, h, tile_size, tiles, label)

    def to_array(self) -> np.ndarray:
        """The whole slide as one HxWx3 buffer (a fresh copy)."""
        return np.concatenate(
            [np.concatenate(row, axis=1) for row in self.tiles], axis=0)


@dataclass(frozen=True)
class AnnotationMask:
    slide_id: str
    pixels: np.ndarray  # uint8, 0/1, shape (height, width)

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    def check_against(self, slide: Slide) -> None:
        if (self.width_px, self.height_px) != (slide.width_px, slide.height_px):
            raise DataInvariantError(
                f"mask {self.width_px}x{self.height_px} does not match slide "
                f"{slide.width_px}x{slide.height_px}")
        n_tumor = int(self.pixels.sum())
        if slide.label == "normal" and n_tumor:
            raise DataInvariantError(f"normal slide {slide.id} has tumor pixels in its mask")
        if slide.label == "tumor" and not n_tumor:
            raise DataInvariantError(f"tumor slide {slide.id} has an empty mask")


@dataclass
class ManifestEntry:
    slide: str
    mask: Optional[str]
    label: str

    @property
    def id(self) -> str:
        return Path(self.slide).name


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.label not in SLIDE_LABELS:
                raise DataInvariantError(f"manifest entry {e.slide}: bad label {e.label!r}")
            if e.id in seen:
                raise DataInvariantError(f"duplicate slide id {e.id!r} in manifest")
            seen.add(e.id)
            if e.label == "tumor" and not e.mask:
                raise DataInvariantError(f"tumor entry {e.id!r} has no mask")
        if self.seed < 0:
            raise DataInvariantError("manifest seed must be unsigned")

    def by_id(self) -> dict:
        return {e.id: e for e in self.entries}


@dataclass(frozen=True)
class SyntheticSlideSpec:
    width_px: int = 1024
    height_px: int = 1024
    tile_size: int = 256
    tissue_fraction: float = 0.5
    tumor_nodule_count: int = 3
    tumor_nodule_radius_px: tuple = (40, 60)
    seed: int = 0
    slide_id: str = "synthetic"

    def validate(self) -> None:
        if min(self.width_px, self.height_px, self.tile_size) <= 0:
            raise DataInvariantError("slide dimensions must be positive")
        if not 0.0 < self.tissue_fraction <= 1.0:
            raise DataInvariantError("tissue_fraction must lie in (0, 1]")
        if self.tumor_nodule_count < 0:
            raise DataInvariantError("tumor_nodule_count must be non-negative")
        lo, hi = self.tumor_nodule_radius_px
        if not 0 < lo <= hi:
            raise DataInvariantError("nodule radius range must be positive and ordered")


# -- reading and writing ------------------------------------------------------

def _load_png_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise DataInvariantError(f"{path}: expected an RGB image, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except FileNotFoundError as exc:
        raise SlideIOError(f"missing image file {path}") from exc
    except OSError as exc:
        raise SlideIOError(f"cannot read image {path}: {exc}") from exc


def read_slide(path) -> Slide:
    """Load a slide directory, or wrap a flat RGB image file as a one-tile slide."""
    path = Path(path)
    if path.is_file():
        image = _load_png_rgb(path)
        h, w = image.shape[:2]
        return Slide.from_array(path.stem, image, max(h, w))
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise SlideIOError(f"{path}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        slide_id = str(meta["id"])
        width, height = int(meta["width_px"]), int(meta["height_px"])
        tile_size = int(meta["tile_size"])
        label = str(meta.get("label", "normal"))
    except (KeyError, ValueError, TypeError) as exc:
        raise SlideIOError(f"{meta_path}: malformed metadata ({exc})") from exc
    rows, cols = math.ceil(height / tile_size), math.ceil(width / tile_size)
    tiles = tuple(
        tuple(_frozen(_load_png_rgb(path / f"tile_{r}_{c}.png")) for c in range(cols))
        for r in range(rows))
    return Slide(slide_id, width, height, tile_size, tiles, label)


def write_slide(slide: Slide, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"id": slide.id, "width_px": slide.width_px, "height_px": slide.height_px,
            "tile_size": slide.tile_size, "label": slide.label}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for r, row in enumerate(slide.tiles):
        for c, tile in enumerate(row):
            Image.fromarray(tile, mode="RGB").save(path / f"tile_{r}_{c}.png", optimize=False)
    return path


def read_mask(path, slide_id: str = "") -> AnnotationMask:
    path = Path(path)
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError as exc:
        raise SlideIOError(f"missing mask file {path}") from exc
    except OSError as exc:
        raise SlideIOError(f"cannot read mask {path}: {exc}") from exc
    return AnnotationMask(slide_id or path.stem, _frozen((gray >= 128).astype(np.uint8)))


def write_mask(mask: AnnotationMask, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.pixels > 0).astype(np.uint8) * 255, mode="L").save(path)
    return path


def read_region(slide: Slide, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Return the ``h x w`` RGB8 region whose top-left corner is (x, y)."""
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > slide.width_px or y + h > slide.height_px:
        raise DataInvariantError(
            f"region ({x},{y},{w},{h}) outside slide {slide.width_px}x{slide.height_px}")
    ts = slide.tile_size
    out = np.empty((h, w, 3), dtype=np.uint8)
    for r in range(y // ts, (y + h - 1) // ts + 1):
        for c in range(x // ts, (x + w - 1) // ts + 1):
            ty0, tx0 = r * ts, c * ts
            y0, y1 = max(y, ty0), min(y + h, ty0 + ts)
            x0, x1 = max(x, tx0), min(x + w, tx0 + ts)
            out[y0 - y:y1 - y, x0 - x:x1 - x] = slide.tiles[r][c][y0 - ty0:y1 - ty0, x0 - tx0:x1 - tx0]
    return out


def read_manifest(path) -> DatasetManifest:
    """Parse a manifest; relative slide/mask paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise SlideIOError(f"missing manifest {path}") from exc
    except ValueError as exc:
        raise DataInvariantError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent
    entries = []
    for item in raw["entries"]:
        slide = str(base / item["slide"]) if not os.path.isabs(item["slide"]) else item["slide"]
        mask = item.get("mask")
        if mask and not os.path.isabs(mask):
            mask = str(base / mask)
        entries.append(ManifestEntry(slide, mask, item["label"]))
    manifest = DatasetManifest(entries, int(raw.get("seed", 0)))
    manifest.validate()
    return manifest


def write_manifest(manifest: DatasetManifest, path, relative_to=None) -> Path:
    manifest.validate()
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else None

    def rel(p):
        if p is None or base is None:
            return p
        return os.path.relpath(p, base)

    data = {"seed": manifest.seed,
            "entries": [{"slide": rel(e.slide), "mask": rel(e.mask), "label": e.label}
                        for e in manifest.entries]}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")
    return path


# -- synthetic generation -----------------------------------------------------

def _tissue_footprint(spec: SyntheticSlideSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height_px, spec.width_px
    if spec.tissue_fraction >= 1.0:
        return np.ones((h, w), dtype=bool)
    # coarse noise upsampled gives blobs a few hundred pixels across
    gh, gw = max(2, math.ceil(h / 256)) + 2, max(2, math.ceil(w / 256)) + 2
    coarse = rng.standard_normal((gh, gw))
    field_ = ndimage.zoom(coarse, (h / gh, w / gw), order=3, mode="nearest", grid_mode=True)
    field_ = field_[:h, :w]
    cut = np.quantile(field_, 1.0 - spec.tissue_fraction)
    return field_ > cut


def _noisy_fill(rng, shape, rgb, amplitude) -> np.ndarray:
    noise = rng.uniform(-amplitude, amplitude, size=shape + (3,))
    return np.asarray(rgb, dtype=np.float64) + noise


def generate_synthetic_slide(spec: SyntheticSlideSpec) -> tuple:
    """Render an H&E-like slide and its exact tumor mask.

    Background is near-white, tissue blobs are eosin pink and tumor nodules are
    hematoxylin purple with a dotted nuclear texture. Nodules are disjoint discs
    lying wholly inside tissue. Returns ``(slide, mask)``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height_px, spec.width_px
    footprint = _tissue_footprint(spec, rng)

    tumor = np.zeros((h, w), dtype=bool)
    if spec.tumor_nodule_count:
        # distance to nearest non-tissue pixel, with the image border counting as non-tissue
        padded = np.pad(footprint, 1, constant_values=False)
        depth = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
        lo, hi = spec.tumor_nodule_radius_px
        yy, xx = np.ogrid[:h, :w]
        placed: list = []
        for _ in range(spec.tumor_nodule_count):
            for _attempt in range(1000):
                r = int(rng.integers(lo, hi + 1))
                cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
                if depth[cy, cx] <= r + 1:
                    continue
                if any((cy - py) ** 2 + (cx - px) ** 2 <= (r + pr + 2) ** 2 for py, px, pr in placed):
                    continue
                placed.append((cy, cx, r))
                tumor |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                break
            else:
                raise DataInvariantError(
                    f"cannot place tumor nodule {len(placed) + 1} of "
                    f"{spec.tumor_nodule_count} after 1000 attempts (tissue too small)")

    img = _noisy_fill(rng, (h, w), BACKGROUND_RGB, BACKGROUND_NOISE)
    tissue_alpha = ndimage.gaussian_filter(footprint.astype(np.float64), sigma=1.0)[..., None]
    tissue = _noisy_fill(rng, (h, w), TISSUE_RGB, TISSUE_NOISE)
    img = tissue_alpha * tissue + (1.0 - tissue_alpha) * img
    if tumor.any():
        nodule = _noisy_fill(rng, (h, w), TUMOR_RGB, TISSUE_NOISE)
        nuclei = rng.random((h, w)) < 0.15
        nodule[nuclei] -= 35.0
        tumor_alpha = ndimage.gaussian_filter(tumor.astype(np.float64), sigma=0.7)[..., None]
        tumor_alpha = np.where(tumor[..., None], 1.0, tumor_alpha)
        img = tumor_alpha * nodule + (1.0 - tumor_alpha) * img
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    label = "tumor" if spec.tumor_nodule_count else "normal"
    slide = Slide.from_array(spec.slide_id, img, spec.tile_size, label)
    mask = AnnotationMask(spec.slide_id, _frozen(tumor.astype(np.uint8)))
    return slide, mask


def synthetic_tissue_footprint(spec: SyntheticSlideSpec) -> np.ndarray:
    """Boolean tissue region (tumor included) that ``generate_synthetic_slide`` paints."""
    spec.validate()
    return _tissue_footprint(spec, np.random.default_rng(spec.seed))


def synthesize_corpus(out_dir, n_tumor: int, n_normal: int, seed: int,
                      size_px: int = 1024, tile_size: int = 256,
                      tissue_fraction: float = 0.5, nodule_count: Sequence[int] = (2, 4),
                      nodule_radius: tuple = (40, 80), prefix: str = "slide") -> DatasetManifest:
    """Write ``n_tumor + n_normal`` synthetic slides plus a manifest under out_dir."""
    out_dir = Path(out_dir)
    seeds = np.random.SeedSequence(seed).generate_state(n_tumor + n_normal)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_tumor + n_normal):
        is_tumor = i < n_tumor
        count = int(rng.integers(nodule_count[0], nodule_count[1] + 1)) if is_tumor else 0
        sid = f"{prefix}_{i:03d}_{'tumor' if is_tumor else 'normal'}"
        spec = SyntheticSlideSpec(size_px, size_px, tile_size, tissue_fraction, count,
                                  tuple(nodule_radius), int(seeds[i]), sid)
        slide, mask = generate_synthetic_slide(spec)
        slide_dir = write_slide(slide, out_dir / "slides" / sid)
        mask_path = write_mask(mask, out_dir / "masks" / f"{sid}.png") if is_tumor else None
        entries.append(ManifestEntry(str(slide_dir), str(mask_path) if mask_path else None,
                                     slide.label))
    manifest = DatasetManifest(entries, seed)
    write_manifest(manifest, out_dir / "manifest.json", relative_to=out_dir)
    return manifest
