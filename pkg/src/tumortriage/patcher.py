"""Random patch extraction, three-way patch labeling and slide-level folds."""

from __future__ import annotations

import enum
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import DataInvariantError, SlideIOError
from .slide_store import read_region


class PatchLabel(str, enum.Enum):
    POSITIVE_TUMOR = "positive_tumor"
    NEGATIVE_TUMOR = "negative_tumor"
    NEGATIVE_NORMAL = "negative_normal"

    @property
    def binary(self) -> int:
        """Training target: only positive-tumor patches are class 1."""
        return int(self is PatchLabel.POSITIVE_TUMOR)


@dataclass(frozen=True)
class Patch:
    slide_id: str
    x: int
    y: int
    size_px: int
    pixels: np.ndarray
    label: PatchLabel


@dataclass
class ExtractionConfig:
    patch_size_px: int = 64
    targets: dict = field(default_factory=lambda: {
        PatchLabel.POSITIVE_TUMOR: 50,
        PatchLabel.NEGATIVE_TUMOR: 50,
        PatchLabel.NEGATIVE_NORMAL: 100,
    })
    min_tissue_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.targets = {PatchLabel(k): int(v) for k, v in self.targets.items()}
        if self.patch_size_px < 2:
            raise DataInvariantError("patch size must be at least 2 px")
        if any(v < 0 for v in self.targets.values()):
            raise DataInvariantError("per-class targets must be non-negative")
        if not 0.0 <= self.min_tissue_fraction <= 1.0:
            raise DataInvariantError("min_tissue_fraction must lie in [0, 1]")


def center_window(size: int) -> tuple[int, int]:
    """Start offset and side length of the central half-window of a patch."""
    half = max(1, size // 2)
    return (size - half) // 2, half


def label_patch(x: int, y: int, size: int, slide_label: str,
                tumor_mask: Optional[np.ndarray], tissue_mask: np.ndarray,
                min_tissue_fraction: float = 0.8) -> Optional[PatchLabel]:
    """Label the patch at origin (x, y); ``None`` means reject.

    Tumor-slide patches are positive when the central half-window holds any
    tumor pixel and negative only when the whole patch is tumor free; anything
    in between is boundary-ambiguous and rejected.
    """
    h, w = tissue_mask.shape
    if tumor_mask is not None and tumor_mask.shape != tissue_mask.shape:
        raise DataInvariantError("tumor and tissue masks differ in shape")
    if x < 0 or y < 0 or x + size > w or y + size > h:
        raise DataInvariantError(f"patch ({x},{y},{size}) outside {w}x{h} slide")
    tissue = int(np.count_nonzero(tissue_mask[y:y + size, x:x + size]))
    if tissue < min_tissue_fraction * size * size:
        return None
    if slide_label == "normal":
        return PatchLabel.NEGATIVE_NORMAL
    if tumor_mask is None:
        raise DataInvariantError("tumor slide requires a tumor mask")
    off, half = center_window(size)
    if np.any(tumor_mask[y + off:y + off + half, x + off:x + off + half]):
        return PatchLabel.POSITIVE_TUMOR
    if not np.any(tumor_mask[y:y + size, x:x + size]):
        return PatchLabel.NEGATIVE_TUMOR
    return None


def origin_range(tissue_mask: np.ndarray, size: int) -> tuple:
    """Inclusive (x0, x1, y0, y1) bounds of origins whose patch can touch tissue."""
    h, w = tissue_mask.shape
    ys, xs = np.nonzero(tissue_mask)
    if len(xs) == 0 or size > min(h, w):
        return None
    x0, x1 = max(0, int(xs.min()) - size + 1), min(w - size, int(xs.max()))
    y0, y1 = max(0, int(ys.min()) - size + 1), min(h - size, int(ys.max()))
    return x0, x1, y0, y1


def slide_rng(seed: int, slide_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(slide_id.encode())])


def extract_patches(slide, tumor_mask: Optional[np.ndarray], tissue_mask: np.ndarray,
                    config: ExtractionConfig, rng: Optional[np.random.Generator] = None) -> list:
    """Rejection-sample patch origins uniformly until the per-class targets are met."""
    if tissue_mask.shape != (slide.height_px, slide.width_px):
        raise DataInvariantError("tissue mask does not match slide dimensions")
    size = config.patch_size_px
    if slide.label == "normal":
        wanted = {PatchLabel.NEGATIVE_NORMAL: config.targets.get(PatchLabel.NEGATIVE_NORMAL, 0)}
    else:
        wanted = {k: config.targets.get(k, 0)
                  for k in (PatchLabel.POSITIVE_TUMOR, PatchLabel.NEGATIVE_TUMOR)}
    wanted = {k: v for k, v in wanted.items() if v > 0}
    if not wanted:
        return []
    bounds = origin_range(tissue_mask, size)
    if bounds is None:
        raise DataInvariantError(f"slide {slide.id}: no tissue to sample patches from")
    x0, x1, y0, y1 = bounds
    rng = rng if rng is not None else slide_rng(config.seed, slide.id)
    have = {k: 0 for k in wanted}
    patches = []
    budget = 100 * sum(wanted.values())
    for _ in range(budget):
        if all(have[k] >= wanted[k] for k in wanted):
            break
        x = int(rng.integers(x0, x1 + 1))
        y = int(rng.integers(y0, y1 + 1))
        label = label_patch(x, y, size, slide.label, tumor_mask, tissue_mask,
                            config.min_tissue_fraction)
        if label is None or label not in wanted or have[label] >= wanted[label]:
            continue
        have[label] += 1
        patches.append(Patch(slide.id, x, y, size, read_region(slide, x, y, size, size), label))
    for k, n in wanted.items():
        if have[k] < 0.5 * n:
            raise DataInvariantError(
                f"slide {slide.id}: only {have[k]} of {n} {k.value} patches found "
                f"within the attempt budget")
    return patches


@dataclass
class FoldAssignment:
    k: int
    folds: dict  # slide id -> fold index

    def slides_in(self, fold: int) -> list:
        return sorted(s for s, f in self.folds.items() if f == fold)

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "folds": dict(sorted(self.folds.items()))},
                          indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldAssignment":
        raw = json.loads(text)
        return cls(int(raw["k"]), {str(s): int(f) for s, f in raw["folds"].items()})


def assign_folds(manifest, k: int, seed: int) -> FoldAssignment:
    """Stratified shuffled round-robin assignment of whole slides to k folds."""
    if k < 2:
        raise DataInvariantError("need at least 2 folds")
    if k > len(manifest.entries):
        raise DataInvariantError(f"{k} folds requested for {len(manifest.entries)} slides")
    rng = np.random.default_rng(seed)
    order = []
    for label in ("tumor", "normal"):
        ids = sorted(e.id for e in manifest.entries if e.label == label)
        order.extend(ids[i] for i in rng.permutation(len(ids)))
    return FoldAssignment(k, {sid: i % k for i, sid in enumerate(order)})


def write_patch_set(patches: list, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, p in enumerate(patches):
        name = f"images/{i:06d}.png"
        Image.fromarray(p.pixels, mode="RGB").save(out_dir / name)
        records.append({"slide_id": p.slide_id, "x": p.x, "y": p.y, "size": p.size_px,
                        "label": p.label.value, "file": name})
    (out_dir / "patches.json").write_text(json.dumps(records, indent=1) + "\n")
    return out_dir


def read_patch_set(path) -> list:
    path = Path(path)
    index = path / "patches.json"
    if not index.is_file():
        raise SlideIOError(f"{path}: missing patches.json")
    patches = []
    for rec in json.loads(index.read_text()):
        try:
            with Image.open(path / rec["file"]) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        except FileNotFoundError as exc:
            raise SlideIOError(f"missing patch image {rec['file']}") from exc
        if pixels.shape[:2] != (rec["size"], rec["size"]):
            raise DataInvariantError(f"patch {rec['file']} does not match its recorded size")
        patches.append(Patch(rec["slide_id"], int(rec["x"]), int(rec["y"]), int(rec["size"]),
                             pixels, PatchLabel(rec["label"])))
    return patches


def patches_to_arrays(patches: list) -> tuple:
    """Stack patches into (N, S, S, 3) uint8 pixels and binary int64 labels."""
    if not patches:
        raise DataInvariantError("empty patch set")
    x = np.stack([p.pixels for p in patches])
    y = np.array([p.label.binary for p in patches], dtype=np.int64)
    return x, y


@dataclass
class PreparedSlide:
    """A slide after tissue segmentation and color standardization."""

    entry: object
    slide: object  # standardized Slide
    tissue: np.ndarray
    tumor: Optional[np.ndarray]


def load_entry(entry):
    from .slide_store import read_mask, read_slide

    slide = read_slide(entry.slide)
    if slide.label != entry.label:
        slide = type(slide)(slide.id, slide.width_px, slide.height_px, slide.tile_size,
                            slide.tiles, entry.label)
    tumor = None
    if entry.mask:
        mask = read_mask(entry.mask, slide.id)
        mask.check_against(slide)
        tumor = np.asarray(mask.pixels)
    return slide, tumor


def prepare_slides(manifest, template=None) -> tuple:
    """Segment every manifest slide and standardize it onto one color template.

    When ``template`` is None it is pooled over the tissue of all slides.
    Returns ``(prepared slides, template)``.
    """
    from .preprocess import pooled_color_stats, standardize_color, tissue_mask
    from .slide_store import Slide

    raw = []
    for entry in manifest.entries:
        slide, tumor = load_entry(entry)
        raw.append((entry, slide, tissue_mask(slide), tumor))
    if template is None:
        template = pooled_color_stats([(s.to_array(), t) for _, s, t, _ in raw])
    prepared = []
    for entry, slide, tissue, tumor in raw:
        image = standardize_color(slide.to_array(), tissue, template)
        std = Slide.from_array(slide.id, image, slide.tile_size, slide.label)
        prepared.append(PreparedSlide(entry, std, tissue, tumor))
    return prepared, template


def extract_from_prepared(prepared: list, config: ExtractionConfig) -> list:
    patches = []
    for p in prepared:
        patches.extend(extract_patches(p.slide, p.tumor, p.tissue, config))
    return patches
