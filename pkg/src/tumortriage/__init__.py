"""Patch-level tumor triage for whole-slide images: synthetic slides, tissue
segmentation, patch extraction, a small numpy CNN zoo, slide-level
cross-validation, heatmaps and inference benchmarks."""

__version__ = "0.1.0"
