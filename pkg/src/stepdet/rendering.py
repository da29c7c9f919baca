"""Rasterization of shape-world scenes from annotations alone."""

from __future__ import annotations

import numpy as np

from .dataset import Annotation, DetectionDataset, ImageRecord, category_style

BACKGROUND_LEVEL = 42
BACKGROUND_NOISE_STD = 7.0


def _glyph_mask(shape: str, height: int, width: int) -> np.ndarray:
    """Boolean mask of a glyph filling a (height, width) box."""
    yy, xx = np.mgrid[0:height, 0:width]
    # normalized coordinates in [-1, 1] relative to the box center
    u = (xx + 0.5) / width * 2.0 - 1.0
    v = (yy + 0.5) / height * 2.0 - 1.0
    if shape == "circle":
        return u**2 + v**2 <= 1.0
    if shape == "square":
        return np.ones((height, width), dtype=bool)
    if shape == "triangle":
        # upward-pointing, apex at the top edge center
        return (v >= -1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "cross":
        return (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    if shape == "ring":
        r2 = u**2 + v**2
        return (r2 <= 1.0) & (r2 >= 0.3)
    raise ValueError(f"unknown glyph shape {shape!r}")


def render_image(record: ImageRecord, annotations: list[Annotation]) -> np.ndarray:
    """Render one image to (H, W, 3) uint8; bit-identical for identical inputs."""
    rng = np.random.default_rng(record.noise_seed)
    noise = rng.normal(0.0, BACKGROUND_NOISE_STD, size=(record.height, record.width, 3))
    img = np.clip(BACKGROUND_LEVEL + noise, 0, 255)

    for ann in sorted(annotations, key=lambda a: a.id):
        shape, rgb = category_style(ann.category)
        x0, y0, x1, y1 = ann.bbox
        c0, r0 = int(np.floor(x0)), int(np.floor(y0))
        c1, r1 = int(np.ceil(x1)), int(np.ceil(y1))
        c0, r0 = max(c0, 0), max(r0, 0)
        c1, r1 = min(c1, record.width), min(r1, record.height)
        if c1 <= c0 or r1 <= r0:
            continue
        mask = _glyph_mask(shape, r1 - r0, c1 - c0)
        jitter = np.random.default_rng([record.noise_seed, ann.id]).uniform(0.82, 1.0)
        color = np.clip(np.asarray(rgb, dtype=np.float64) * jitter, 0, 255)
        region = img[r0:r1, c0:c1]
        region[mask] = color

    return img.astype(np.uint8)


def render_dataset(ds: DetectionDataset) -> dict[int, np.ndarray]:
    """Render every image; independent per image, keyed by image id."""
    return {rec.id: render_image(rec, ds.annotations_by_image(rec.id)) for rec in ds.images}
