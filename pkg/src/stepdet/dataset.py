"""Synthetic long-tailed detection data: generation, annotation model, category partitions.

Images are "shape-world" scenes: a noisy dark background with 1..max_objects
colored glyphs. A category is a unique (glyph shape, fill color) pair, so the
dataset is fully re-renderable from its annotation file alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CategoryId = int

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")

PALETTE = (
    ("red", (220, 50, 47)),
    ("orange", (241, 143, 31)),
    ("yellow", (246, 217, 52)),
    ("green", (62, 189, 84)),
    ("cyan", (42, 199, 222)),
    ("blue", (38, 96, 230)),
    ("purple", (142, 68, 217)),
    ("magenta", (217, 64, 164)),
)

MAX_RENDERABLE_CATEGORIES = len(SHAPES) * len(PALETTE)


class DatasetError(ValueError):
    """Malformed annotation data or an unsatisfiable generator config."""


def category_style(category: CategoryId) -> tuple[str, tuple[int, int, int]]:
    """Return the (shape, rgb) identity of a category id."""
    shape = SHAPES[category % len(SHAPES)]
    _, rgb = PALETTE[(category // len(SHAPES)) % len(PALETTE)]
    return shape, rgb


def category_name(category: CategoryId) -> str:
    color = PALETTE[(category // len(SHAPES)) % len(PALETTE)][0]
    return f"{color}_{SHAPES[category % len(SHAPES)]}"


@dataclass(frozen=True)
class Annotation:
    """One object instance: axis-aligned box in absolute pixels, (x_min, y_min, x_max, y_max)."""

    id: int
    image_id: int
    category: CategoryId
    bbox: tuple[float, float, float, float]


@dataclass(frozen=True)
class ImageRecord:
    """Image metadata plus the seed that makes re-rendering bit-identical."""

    id: int
    width: int
    height: int
    noise_seed: int


@dataclass
class DetectionDataset:
    images: list[ImageRecord]
    annotations: list[Annotation]
    categories: list[CategoryId]

    def __post_init__(self) -> None:
        validate_dataset(self)

    def image_by_id(self, image_id: int) -> ImageRecord:
        return self._image_index()[image_id]

    def annotations_by_image(self, image_id: int) -> list[Annotation]:
        # index built lazily; datasets are treated as immutable once constructed
        if not hasattr(self, "_ann_index"):
            index: dict[int, list[Annotation]] = {rec.id: [] for rec in self.images}
            for ann in self.annotations:
                index[ann.image_id].append(ann)
            self._ann_index = index
        return self._ann_index[image_id]

    def _image_index(self) -> dict[int, ImageRecord]:
        if not hasattr(self, "_idx"):
            self._idx = {rec.id: rec for rec in self.images}
        return self._idx


@dataclass(frozen=True)
class CategoryPartition:
    """Head/tail split of the category table at an image-count threshold."""

    head: frozenset[CategoryId]
    tail: frozenset[CategoryId]
    threshold: int


@dataclass(frozen=True)
class FrequencyGroups:
    rare: frozenset[CategoryId]
    common: frozenset[CategoryId]
    frequent: frozenset[CategoryId]


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape-world generator settings; every random choice descends from `seed`.

    `avg_categories_per_image` sets the mean number of distinct categories per
    image; `subset_tag` salts the per-image streams so train/val splits share
    one category table but draw disjoint scenes.
    """

    num_categories: int
    zipf_exponent: float
    num_images: int
    image_size: int = 64
    max_objects_per_image: int = 4
    seed: int = 0
    avg_categories_per_image: float = 1.3
    subset_tag: int = 0

    def validate(self) -> None:
        if self.num_categories < 2:
            raise DatasetError("num_categories must be >= 2")
        if self.num_categories > MAX_RENDERABLE_CATEGORIES:
            raise DatasetError(
                f"num_categories={self.num_categories} exceeds the "
                f"{MAX_RENDERABLE_CATEGORIES} renderable (shape, color) combinations "
                f"({len(SHAPES)} shapes x {len(PALETTE)} colors)"
            )
        if self.num_images < 1:
            raise DatasetError("num_images must be >= 1")
        if self.zipf_exponent < 0:
            raise DatasetError("zipf_exponent must be >= 0")
        if self.image_size < 32:
            raise DatasetError("image_size must be >= 32")
        if self.max_objects_per_image < 1:
            raise DatasetError("max_objects_per_image must be >= 1")
        if self.avg_categories_per_image <= 0:
            raise DatasetError("avg_categories_per_image must be > 0")


def zipf_masses(num_categories: int, exponent: float) -> np.ndarray:
    """Normalized Zipf mass per frequency rank (rank 1 first)."""
    ranks = np.arange(1, num_categories + 1, dtype=np.float64)
    w = ranks ** (-exponent)
    return w / w.sum()


def category_masses(config: GeneratorConfig) -> np.ndarray:
    """Per-category-id sampling mass: Zipf over ranks, ranks assigned by a seeded shuffle.

    The rank assignment depends only on (seed, num_categories), never on
    `subset_tag`, so train/val splits agree on which categories are frequent.
    """
    masses = zipf_masses(config.num_categories, config.zipf_exponent)
    rng = np.random.default_rng([config.seed, 0xCA7])
    order = rng.permutation(config.num_categories)
    out = np.empty(config.num_categories)
    out[order] = masses
    return out


def _box_iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def generate_shapeworld(config: GeneratorConfig) -> DetectionDataset:
    """Generate a long-tailed shape-world dataset.

    Per image, each category c is included independently with probability
    min(avg_categories_per_image * mass_c, 0.95); an empty draw is replaced by
    one category sampled from the mass function, which keeps the marginal
    inclusion probability proportional to mass_c. Image counts per category
    therefore follow the configured Zipf law in expectation.
    """
    config.validate()
    masses = category_masses(config)
    q = np.minimum(config.avg_categories_per_image * masses, 0.95)
    size = config.image_size
    scale = size / 64.0

    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    next_ann_id = 0
    for image_id in range(config.num_images):
        rng = np.random.default_rng([config.seed, config.subset_tag, image_id])
        noise_seed = int(rng.integers(0, 2**31 - 1))

        included = np.flatnonzero(rng.random(config.num_categories) < q)
        if included.size == 0:
            included = np.array([rng.choice(config.num_categories, p=masses)])
        if included.size > config.max_objects_per_image:
            included = rng.choice(included, size=config.max_objects_per_image, replace=False)
            included = np.sort(included)

        budget = config.max_objects_per_image - included.size
        placed: list[tuple[float, float, float, float]] = []
        for category in included.tolist():
            n_instances = 1
            if budget > 0 and rng.random() < 0.2:
                n_instances, budget = 2, budget - 1
            for _ in range(n_instances):
                bbox = _place_glyph(rng, size, scale, placed)
                placed.append(bbox)
                annotations.append(
                    Annotation(id=next_ann_id, image_id=image_id, category=category, bbox=bbox)
                )
                next_ann_id += 1

        images.append(ImageRecord(id=image_id, width=size, height=size, noise_seed=noise_seed))

    return DetectionDataset(
        images=images, annotations=annotations, categories=list(range(config.num_categories))
    )


def _place_glyph(
    rng: np.random.Generator,
    size: int,
    scale: float,
    placed: list[tuple[float, float, float, float]],
    max_tries: int = 12,
) -> tuple[float, float, float, float]:
    """Sample a glyph box, preferring placements with little overlap to earlier glyphs."""
    bbox = None
    for _ in range(max_tries):
        half_w = rng.uniform(5.0, 13.0) * scale
        half_h = half_w * rng.uniform(0.85, 1.2)
        cx = rng.uniform(half_w + 1.0, size - half_w - 1.0)
        cy = rng.uniform(half_h + 1.0, size - half_h - 1.0)
        bbox = (
            round(cx - half_w, 3),
            round(cy - half_h, 3),
            round(cx + half_w, 3),
            round(cy + half_h, 3),
        )
        if all(_box_iou(bbox, other) <= 0.3 for other in placed):
            return bbox
    return bbox


def count_images_per_category(ds: DetectionDataset) -> dict[CategoryId, int]:
    """Number of images containing >= 1 instance of each category (image-level counting)."""
    seen: dict[CategoryId, set[int]] = {c: set() for c in ds.categories}
    for ann in ds.annotations:
        seen[ann.category].add(ann.image_id)
    return {c: len(s) for c, s in seen.items()}


def partition_head_tail(ds: DetectionDataset, threshold: int) -> CategoryPartition:
    """Split categories into head (>= threshold images) and tail (< threshold images)."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    counts = count_images_per_category(ds)
    head = frozenset(c for c, n in counts.items() if n >= threshold)
    tail = frozenset(c for c, n in counts.items() if n < threshold)
    return CategoryPartition(head=head, tail=tail, threshold=threshold)


def frequency_groups(
    ds: DetectionDataset, thresholds: tuple[int, int] = (10, 100)
) -> FrequencyGroups:
    """Rare (< lo images) / common (lo..hi inclusive) / frequent (> hi) category groups."""
    lo, hi = thresholds
    if not lo < hi:
        raise ValueError("thresholds must be strictly increasing")
    counts = count_images_per_category(ds)
    rare = frozenset(c for c, n in counts.items() if n < lo)
    common = frozenset(c for c, n in counts.items() if lo <= n <= hi)
    frequent = frozenset(c for c, n in counts.items() if n > hi)
    return FrequencyGroups(rare=rare, common=common, frequent=frequent)


def validate_dataset(ds: DetectionDataset) -> None:
    image_ids = {rec.id for rec in ds.images}
    if len(image_ids) != len(ds.images):
        raise DatasetError("duplicate image ids")
    for rec in ds.images:
        if rec.width <= 0 or rec.height <= 0:
            raise DatasetError(f"image {rec.id}: non-positive size")
    categories = set(ds.categories)
    seen_ann: set[int] = set()
    index = {rec.id: rec for rec in ds.images}
    for ann in ds.annotations:
        if ann.id in seen_ann:
            raise DatasetError(f"annotation {ann.id}: duplicate id")
        seen_ann.add(ann.id)
        if ann.image_id not in image_ids:
            raise DatasetError(f"annotation {ann.id}: references missing image {ann.image_id}")
        if ann.category not in categories:
            raise DatasetError(f"annotation {ann.id}: unknown category {ann.category}")
        if len(ann.bbox) != 4:
            raise DatasetError(f"annotation {ann.id}: bbox must have 4 coordinates")
        x0, y0, x1, y1 = ann.bbox
        if not (x0 < x1 and y0 < y1):
            raise DatasetError(f"annotation {ann.id}: degenerate bbox {ann.bbox}")
        rec = index[ann.image_id]
        if x0 < 0 or y0 < 0 or x1 > rec.width or y1 > rec.height:
            raise DatasetError(f"annotation {ann.id}: bbox {ann.bbox} outside image bounds")


def save_annotations(ds: DetectionDataset, path: str | Path) -> None:
    """Write the dataset as one JSON document with COCO-style array names (bbox is xyxy)."""
    doc = {
        "format": "stepdet-annotations-v1",
        "bbox_format": "xyxy",
        "images": [
            {"id": r.id, "width": r.width, "height": r.height, "noise_seed": r.noise_seed}
            for r in ds.images
        ],
        "annotations": [
            {"id": a.id, "image_id": a.image_id, "category_id": a.category, "bbox": list(a.bbox)}
            for a in ds.annotations
        ],
        "categories": [{"id": c, "name": category_name(c)} for c in ds.categories],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_annotations(path: str | Path) -> DetectionDataset:
    """Load and validate an annotation file; raises DatasetError naming the offending record."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DatasetError(f"{path}: missing '{key}' array")
    if doc.get("bbox_format", "xyxy") != "xyxy":
        raise DatasetError(f"{path}: unsupported bbox_format {doc.get('bbox_format')!r}")
    try:
        images = [
            ImageRecord(
                id=int(r["id"]),
                width=int(r["width"]),
                height=int(r["height"]),
                noise_seed=int(r.get("noise_seed", 0)),
            )
            for r in doc["images"]
        ]
        annotations = [
            Annotation(
                id=int(a["id"]),
                image_id=int(a["image_id"]),
                category=int(a["category_id"]),
                bbox=tuple(float(v) for v in a["bbox"]),
            )
            for a in doc["annotations"]
        ]
        categories = [int(c["id"]) for c in doc["categories"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed record ({exc})") from exc
    return DetectionDataset(images=images, annotations=annotations, categories=categories)
