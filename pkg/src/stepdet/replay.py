"""Confidence-guided exemplar selection and the two smooth-tail training subsets.

The selection for each category runs in two phases: first take high-confidence
instances (score above the threshold) at most one per image, in descending
score order, then backfill the remaining quota from whatever is left, again by
score. Ties always break by ascending annotation id, so the result is a pure
function of (scores, budget) regardless of input ordering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import Annotation, CategoryPartition, DetectionDataset
from .detector import ShapeDetector
from .evaluation import iou_matrix
from .inference import run_inference

ALL_INSTANCES = "all"
SCORE_MATCH_IOU = 0.5


@dataclass(frozen=True)
class ScoredInstance:
    annotation_id: int
    image_id: int
    category: int
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class ReplayBudget:
    """Per-category quotas; the tail quota may be the string "all"."""

    head_quota: int
    tail_quota: int | str
    tau: float = 0.5

    def __post_init__(self) -> None:
        if self.head_quota < 1:
            raise ValueError("head_quota must be >= 1")
        if self.tail_quota != ALL_INSTANCES and (
            not isinstance(self.tail_quota, int) or self.tail_quota < 1
        ):
            raise ValueError('tail_quota must be >= 1 or "all"')
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")


HEAD_DOMINANT_BUDGET = ReplayBudget(head_quota=200, tail_quota=30)
TAIL_DOMINANT_BUDGET = ReplayBudget(head_quota=50, tail_quota=ALL_INSTANCES)


@dataclass(frozen=True)
class ReplaySubset:
    """A masked view of a dataset: only `valid_annotation_ids` are training
    targets; the other annotations of an included image are ignored."""

    dataset: DetectionDataset
    valid_annotation_ids: frozenset[int]
    image_ids: frozenset[int]
    repeat_factor: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        by_id = {a.id: a for a in self.dataset.annotations}
        for aid in self.valid_annotation_ids:
            if aid not in by_id:
                raise ValueError(f"valid annotation {aid} not in dataset")
            if by_id[aid].image_id not in self.image_ids:
                raise ValueError(f"annotation {aid}: its image is not included")
        for factor in self.repeat_factor.values():
            if factor < 1.0:
                raise ValueError("repeat factors must be >= 1")

    def valid_annotations(self, image_id: int) -> list[Annotation]:
        return [
            a
            for a in self.dataset.annotations_by_image(image_id)
            if a.id in self.valid_annotation_ids
        ]

    def per_category_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for ann in self.dataset.annotations:
            if ann.id in self.valid_annotation_ids:
                counts[ann.category] = counts.get(ann.category, 0) + 1
        return counts


def score_instances(
    model: ShapeDetector, ds: DetectionDataset, batch_size: int = 64
) -> list[ScoredInstance]:
    """One score per ground-truth annotation: the best same-class prediction
    confidence among predictions overlapping it at IoU >= 0.5, else 0."""
    if model.config.num_classes != len(ds.categories):
        raise ValueError(
            f"model has {model.config.num_classes} classes, dataset {len(ds.categories)}"
        )
    scored = []
    for image_id, probs, boxes in run_inference(model, ds, batch_size):
        anns = ds.annotations_by_image(image_id)
        if not anns:
            continue
        overlaps = iou_matrix(boxes, [a.bbox for a in anns])
        for j, ann in enumerate(anns):
            hits = overlaps[:, j] >= SCORE_MATCH_IOU
            score = float(probs[hits, ann.category].max()) if hits.any() else 0.0
            scored.append(
                ScoredInstance(
                    annotation_id=ann.id,
                    image_id=image_id,
                    category=ann.category,
                    score=score,
                )
            )
    return scored


def select_exemplars(scored: Sequence[ScoredInstance], quota: int, tau: float) -> list[int]:
    """Two-phase per-category selection; returns annotation ids in pick order."""
    if quota <= 0:
        raise ValueError("quota must be positive")
    ranked = sorted(scored, key=lambda s: (-s.score, s.annotation_id))
    chosen: list[int] = []
    used_images: set[int] = set()
    for inst in ranked:
        if len(chosen) >= quota:
            return chosen
        if inst.score > tau and inst.image_id not in used_images:
            chosen.append(inst.annotation_id)
            used_images.add(inst.image_id)
    taken = set(chosen)
    for inst in ranked:
        if len(chosen) >= quota:
            break
        if inst.annotation_id not in taken:
            chosen.append(inst.annotation_id)
    return chosen


def _build_subset(
    ds: DetectionDataset,
    scored: Sequence[ScoredInstance],
    quotas: Mapping[int, int | str],
    tau: float,
) -> ReplaySubset:
    by_cat: dict[int, list[ScoredInstance]] = {c: [] for c in quotas}
    for inst in scored:
        if inst.category in by_cat:
            by_cat[inst.category].append(inst)
    valid: set[int] = set()
    for cat in sorted(quotas):
        quota = quotas[cat]
        insts = by_cat[cat]
        if quota == ALL_INSTANCES:
            valid.update(i.annotation_id for i in insts)
        else:
            valid.update(select_exemplars(insts, quota, tau))
    ann_by_id = {a.id: a for a in ds.annotations}
    images = frozenset(ann_by_id[aid].image_id for aid in valid)
    return ReplaySubset(
        dataset=ds,
        valid_annotation_ids=frozenset(valid),
        image_ids=images,
        repeat_factor={img: 1.0 for img in sorted(images)},
    )


def build_head_dominant(
    ds: DetectionDataset,
    scored: Sequence[ScoredInstance],
    partition: CategoryPartition,
    budget: ReplayBudget = HEAD_DOMINANT_BUDGET,
) -> ReplaySubset:
    """Head-dominant subset: full head quota, a small slice of each tail category."""
    if not partition.head:
        raise ValueError("head partition is empty; nothing to fine-tune on")
    quotas: dict[int, int | str] = {c: budget.head_quota for c in partition.head}
    quotas.update({c: budget.tail_quota for c in partition.tail})
    return _build_subset(ds, scored, quotas, budget.tau)


def build_tail_dominant(
    ds: DetectionDataset,
    scored: Sequence[ScoredInstance],
    partition: CategoryPartition,
    budget: ReplayBudget = TAIL_DOMINANT_BUDGET,
) -> ReplaySubset:
    """Tail-dominant subset: every tail instance, a small slice of each head category."""
    if not partition.head:
        raise ValueError("head partition is empty")
    quotas: dict[int, int | str] = {c: budget.head_quota for c in partition.head}
    quotas.update({c: budget.tail_quota for c in partition.tail})
    return _build_subset(ds, scored, quotas, budget.tau)


def category_repeat_factors(subset: ReplaySubset, t: float) -> dict[int, float]:
    """r(c) = max(1, sqrt(t / f(c))), f(c) the fraction of subset images whose
    valid annotations include category c."""
    if not 0.0 < t <= 1.0:
        raise ValueError("threshold t must be in (0, 1]")
    if not subset.image_ids:
        raise ValueError("empty subset")
    num_images = len(subset.image_ids)
    images_with: dict[int, set[int]] = {}
    for img in subset.image_ids:
        for ann in subset.valid_annotations(img):
            images_with.setdefault(ann.category, set()).add(img)
    return {
        c: max(1.0, math.sqrt(t / (len(imgs) / num_images))) for c, imgs in images_with.items()
    }


def repeat_factors(subset: ReplaySubset, t: float) -> dict[int, float]:
    """Per-image repeat factors r(I) = max over valid categories of r(c)."""
    r_cat = category_repeat_factors(subset, t)
    factors = {}
    for img in sorted(subset.image_ids):
        cats = {a.category for a in subset.valid_annotations(img)}
        factors[img] = max((r_cat[c] for c in cats), default=1.0)
    return factors


def with_repeat_factors(subset: ReplaySubset, t: float) -> ReplaySubset:
    return ReplaySubset(
        dataset=subset.dataset,
        valid_annotation_ids=subset.valid_annotation_ids,
        image_ids=subset.image_ids,
        repeat_factor=repeat_factors(subset, t),
    )


def epoch_sampling_plan(subset: ReplaySubset, seed: int | Sequence[int]) -> list[int]:
    """One epoch's image id sequence: floor(r) copies of each image plus one
    more with probability frac(r), shuffled; deterministic in the seed."""
    entropy = [seed] if isinstance(seed, int) else list(seed)
    rng = np.random.default_rng([*entropy, 0x5A0])
    plan: list[int] = []
    for img in sorted(subset.image_ids):
        r = subset.repeat_factor.get(img, 1.0)
        copies = int(math.floor(r))
        if rng.random() < r - copies:
            copies += 1
        plan.extend([img] * copies)
    rng.shuffle(plan)
    return plan


def save_scores(scored: Sequence[ScoredInstance], path) -> None:
    with open(path, "w") as fh:
        for inst in sorted(scored, key=lambda s: s.annotation_id):
            fh.write(
                json.dumps(
                    {
                        "annotation_id": inst.annotation_id,
                        "image_id": inst.image_id,
                        "category": inst.category,
                        "score": inst.score,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_scores(path) -> list[ScoredInstance]:
    scored = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                scored.append(
                    ScoredInstance(
                        annotation_id=rec["annotation_id"],
                        image_id=rec["image_id"],
                        category=rec["category"],
                        score=rec["score"],
                    )
                )
    return scored


def save_subset(subset: ReplaySubset, path, source_path: str) -> None:
    doc = {
        "format": "stepdet-replay-v1",
        "source": source_path,
        "valid_annotation_ids": sorted(subset.valid_annotation_ids),
        "image_ids": sorted(subset.image_ids),
        "repeat_factor": {str(k): v for k, v in sorted(subset.repeat_factor.items())},
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_subset(path, ds: DetectionDataset) -> ReplaySubset:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "stepdet-replay-v1":
        raise ValueError(f"{path}: not a replay subset file")
    return ReplaySubset(
        dataset=ds,
        valid_annotation_ids=frozenset(doc["valid_annotation_ids"]),
        image_ids=frozenset(doc["image_ids"]),
        repeat_factor={int(k): float(v) for k, v in doc["repeat_factor"].items()},
    )
