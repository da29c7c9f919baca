"""COCO-style box AP with frequency-group breakdown.

AP per category averages over IoU thresholds 0.50:0.05:0.95. Per threshold,
detections greedily match the unmatched ground truth of highest IoU; the
precision-recall curve gets a (recall 0, precision 1) anchor, a monotone
envelope, and 101-point interpolation. Categories without ground truth are
excluded from every mean; a category with ground truth but no detections
scores exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DetectionDataset, FrequencyGroups

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.50, 0.95, 10), 2).tolist())
RECALL_SAMPLES = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    image_id: int
    category: int
    bbox: tuple[float, float, float, float]
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate bbox {self.bbox}")


@dataclass(frozen=True)
class MetricsTable:
    per_category: dict[int, float]
    ap: float
    ap_rare: float | None
    ap_common: float | None
    ap_frequent: float | None

    def as_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap_rare": self.ap_rare,
            "ap_common": self.ap_common,
            "ap_frequent": self.ap_frequent,
            "per_category": {str(c): v for c, v in sorted(self.per_category.items())},
        }


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xyxy boxes, shape (len(a), len(b))."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def _interpolated_ap(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """101-point AP over a PR curve given in detection order, anchored at (0, 1)."""
    r = np.concatenate(([0.0], recalls))
    p = np.concatenate(([1.0], precisions))
    p = np.maximum.accumulate(p[::-1])[::-1]
    idx = np.searchsorted(r, RECALL_SAMPLES, side="left")
    sampled = np.where(idx < len(p), p[np.minimum(idx, len(p) - 1)], 0.0)
    return float(sampled.mean())


def _category_ap(
    dets: list[Detection],
    gts_by_image: dict[int, np.ndarray],
    num_gt: int,
    thresholds,
) -> float:
    if num_gt == 0:
        raise ValueError("category has no ground truth")
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))
    ious: list[np.ndarray | None] = []
    for i in order:
        gt = gts_by_image.get(dets[i].image_id)
        ious.append(iou_matrix([dets[i].bbox], gt)[0] if gt is not None else None)

    per_thr = []
    for thr in thresholds:
        matched: dict[int, np.ndarray] = {
            img: np.zeros(len(g), dtype=bool) for img, g in gts_by_image.items()
        }
        tp = np.zeros(len(order))
        for rank, i in enumerate(order):
            iou_row = ious[rank]
            if iou_row is None:
                continue
            used = matched[dets[i].image_id]
            candidates = np.where(~used & (iou_row >= thr))[0]
            if candidates.size:
                best = candidates[np.argmax(iou_row[candidates])]
                used[best] = True
                tp[rank] = 1.0
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(1.0 - tp)
        recalls = tp_cum / num_gt
        precisions = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        per_thr.append(_interpolated_ap(recalls, precisions))
    return float(np.mean(per_thr))


def average_precision(
    detections: list[Detection],
    dataset: DetectionDataset,
    iou_thresholds=IOU_THRESHOLDS,
) -> dict[int, float]:
    """Per-category AP; only categories with ground truth appear in the result."""
    gts: dict[int, dict[int, list]] = {}
    counts: dict[int, int] = {}
    for ann in dataset.annotations:
        gts.setdefault(ann.category, {}).setdefault(ann.image_id, []).append(ann.bbox)
        counts[ann.category] = counts.get(ann.category, 0) + 1
    dets_by_cat: dict[int, list[Detection]] = {}
    for det in detections:
        dets_by_cat.setdefault(det.category, []).append(det)

    result = {}
    for cat in sorted(counts):
        by_image = {img: np.asarray(b, dtype=np.float64) for img, b in gts[cat].items()}
        result[cat] = _category_ap(
            dets_by_cat.get(cat, []), by_image, counts[cat], iou_thresholds
        )
    return result


def mean_over(per_category_ap: dict[int, float], categories) -> float | None:
    """Mean AP over the given categories, restricted to those actually evaluated."""
    values = [per_category_ap[c] for c in categories if c in per_category_ap]
    if not values:
        return None
    return float(np.mean(values))


def grouped_metrics(per_category_ap: dict[int, float], groups: FrequencyGroups) -> MetricsTable:
    if not per_category_ap:
        raise ValueError("no evaluated categories")
    return MetricsTable(
        per_category=dict(per_category_ap),
        ap=float(np.mean(list(per_category_ap.values()))),
        ap_rare=mean_over(per_category_ap, groups.rare),
        ap_common=mean_over(per_category_ap, groups.common),
        ap_frequent=mean_over(per_category_ap, groups.frequent),
    )
