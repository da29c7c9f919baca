"""Shared fixtures and independent oracle implementations.

The oracles here deliberately re-derive results by the most direct method
available (exhaustive enumeration, central differences, literal re-reading of
the selection rules) so the package code is checked against something that
cannot share its bugs.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np
import pytest
import torch

from stepdet.dataset import Annotation, DetectionDataset, ImageRecord


# ---------------------------------------------------------------- matching

_PERM_CACHE: dict[tuple[int, int], np.ndarray] = {}


def brute_force_assignment(cost: np.ndarray) -> tuple[float, list[tuple[int, ...]]]:
    """Exhaustive minimum-cost injective assignment of rows to columns.

    Returns the optimal cost and every optimal assignment (to detect ties).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    assert n <= m
    key = (n, m)
    if key not in _PERM_CACHE:
        _PERM_CACHE[key] = np.array(list(permutations(range(m), n)), dtype=np.int64)
    perms = _PERM_CACHE[key]
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    best = totals.min()
    winners = [tuple(p) for p in perms[np.isclose(totals, best, rtol=0, atol=1e-9)]]
    return float(best), winners


# ------------------------------------------------------------- derivatives


def finite_difference_grad(fn, x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. a float64 tensor."""
    assert x.dtype == torch.float64
    grad = torch.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.numel()):
        orig = flat_x[i].item()
        flat_x[i] = orig + eps
        f_plus = float(fn(x))
        flat_x[i] = orig - eps
        f_minus = float(fn(x))
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(analytic.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / scale


# ---------------------------------------------------------------- replay


def two_pass_selection_oracle(scored, quota: int, tau: float) -> list[int]:
    """Literal restatement of the exemplar rule, independent of the package code."""
    ranked = sorted(scored, key=lambda s: (-s.score, s.annotation_id))
    picked: list[int] = []
    seen_images = set()
    for s in ranked:
        if len(picked) == quota:
            return picked
        if s.score > tau and s.image_id not in seen_images:
            picked.append(s.annotation_id)
            seen_images.add(s.image_id)
    for s in ranked:
        if len(picked) == quota:
            break
        if s.annotation_id not in picked:
            picked.append(s.annotation_id)
    return picked


# ------------------------------------------------------------- evaluation


def _iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def naive_category_ap(dets, gts_by_image, thresholds) -> float:
    """Hand-computable AP for one category: explicit greedy matching, explicit
    PR points with the (0, 1) anchor, explicit max-precision sampling."""
    num_gt = sum(len(v) for v in gts_by_image.values())
    assert num_gt > 0
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))
    aps = []
    for thr in thresholds:
        used = {img: [False] * len(g) for img, g in gts_by_image.items()}
        points = [(0.0, 1.0)]
        tp = fp = 0
        for i in order:
            det = dets[i]
            best_j, best_iou = None, thr
            for j, gt in enumerate(gts_by_image.get(det.image_id, [])):
                iou = _iou(det.bbox, gt)
                if not used[det.image_id][j] and iou >= best_iou:
                    best_j, best_iou = j, iou
            if best_j is not None:
                used[det.image_id][best_j] = True
                tp += 1
            else:
                fp += 1
            points.append((tp / num_gt, tp / (tp + fp)))
        total = 0.0
        for r in np.linspace(0.0, 1.0, 101):
            candidates = [p for rec, p in points if rec >= r]
            total += max(candidates) if candidates else 0.0
        aps.append(total / 101)
    return float(np.mean(aps))


# ----------------------------------------------------------------- data


def tiny_dataset(boxes_by_image: dict[int, list[tuple[int, tuple]]], size: int = 64):
    """Build a dataset literal: {image_id: [(category, bbox), ...]}."""
    images, annotations = [], []
    ann_id = 0
    cats = set()
    for image_id, anns in sorted(boxes_by_image.items()):
        images.append(ImageRecord(id=image_id, width=size, height=size, noise_seed=image_id))
        for cat, bbox in anns:
            annotations.append(
                Annotation(id=ann_id, image_id=image_id, category=cat, bbox=tuple(bbox))
            )
            cats.add(cat)
            ann_id += 1
    return DetectionDataset(
        images=images, annotations=annotations, categories=sorted(cats)
    )


@pytest.fixture(scope="session")
def small_generated():
    from stepdet.dataset import GeneratorConfig, generate_shapeworld

    return generate_shapeworld(
        GeneratorConfig(num_categories=8, zipf_exponent=1.0, num_images=60, seed=11)
    )
