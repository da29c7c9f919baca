"""Set-prediction and distillation losses.

All functions are pure tensor ops; the bipartite matching itself is solved
outside the autograd graph, so gradients are taken with the assignment held
fixed (the usual convention for query-based detectors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

PROB_EPS = 1e-7
_BOX_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Loss and matching-cost weights; the lambdas balance the transfer objective."""

    lambda_fm: float = 0.1
    lambda_cls: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    cost_class: float = 2.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0

    def __post_init__(self) -> None:
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must be in [0, 1]")


@dataclass(frozen=True)
class MatchResult:
    """Optimal injective assignment of target index -> query index, plus its total cost."""

    target_to_query: tuple[int, ...]
    cost: float


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    """(cx, cy, w, h) -> (x0, y0, x1, y1); w/h floored at a tiny positive value."""
    cx, cy, w, h = boxes.unbind(-1)
    w = w.clamp(min=_BOX_EPS)
    h = h.clamp(min=_BOX_EPS)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0), dim=-1)


def giou(box_a, box_b) -> torch.Tensor:
    """Generalized IoU of two xyxy boxes, in (-1, 1]; degenerate boxes are rejected."""
    a = _as_tensor(box_a)
    b = _as_tensor(box_b)
    for box in (a, b):
        if box.shape != (4,):
            raise ValueError("giou expects single boxes of shape (4,)")
        if not (box[2] > box[0] and box[3] > box[1]):
            raise ValueError(f"degenerate box {box.tolist()}")
    return pairwise_giou(a.unsqueeze(0), b.unsqueeze(0))[0, 0]


def pairwise_giou(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    """GIoU matrix (N, M) between two sets of xyxy boxes."""
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    lt = torch.max(boxes_a[:, None, :2], boxes_b[None, :, :2])
    rb = torch.min(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union
    hull_lt = torch.min(boxes_a[:, None, :2], boxes_b[None, :, :2])
    hull_rb = torch.max(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    hull_wh = (hull_rb - hull_lt).clamp(min=0)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return iou - (hull - union) / hull


def box_loss(target_box, pred_box, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """l1 + GIoU box regression loss for a single pair of normalized cxcywh boxes."""
    t = _as_tensor(target_box)
    p = _as_tensor(pred_box)
    l1 = (t - p).abs().sum()
    g = giou(box_cxcywh_to_xyxy(t), box_cxcywh_to_xyxy(p))
    return weights.l1_weight * l1 + weights.giou_weight * (1.0 - g)


def sigmoid_focal_loss(
    logits,
    targets,
    alpha: float = 0.25,
    gamma: float = 2.0,
    num_matched: int | None = None,
) -> torch.Tensor:
    """Sigmoid focal loss summed over elements, normalized by the matched-target count.

    `num_matched` defaults to the number of positive entries in `targets`;
    the normalizer is floored at 1 so an all-negative grid stays well-defined.
    """
    x = _as_tensor(logits)
    t = _as_tensor(targets).to(x.dtype)
    p = torch.sigmoid(x)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(x, t, reduction="none")
    p_t = p * t + (1 - p) * (1 - t)
    alpha_t = alpha * t + (1 - alpha) * (1 - t)
    loss = alpha_t * (1 - p_t) ** gamma * ce
    if num_matched is None:
        num_matched = int(t.sum().item())
    return loss.sum() / max(1, num_matched)


def minimum_cost_assignment(cost) -> MatchResult:
    """Minimum-cost injective assignment of rows (targets) to columns (queries)."""
    c = cost.detach().cpu().numpy() if isinstance(cost, torch.Tensor) else np.asarray(cost)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    if c.shape[0] > c.shape[1]:
        raise ValueError(f"more targets ({c.shape[0]}) than queries ({c.shape[1]})")
    if c.shape[0] == 0:
        return MatchResult(target_to_query=(), cost=0.0)
    rows, cols = linear_sum_assignment(c)
    order = np.argsort(rows)
    assignment = tuple(int(q) for q in cols[order])
    return MatchResult(target_to_query=assignment, cost=float(c[rows, cols].sum()))


def matching_cost_matrix(
    class_logits: torch.Tensor,
    pred_boxes: torch.Tensor,
    target_labels: torch.Tensor,
    target_boxes: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """(num_targets, num_queries) match cost: focal-style class cost + l1 + GIoU."""
    prob = torch.sigmoid(class_logits)
    alpha, gamma = weights.focal_alpha, weights.focal_gamma
    pos = alpha * (1 - prob) ** gamma * (-torch.log(prob.clamp(min=PROB_EPS)))
    neg = (1 - alpha) * prob**gamma * (-torch.log((1 - prob).clamp(min=PROB_EPS)))
    cost_class = (pos - neg)[:, target_labels].t()
    cost_l1 = torch.cdist(target_boxes, pred_boxes, p=1)
    cost_giou = 1.0 - pairwise_giou(
        box_cxcywh_to_xyxy(target_boxes), box_cxcywh_to_xyxy(pred_boxes)
    )
    return (
        weights.cost_class * cost_class
        + weights.cost_l1 * cost_l1
        + weights.cost_giou * cost_giou
    )


def match_hungarian(
    class_logits: torch.Tensor,
    pred_boxes: torch.Tensor,
    target_labels: torch.Tensor,
    target_boxes: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> MatchResult:
    """Optimal query assignment for one image's targets."""
    num_queries = class_logits.shape[0]
    if target_labels.numel() > num_queries:
        raise ValueError(f"{target_labels.numel()} targets exceed {num_queries} queries")
    if target_labels.numel() == 0:
        return MatchResult(target_to_query=(), cost=0.0)
    with torch.no_grad():
        cost = matching_cost_matrix(class_logits, pred_boxes, target_labels, target_boxes, weights)
    return minimum_cost_assignment(cost)


def hungarian_loss(
    class_logits: torch.Tensor,
    pred_boxes: torch.Tensor,
    target_labels: torch.Tensor,
    target_boxes: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Set-prediction loss for one image: focal classification over every query
    (unmatched queries train toward all-zero targets) plus l1+GIoU on matched boxes,
    both normalized by the matched-target count."""
    match = match_hungarian(class_logits, pred_boxes, target_labels, target_boxes, weights)
    num_queries, num_classes = class_logits.shape
    n = target_labels.numel()

    target_grid = torch.zeros_like(class_logits)
    if n:
        query_idx = torch.as_tensor(match.target_to_query, dtype=torch.long)
        target_grid[query_idx, target_labels] = 1.0
    cls_loss = sigmoid_focal_loss(
        class_logits, target_grid, weights.focal_alpha, weights.focal_gamma, num_matched=n
    )
    if n == 0:
        return cls_loss

    matched = pred_boxes[query_idx]
    l1 = (target_boxes - matched).abs().sum()
    g = pairwise_giou(box_cxcywh_to_xyxy(target_boxes), box_cxcywh_to_xyxy(matched)).diagonal()
    box_term = (weights.l1_weight * l1 + weights.giou_weight * (n - g.sum())) / n
    return cls_loss + box_term


@dataclass(frozen=True)
class HeadMask:
    """Binary feature-map mask over head-class box regions; num_active counts its ones."""

    mask: torch.Tensor
    num_active: int


def build_head_mask(
    head_boxes_xyxy,
    image_size: tuple[int, int],
    feature_size: tuple[int, int],
) -> HeadMask:
    """Mark each feature cell whose center falls inside any head-class box.

    Boxes are absolute pixel xyxy; `image_size`/`feature_size` are (height, width).
    """
    img_h, img_w = image_size
    feat_h, feat_w = feature_size
    mask = torch.zeros(feat_h, feat_w)
    if len(head_boxes_xyxy):
        cy = (torch.arange(feat_h, dtype=torch.float64) + 0.5) * (img_h / feat_h)
        cx = (torch.arange(feat_w, dtype=torch.float64) + 0.5) * (img_w / feat_w)
        for box in head_boxes_xyxy:
            x0, y0, x1, y1 = (float(v) for v in box)
            inside = ((cy >= y0) & (cy <= y1)).unsqueeze(1) & ((cx >= x0) & (cx <= x1)).unsqueeze(0)
            mask = torch.maximum(mask, inside.to(mask.dtype))
    return HeadMask(mask=mask, num_active=int(mask.sum().item()))


def feature_distill(
    f_unify: torch.Tensor, f_head: torch.Tensor, head_mask: HeadMask
) -> torch.Tensor:
    """Masked squared-feature distillation, (1 / 2N) * sum mask * ||f_unify - f_head||^2.

    Features are (channels, h, w). An all-zero mask yields exactly 0.
    """
    if f_unify.shape != f_head.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_unify.shape)} vs {tuple(f_head.shape)}")
    if f_unify.shape[-2:] != head_mask.mask.shape:
        raise ValueError(
            f"mask shape {tuple(head_mask.mask.shape)} does not match features "
            f"{tuple(f_unify.shape)}"
        )
    if head_mask.num_active == 0:
        return torch.zeros((), dtype=f_unify.dtype)
    mask = head_mask.mask.to(f_unify.dtype)
    sq = ((f_unify - f_head) ** 2 * mask.unsqueeze(0)).sum()
    return sq / (2.0 * head_mask.num_active)


def class_distill(p_shared, p_head) -> torch.Tensor:
    """Per-class Bernoulli KL D(p_head || p_shared), averaged over all entries.

    `p_shared` are the student's probabilities on the teacher's query features,
    `p_head` the teacher's own; both must lie in [0, 1] and are clamped away
    from the endpoints before taking logs.
    """
    ps = _as_tensor(p_shared)
    ph = _as_tensor(p_head).to(ps.dtype)
    for name, p in (("p_shared", ps), ("p_head", ph)):
        if not bool(((p >= 0.0) & (p <= 1.0)).all()):
            raise ValueError(f"{name} contains values outside [0, 1]")
    ps = ps.clamp(PROB_EPS, 1.0 - PROB_EPS)
    ph = ph.clamp(PROB_EPS, 1.0 - PROB_EPS)
    kl = ph * (torch.log(ph) - torch.log(ps)) + (1 - ph) * (torch.log1p(-ph) - torch.log1p(-ps))
    return kl.mean()


def total_loss(
    class_logits: torch.Tensor,
    pred_boxes: torch.Tensor,
    target_labels: torch.Tensor,
    target_boxes: torch.Tensor,
    f_unify: torch.Tensor,
    f_head: torch.Tensor,
    head_mask: HeadMask,
    p_shared: torch.Tensor,
    p_head: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Transfer-stage objective: hungarian + lambda_fm * feature + lambda_cls * class terms.

    The returned breakdown recomposes `total` from the logged parts, so the
    logged terms always sum exactly to the logged total.
    """
    l_hg = hungarian_loss(class_logits, pred_boxes, target_labels, target_boxes, weights)
    l_fm = feature_distill(f_unify, f_head, head_mask)
    l_cls = class_distill(p_shared, p_head)
    total = l_hg + weights.lambda_fm * l_fm + weights.lambda_cls * l_cls
    parts = {
        "hungarian": float(l_hg.detach()),
        "feature_distill": float(l_fm.detach()),
        "class_distill": float(l_cls.detach()),
    }
    parts["total"] = (
        parts["hungarian"]
        + weights.lambda_fm * parts["feature_distill"]
        + weights.lambda_cls * parts["class_distill"]
    )
    return total, parts
