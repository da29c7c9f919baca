"""Batched eval-mode inference over a dataset: render, forward, decode boxes."""

from __future__ import annotations

from typing import Iterator

import numpy as np
import torch

from .dataset import DetectionDataset
from .detector import ShapeDetector
from .evaluation import Detection
from .rendering import render_image


def images_to_tensor(arrays: list[np.ndarray]) -> torch.Tensor:
    """Stack HWC uint8 images into a (B, 3, H, W) float tensor in [0, 1]."""
    stack = np.stack(arrays).astype(np.float32) / 255.0
    return torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous()


def run_inference(
    model: ShapeDetector, ds: DetectionDataset, batch_size: int = 64
) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield (image_id, class probabilities (N_q, C), boxes xyxy in pixels (N_q, 4))."""
    model.eval()
    records = sorted(ds.images, key=lambda r: r.id)
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            batch = images_to_tensor(
                [render_image(rec, ds.annotations_by_image(rec.id)) for rec in chunk]
            )
            out = model(batch)
            probs = out.class_logits.sigmoid().numpy()
            boxes = out.boxes.numpy()
            for i, rec in enumerate(chunk):
                cx, cy, w, h = (boxes[i] * [[rec.width, rec.height, rec.width, rec.height]]).T
                xyxy = np.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), axis=1)
                yield rec.id, probs[i], xyxy


def predict_detections(
    model: ShapeDetector,
    ds: DetectionDataset,
    score_threshold: float = 0.05,
    batch_size: int = 64,
) -> list[Detection]:
    """Every (query, class) pair above the score threshold, as Detection records."""
    dets: list[Detection] = []
    for image_id, probs, boxes in run_inference(model, ds, batch_size):
        keep_q, keep_c = np.where(probs >= score_threshold)
        for q, c in zip(keep_q.tolist(), keep_c.tolist()):
            x0, y0, x1, y1 = boxes[q].tolist()
            if x1 <= x0 or y1 <= y0:
                continue
            dets.append(
                Detection(
                    image_id=image_id,
                    category=int(c),
                    bbox=(x0, y0, x1, y1),
                    score=float(probs[q, c]),
                )
            )
    return dets
