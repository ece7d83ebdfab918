"""Axis-aligned box arithmetic: IoU, delta coding, clipping, NMS, grid projection.

Boxes are float arrays ``[x1, y1, x2, y2]`` in continuous pixel coordinates
with ``x2 > x1`` and ``y2 > y1``; width is ``x2 - x1`` (no +1).  Most
functions accept either a single box of shape (4,) or a stack (N, 4).
"""

from __future__ import annotations

import math

import numpy as np

# exp() of regression widths is clamped to this, keeping decode finite
LOG_SIZE_CLAMP = math.log(1000.0)


def box_area(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return float(inter / (box_area(a) + box_area(b) - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box stacks."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union


def _centers(b: np.ndarray):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    cx = b[..., 0] + 0.5 * w
    cy = b[..., 1] + 0.5 * h
    return cx, cy, w, h


def encode_deltas(target: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Regression offsets (tx, ty, tw, th) that map ``anchor`` onto ``target``."""
    target = np.asarray(target, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    cxt, cyt, wt, ht = _centers(target)
    cxa, cya, wa, ha = _centers(anchor)
    return np.stack(
        [(cxt - cxa) / wa, (cyt - cya) / ha, np.log(wt / wa), np.log(ht / ha)], axis=-1
    )


def decode_deltas(deltas: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_deltas`; size offsets clamped before exp."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    cxa, cya, wa, ha = _centers(anchor)
    cx = deltas[..., 0] * wa + cxa
    cy = deltas[..., 1] * ha + cya
    w = wa * np.exp(np.minimum(deltas[..., 2], LOG_SIZE_CLAMP))
    h = ha * np.exp(np.minimum(deltas[..., 3], LOG_SIZE_CLAMP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def clip_box(b: np.ndarray, img_w: float, img_h: float):
    """Clamp a box to the image; returns None if the clamped box is thinner than 1 px."""
    x1 = min(max(float(b[0]), 0.0), img_w)
    y1 = min(max(float(b[1]), 0.0), img_h)
    x2 = min(max(float(b[2]), 0.0), img_w)
    y2 = min(max(float(b[3]), 0.0), img_h)
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return None
    return np.array([x1, y1, x2, y2])


def clip_boxes(boxes: np.ndarray, img_w: float, img_h: float):
    """Vectorized clamp; returns (clipped, keep-mask) with the <1 px rule applied."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, img_w)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, img_h)
    keep = (out[:, 2] - out[:, 0] >= 1.0) & (out[:, 3] - out[:, 1] >= 1.0)
    return out, keep


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited in descending score order (score ties broken by the
    original index); a box is suppressed iff its IoU with an already kept
    box exceeds ``iou_threshold``.  Returns kept indices in visit order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep: list[int] = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        ix = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        iy = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= iou_threshold]
    return keep


def project_roi(b: np.ndarray, stride: int):
    """Project an image-space box onto a feature grid of the given stride.

    Returns integer cell bounds (x1, y1, x2, y2) with floor/ceil rounding;
    each side is forced to cover at least one cell so that arbitrarily small
    boxes still map to a usable region.
    """
    x1 = int(np.floor(b[0] / stride))
    y1 = int(np.floor(b[1] / stride))
    x2 = int(np.ceil(b[2] / stride))
    y2 = int(np.ceil(b[3] / stride))
    if x2 <= x1:
        x2 = x1 + 1
    if y2 <= y1:
        y2 = y1 + 1
    return x1, y1, x2, y2
