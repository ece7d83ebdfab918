"""Region proposal branch: anchors, objectness/delta head, proposal decoding
and anchor-to-ground-truth target assignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import clip_boxes, decode_deltas, encode_deltas, iou_matrix, nms
from .tensor import ConvParams, conv2d, conv2d_backward, relu, relu_backward, softmax


@dataclass
class AnchorConfig:
    """Anchor menu: every grid cell carries |scales| x |ratios| boxes.

    A (scale, ratio) anchor has area (scale * base_stride)^2 and aspect
    ratio h/w = ratio, centered on the cell's image-space center.  Scales
    whose boxes cannot fit inside the training images are never labelled,
    so the default menu stays within the face sizes the toy task uses.
    """

    base_stride: int = 16
    scales: tuple = (1.0, 2.0, 4.0)
    ratios: tuple = (1.0, 1.3)

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class Proposal:
    box: np.ndarray
    objectness: float


def generate_anchors(feat_h: int, feat_w: int, cfg: AnchorConfig) -> np.ndarray:
    """All anchors for a feature grid, shape (feat_h * feat_w * k, 4).

    Enumeration order is row-major over cells, then ratios, then scales;
    anchors may extend beyond the image (clipping happens downstream).
    """
    shapes = []
    for ratio in cfg.ratios:
        for scale in cfg.scales:
            side = scale * cfg.base_stride
            w = side / np.sqrt(ratio)
            h = side * np.sqrt(ratio)
            shapes.append((w, h))
    shapes = np.asarray(shapes)  # (k, 2)
    ys = (np.arange(feat_h) + 0.5) * cfg.base_stride
    xs = (np.arange(feat_w) + 0.5) * cfg.base_stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (cells, 2) as (x, y)
    half = 0.5 * shapes
    boxes = np.empty((centers.shape[0], shapes.shape[0], 4))
    boxes[:, :, 0] = centers[:, None, 0] - half[None, :, 0]
    boxes[:, :, 1] = centers[:, None, 1] - half[None, :, 1]
    boxes[:, :, 2] = centers[:, None, 0] + half[None, :, 0]
    boxes[:, :, 3] = centers[:, None, 1] + half[None, :, 1]
    return boxes.reshape(-1, 4)


@dataclass
class RpnHead:
    """3x3 conv + ReLU trunk with sibling 1x1 objectness and delta convs."""

    conv: ConvParams
    cls: ConvParams
    bbox: ConvParams


def rpn_forward(fused_map: np.ndarray, head: RpnHead):
    """Dense per-anchor objectness logits (N, 2k, H, W) and deltas (N, 4k, H, W)."""
    t, c1 = conv2d(fused_map, head.conv)
    a, c2 = relu(t)
    logits, c3 = conv2d(a, head.cls)
    deltas, c4 = conv2d(a, head.bbox)
    return (logits, deltas), (c1, c2, c3, c4)


def rpn_backward(dlogits: np.ndarray, ddeltas: np.ndarray, cache) -> np.ndarray:
    c1, c2, c3, c4 = cache
    da = conv2d_backward(dlogits, c3) + conv2d_backward(ddeltas, c4)
    dt = relu_backward(da, c2)
    return conv2d_backward(dt, c1)


def flatten_rpn_outputs(logits: np.ndarray, deltas: np.ndarray, k: int):
    """Map head outputs to per-anchor rows matching the anchor enumeration.

    Channel layout groups the 2 (or 4) values of each of the k per-cell
    anchors together: channel block a covers anchor index a within a cell.
    """
    _, c2, h, w = logits.shape
    assert c2 == 2 * k and deltas.shape[1] == 4 * k
    lg = logits[0].reshape(k, 2, h, w).transpose(2, 3, 0, 1).reshape(-1, 2)
    dl = deltas[0].reshape(k, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    return lg, dl


def unflatten_rpn_grads(dlg: np.ndarray, ddl: np.ndarray, k: int, h: int, w: int):
    dlogits = dlg.reshape(h, w, k, 2).transpose(2, 3, 0, 1).reshape(1, 2 * k, h, w)
    ddeltas = ddl.reshape(h, w, k, 4).transpose(2, 3, 0, 1).reshape(1, 4 * k, h, w)
    return dlogits, ddeltas


def propose(
    logits: np.ndarray,
    deltas: np.ndarray,
    anchors: np.ndarray,
    img_w: float,
    img_h: float,
    pre_nms_top_n: int = 2000,
    post_nms_top_n: int = 300,
    nms_thresh: float = 0.7,
    min_size: float = 4.0,
    k: int | None = None,
):
    """Turn dense head outputs into a scored, NMS-filtered proposal list.

    Score ties fall back to anchor enumeration order, so the output is a
    pure function of its inputs.
    """
    if logits.ndim == 4:
        if k is None:
            k = logits.shape[1] // 2
        lg, dl = flatten_rpn_outputs(logits, deltas, k)
    else:
        lg, dl = logits, deltas
    scores = softmax(lg)[:, 1]
    boxes = decode_deltas(dl, anchors)
    boxes, keep = clip_boxes(boxes, img_w, img_h)
    keep &= (boxes[:, 2] - boxes[:, 0] >= min_size) & (boxes[:, 3] - boxes[:, 1] >= min_size)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return []
    order = idx[np.argsort(-scores[idx], kind="stable")][:pre_nms_top_n]
    kept = nms(boxes[order], scores[order], nms_thresh)[:post_nms_top_n]
    return [Proposal(box=boxes[order[i]].copy(), objectness=float(scores[order[i]])) for i in kept]


@dataclass
class RpnTargets:
    """Per-anchor labels (1 positive / 0 negative / -1 ignore) and positive deltas."""

    labels: np.ndarray  # (A,)
    target_deltas: np.ndarray  # (A, 4), rows meaningful where labels == 1
    n_pos: int = 0
    n_neg: int = 0


class TargetAssignmentError(RuntimeError):
    pass


@dataclass
class RpnTrainConfig:
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    batch_size: int = 256
    max_positives: int = 128  # half the minibatch


def assign_rpn_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    rng: np.random.Generator,
    img_w: float,
    img_h: float,
    cfg: RpnTrainConfig = RpnTrainConfig(),
) -> RpnTargets:
    """Label anchors for training.

    Anchors crossing the image boundary are ignored.  An inside anchor is
    positive when its best IoU reaches ``pos_iou`` or when it is the best
    anchor of some ground-truth box; negative when its best IoU is at most
    ``neg_iou``.  The labelled set is subsampled to the minibatch size with
    positives capped at half.
    """
    a = anchors.shape[0]
    labels = np.full(a, -1, dtype=np.int64)
    target_deltas = np.zeros((a, 4))
    inside = np.flatnonzero(
        (anchors[:, 0] >= 0.0)
        & (anchors[:, 1] >= 0.0)
        & (anchors[:, 2] <= img_w)
        & (anchors[:, 3] <= img_h)
    )
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if inside.size == 0:
        raise TargetAssignmentError("no anchors lie inside the image")

    if gt_boxes.shape[0] == 0:
        labels[inside] = 0
    else:
        ious = iou_matrix(anchors[inside], gt_boxes)  # (I, G)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(inside.size), best_gt]
        labels[inside[best_iou <= cfg.neg_iou]] = 0
        labels[inside[best_iou >= cfg.pos_iou]] = 1
        # the best anchor of each ground-truth box is positive regardless
        per_gt_best = ious.max(axis=0)
        for g in range(gt_boxes.shape[0]):
            if per_gt_best[g] > 0.0:
                labels[inside[ious[:, g] == per_gt_best[g]]] = 1
        pos = np.flatnonzero(labels == 1)
        if pos.size:
            pos_inside = np.searchsorted(inside, pos)
            match = best_gt[pos_inside]
            target_deltas[pos] = encode_deltas(gt_boxes[match], anchors[pos])

    pos = np.flatnonzero(labels == 1)
    if pos.size > cfg.max_positives:
        drop = rng.choice(pos, size=pos.size - cfg.max_positives, replace=False)
        labels[drop] = -1
        pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    room = cfg.batch_size - pos.size
    if neg.size > room:
        drop = rng.choice(neg, size=neg.size - room, replace=False)
        labels[drop] = -1
        neg = np.flatnonzero(labels == 0)
    if pos.size == 0 and neg.size == 0:
        raise TargetAssignmentError("no positive or negative anchors could be sampled")
    return RpnTargets(labels=labels, target_deltas=target_deltas, n_pos=int(pos.size), n_neg=int(neg.size))
