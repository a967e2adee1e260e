"""Box geometry in (x1, y1, x2, y2) pixel coordinates."""
from __future__ import annotations

import math

import numpy as np

# log(1000 / 16): the usual clamp on width/height deltas before exp()
DELTA_CLAMP = math.log(1000.0 / 16)


class DegenerateBoxError(ValueError):
    pass


def _check(boxes: np.ndarray) -> None:
    if np.any(boxes[..., 2] <= boxes[..., 0]) or np.any(boxes[..., 3] <= boxes[..., 1]):
        raise DegenerateBoxError("boxes must satisfy x2 > x1 and y2 > y1")


def area(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def iou(a, b) -> float:
    """IoU of two boxes; 0 when disjoint."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a)
    _check(b)
    return float(iou_matrix(a[None], b[None])[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def xyxy_to_xywh(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0], b[:, 1], b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], axis=1)


def xywh_to_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]], axis=1)


def clip_boxes(boxes, height: int, width: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).copy()
    b[..., 0::2] = np.clip(b[..., 0::2], 0, width)
    b[..., 1::2] = np.clip(b[..., 1::2], 0, height)
    return b


def encode(reference, target) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) taking ``reference`` boxes onto ``target`` boxes."""
    r = np.asarray(reference, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    rw, rh = r[:, 2] - r[:, 0], r[:, 3] - r[:, 1]
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    rx, ry = r[:, 0] + 0.5 * rw, r[:, 1] + 0.5 * rh
    tx, ty = t[:, 0] + 0.5 * tw, t[:, 1] + 0.5 * th
    return np.stack([(tx - rx) / rw, (ty - ry) / rh, np.log(tw / rw), np.log(th / rh)], axis=1)


def decode(reference, deltas) -> np.ndarray:
    r = np.asarray(reference, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    rw, rh = r[:, 2] - r[:, 0], r[:, 3] - r[:, 1]
    rx, ry = r[:, 0] + 0.5 * rw, r[:, 1] + 0.5 * rh
    cx, cy = rx + d[:, 0] * rw, ry + d[:, 1] * rh
    w = rw * np.exp(np.minimum(d[:, 2], DELTA_CLAMP))
    h = rh * np.exp(np.minimum(d[:, 3], DELTA_CLAMP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score (ties by index)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] >= iou_threshold
    return np.array(keep, dtype=np.int64)


def batched_nms(boxes, scores, classes, iou_threshold: float) -> np.ndarray:
    """Per-class NMS; result sorted by descending score."""
    classes = np.asarray(classes)
    keep = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        keep.extend(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    keep = np.array(sorted(keep), dtype=np.int64)
    if len(keep) == 0:
        return keep
    return keep[np.argsort(-np.asarray(scores)[keep], kind="stable")]
