"""Axis-aligned box arithmetic: IoU, enclosing box, GIoU and positive matching.

Boxes use corner coordinates ``(x1, y1, x2, y2)`` on a continuous plane, so the
area of a box is simply ``(x2 - x1) * (y2 - y1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MIN_EXTENT = 1e-3
DEFAULT_MATCH_THRESHOLD = 0.5


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"non-finite box coordinates: {self}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {tuple(self)}: need x2 > x1 and y2 > y1")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def contains(self, other: "BBox") -> bool:
        return self.x1 <= other.x1 and self.y1 <= other.y1 and self.x2 >= other.x2 and self.y2 >= other.y2

    def scaled(self, s: float) -> "BBox":
        return BBox(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return max(w, 0.0) * max(h, 0.0)


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    return inter / (a.area + b.area - inter)


def enclosing_box(a: BBox, b: BBox) -> BBox:
    """Smallest axis-aligned box containing both ``a`` and ``b``."""
    return BBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def giou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    hull = enclosing_box(a, b).area
    # the hull can round below the union when one equals the other
    return inter / union - max(hull - union, 0.0) / hull


# -- vectorised helpers -----------------------------------------------------

def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape [N,4] and [M,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def clamp_boxes(pred: Tensor, min_extent: float = MIN_EXTENT) -> tuple[Tensor, np.ndarray]:
    """Force ``x2 >= x1 + min_extent`` (same for y); return the flagged rows."""
    x1, y1, x2, y2 = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    flagged = (pred.data[:, 2] - pred.data[:, 0] < min_extent) | (pred.data[:, 3] - pred.data[:, 1] < min_extent)
    if not flagged.any():
        return pred, flagged
    x2 = T.maximum(x2, x1 + min_extent)
    y2 = T.maximum(y2, y1 + min_extent)
    return T.stack([x1, y1, x2, y2], axis=1), flagged


def giou_tensor(pred: Tensor, target) -> Tensor:
    """Row-wise GIoU between taped boxes ``pred`` [P,4] and ``target`` [P,4]."""
    target = T.as_tensor(target)
    px1, py1, px2, py2 = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    tx1, ty1, tx2, ty2 = target[:, 0], target[:, 1], target[:, 2], target[:, 3]
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = T.maximum(T.minimum(px2, tx2) - T.maximum(px1, tx1), 0.0)
    ih = T.maximum(T.minimum(py2, ty2) - T.maximum(py1, ty1), 0.0)
    inter = iw * ih
    union = area_p + area_t - inter
    hull = (T.maximum(px2, tx2) - T.minimum(px1, tx1)) * (T.maximum(py2, ty2) - T.minimum(py1, ty1))
    return inter / union - (hull - union) / hull


def giou_loss(pred: Tensor, target, m: float) -> tuple[Tensor, np.ndarray]:
    """``m * sum(1 - GIoU)`` over rows, after clamping degenerate predictions.

    Returns the scalar loss and the boolean rows that needed clamping.
    """
    pred, flagged = clamp_boxes(pred)
    g = giou_tensor(pred, target)
    return T.mul(T.tsum(1.0 - g), float(m)), flagged


@dataclass
class GIoUGrad:
    grad: np.ndarray
    loss: float
    clamped: bool


def giou_loss_grad(pred, gt: BBox, m: float = 50.0) -> GIoUGrad:
    """Gradient of ``m * (1 - GIoU(pred, gt))`` w.r.t. the four predicted coordinates."""
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    leaf = Tensor(p.data.reshape(1, 4), requires_grad=True)
    loss, flagged = giou_loss(leaf, gt.as_array().reshape(1, 4), m)
    loss.backward()
    return GIoUGrad(grad=leaf.grad.reshape(4), loss=loss.item(), clamped=bool(flagged.any()))


@dataclass(frozen=True)
class MatchResult:
    is_positive: bool
    iou: float
    matched_gt: Optional[int]


def match(default_box: BBox, gts: Sequence[BBox], threshold: float = DEFAULT_MATCH_THRESHOLD) -> MatchResult:
    """Positive iff the best-overlapping ground truth has IoU strictly above ``threshold``.

    Ties go to the lowest ground-truth index.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if not gts:
        return MatchResult(False, 0.0, None)
    ious = [iou(default_box, g) for g in gts]
    best = int(np.argmax(ious))
    if ious[best] > threshold:
        return MatchResult(True, ious[best], best)
    return MatchResult(False, ious[best], None)


def match_anchors(anchors: np.ndarray, gts: np.ndarray, threshold: float = DEFAULT_MATCH_THRESHOLD):
    """Vectorised :func:`match` over all default boxes.

    Returns ``(positive_mask, matched_index, best_iou)``; ``matched_index`` is
    -1 where there is no positive match.
    """
    n = len(anchors)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(gts) == 0:
        return np.zeros(n, bool), np.full(n, -1), np.zeros(n)
    ious = iou_matrix(anchors, gts)
    best = ious.argmax(axis=1)  # first index wins ties
    best_iou = ious[np.arange(n), best]
    pos = best_iou > threshold
    return pos, np.where(pos, best, -1), best_iou
