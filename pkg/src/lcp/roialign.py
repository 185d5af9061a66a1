"""RoIAlign, contextual RoIAlign and the auxiliary pruning head.

Coordinate convention: feature cell ``(i, j)`` of a map with
``spatial_scale`` s is centred at image point ``((j + 0.5) / s, (i + 0.5) / s)``,
so an image x-coordinate maps to the continuous column index ``x * s - 0.5``.
Sample points falling outside the map are clamped to the border cells.

Each output bin averages a regular ``k x k`` grid of bilinear samples
(``samples_per_bin = k * k``).  The sampling is linear in the feature values,
so it is implemented as a sparse interpolation matrix applied to the map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .boxes import DEFAULT_MATCH_THRESHOLD, BBox, enclosing_box, giou_loss, iou
from .detector import MatchTargets, ModelGraph, decode_tensor
from .seeding import rng_for
from .tensor import Tensor


class ContractError(RuntimeError):
    """An operation was called outside its documented precondition."""


@dataclass(frozen=True)
class RoISpec:
    spatial_scale: float = 1.0
    output_bins: tuple[int, int] = (3, 3)
    samples_per_bin: int = 4
    box: Optional[BBox] = None

    def __post_init__(self):
        rows, cols = self.output_bins
        if rows < 1 or cols < 1:
            raise ValueError(f"output_bins must be positive, got {self.output_bins}")
        k = math.isqrt(self.samples_per_bin)
        if k < 1 or k * k != self.samples_per_bin:
            raise ValueError(f"samples_per_bin must be a perfect square, got {self.samples_per_bin}")
        if self.spatial_scale <= 0:
            raise ValueError("spatial_scale must be positive")

    @property
    def grid(self) -> int:
        return math.isqrt(self.samples_per_bin)


def sample_points(boxes: np.ndarray, spec: RoISpec, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (row, col) index coordinates of every sample, shape [R, rows, cols, k*k].

    Raises ``ValueError`` for a box with no area inside the feature extent.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    s = spec.spatial_scale
    x1 = np.clip(boxes[:, 0] * s, 0.0, width)
    y1 = np.clip(boxes[:, 1] * s, 0.0, height)
    x2 = np.clip(boxes[:, 2] * s, 0.0, width)
    y2 = np.clip(boxes[:, 3] * s, 0.0, height)
    bad = (x2 <= x1) | (y2 <= y1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"RoI {boxes[i].tolist()} has zero area on a {height}x{width} feature map")
    # sample positions use the unclamped scaled box; only the sample points are clamped
    x1, y1, x2, y2 = boxes[:, 0] * s, boxes[:, 1] * s, boxes[:, 2] * s, boxes[:, 3] * s
    rows, cols = spec.output_bins
    k = spec.grid
    frac = (np.arange(k) + 0.5) / k
    bh = (y2 - y1) / rows
    bw = (x2 - x1) / cols
    ys = y1[:, None, None] + (np.arange(rows)[None, :, None] + frac[None, None, :]) * bh[:, None, None]  # [R,rows,k]
    xs = x1[:, None, None] + (np.arange(cols)[None, :, None] + frac[None, None, :]) * bw[:, None, None]  # [R,cols,k]
    r = len(boxes)
    yy = np.broadcast_to(ys[:, :, None, :, None], (r, rows, cols, k, k)).reshape(r, rows, cols, k * k)
    xx = np.broadcast_to(xs[:, None, :, None, :], (r, rows, cols, k, k)).reshape(r, rows, cols, k * k)
    return yy - 0.5, xx - 0.5


def interpolation_matrix(
    boxes: np.ndarray, batch_index: np.ndarray, spec: RoISpec, n: int, height: int, width: int
) -> sp.csr_matrix:
    """Sparse [R*rows*cols, n*H*W] matrix mapping flattened feature cells to bin values."""
    yy, xx = sample_points(boxes, spec, height, width)
    r, rows, cols, ss = yy.shape
    yy = np.clip(yy, 0.0, height - 1)
    xx = np.clip(xx, 0.0, width - 1)
    y0 = np.minimum(np.floor(yy), max(height - 2, 0)).astype(np.int64)
    x0 = np.minimum(np.floor(xx), max(width - 2, 0)).astype(np.int64)
    ly, lx = yy - y0, xx - x0
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    base = np.asarray(batch_index, dtype=np.int64).reshape(r, 1, 1, 1) * (height * width)
    cols_idx = np.stack([base + y0 * width + x0, base + y0 * width + x1, base + y1 * width + x0, base + y1 * width + x1], -1)
    weights = np.stack([(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx], -1) / ss
    row_idx = np.broadcast_to(np.arange(r * rows * cols).reshape(r, rows, cols, 1, 1), cols_idx.shape)
    return sp.csr_matrix(
        (weights.reshape(-1), (row_idx.reshape(-1), cols_idx.reshape(-1))), shape=(r * rows * cols, n * height * width)
    )


def roi_align_batch(feature: Tensor, boxes: np.ndarray, batch_index: np.ndarray, spec: RoISpec) -> Tensor:
    """RoIAlign of ``boxes`` [R,4] on ``feature`` [N,C,H,W]; returns [R,C,rows,cols]."""
    feature = T.as_tensor(feature)
    if feature.ndim != 4:
        raise T.ShapeError(f"expected a [N,C,H,W] feature batch, got {feature.shape}")
    n, c, h, w = feature.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    rows, cols = spec.output_bins
    mat = interpolation_matrix(boxes, batch_index, spec, n, h, w)
    flat = feature.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    out = np.asarray(mat @ flat).reshape(len(boxes), rows, cols, c).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c)
        gf = np.asarray(mat.T @ gm).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return (gf,)

    return T.apply_op(np.ascontiguousarray(out), (feature,), backward, "bilinear-sample")


def roi_align(feature: Tensor, spec: RoISpec, box: Optional[BBox] = None) -> Tensor:
    """RoIAlign of a single box on a [C,H,W] map; returns [C,rows,cols]."""
    box = box if box is not None else spec.box
    if box is None:
        raise ValueError("no RoI box given")
    feature = T.as_tensor(feature)
    if feature.ndim != 3:
        raise T.ShapeError(f"expected a [C,H,W] feature map, got {feature.shape}")
    batched = feature.reshape(1, *feature.shape)
    out = roi_align_batch(batched, box.as_array()[None], np.zeros(1, np.int64), spec)
    return out.reshape(out.shape[1:])


def contextual_roi_align(
    feature: Tensor,
    default_box: BBox,
    gt_box: BBox,
    spec: RoISpec,
    threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> Tensor:
    """``roi_align(B) + roi_align(enclosing_box(A, B))`` for a positive default box B."""
    if not iou(default_box, gt_box) > threshold:
        raise ContractError("contextual RoIAlign is only defined for positive default boxes")
    hull = enclosing_box(gt_box, default_box)
    return roi_align(feature, spec, default_box) + roi_align(feature, spec, hull)


def contextual_roi_align_batch(feature: Tensor, positives: "Positives", spec: RoISpec) -> Tensor:
    hull = np.concatenate(
        [np.minimum(positives.default[:, :2], positives.gt[:, :2]), np.maximum(positives.default[:, 2:], positives.gt[:, 2:])],
        axis=1,
    )
    return roi_align_batch(feature, positives.default, positives.batch_index, spec) + roi_align_batch(
        feature, hull, positives.batch_index, spec
    )


# -- auxiliary network ------------------------------------------------------

@dataclass
class Positives:
    """Matched (default box, ground truth) pairs of a batch."""

    batch_index: np.ndarray  # [P]
    default: np.ndarray  # [P,4]
    gt: np.ndarray  # [P,4]
    labels: np.ndarray  # [P]

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_targets(cls, model: ModelGraph, targets: MatchTargets) -> "Positives":
        img, anchor = np.nonzero(targets.positives)
        boxes = model.default_boxes().boxes
        return cls(img, boxes[anchor], targets.gt_boxes[img, anchor], targets.labels[img, anchor])

    @classmethod
    def from_pairs(cls, pairs) -> "Positives":
        """Build from ``(default_box, gt_box, label)`` tuples on image 0."""
        pairs = list(pairs)
        return cls(
            np.zeros(len(pairs), np.int64),
            np.array([p[0].as_array() for p in pairs]).reshape(-1, 4),
            np.array([p[1].as_array() for p in pairs]).reshape(-1, 4),
            np.array([p[2] for p in pairs], dtype=np.int64),
        )

    def doubled(self) -> "Positives":
        return Positives(*(np.concatenate([a, a]) for a in (self.batch_index, self.default, self.gt, self.labels)))


class AuxHead:
    """Pool+linear classification path and linear box-refinement path over contextual RoI features."""

    def __init__(self, channels: int, num_classes: int, spec: RoISpec, seed: int = 0, purpose: str = "aux"):
        rng = rng_for(seed, purpose)
        rows, cols = spec.output_bins
        self.spec = spec
        self.num_classes = num_classes
        self.cls_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(channels), size=(num_classes, channels)))
        self.cls_b = Tensor(np.zeros(num_classes))
        self.box_w = Tensor(rng.normal(0.0, 0.01 / math.sqrt(channels * rows * cols), size=(4, channels * rows * cols)))
        self.box_b = Tensor(np.zeros(4))

    def parameters(self) -> list[Tensor]:
        return [self.cls_w, self.cls_b, self.box_w, self.box_b]

    def __call__(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        p = pooled.shape[0]
        logits = T.linear(T.avg_pool(pooled), self.cls_w, self.cls_b)
        offsets = T.linear(pooled.reshape(p, -1), self.box_w, self.box_b)
        return logits, offsets


@dataclass
class AuxLosses:
    l_ac: Tensor
    l_ar: Tensor
    l_a: Tensor
    num_positive: int
    clamped: int = 0

    @property
    def fallback(self) -> bool:
        """No positives: score this batch by reconstruction alone."""
        return self.num_positive == 0


def box_centers(boxes: np.ndarray) -> np.ndarray:
    w, h = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    return np.stack([boxes[:, 0] + w / 2, boxes[:, 1] + h / 2, w, h], axis=1)


def aux_losses(features: Tensor, positives: Positives, head: AuxHead, m: float = 50.0) -> AuxLosses:
    """Classification (sum of cross entropies) and ``m * sum(1 - GIoU)`` losses of the aux head.

    ``features`` is the [N,C,H,W] map the head is attached to; the head's
    RoISpec carries its spatial scale.
    """
    if m <= 0:
        raise ValueError("m must be positive")
    if len(positives) == 0:
        zero = Tensor(0.0)
        return AuxLosses(zero, zero, zero, 0)
    return aux_losses_pooled(contextual_roi_align_batch(features, positives, head.spec), positives, head, m)


def aux_losses_pooled(pooled: Tensor, positives: Positives, head: AuxHead, m: float = 50.0) -> AuxLosses:
    """:func:`aux_losses` from already pooled contextual RoI features [P,C,rows,cols]."""
    logits, offsets = head(pooled)
    l_ac = T.tsum(T.softmax_cross_entropy(logits, positives.labels))
    pred = decode_tensor(offsets, box_centers(positives.default))
    l_ar, flagged = giou_loss(pred, positives.gt, m)
    return AuxLosses(l_ac, l_ar, l_ac + l_ar, len(positives), int(flagged.sum()))
