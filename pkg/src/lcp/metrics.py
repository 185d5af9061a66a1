"""Detection metrics: VOC07 11-point AP, continuous AP, COCO-style averages.

Detections of a class are ranked by descending score across the whole
dataset; equal scores keep their insertion (box index) order.  Each
detection is greedily matched to the highest-IoU ground truth of its image,
and a ground truth can be claimed only once.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .boxes import iou_matrix
from .data import Sample
from .detector import Detections, ModelGraph, predict
from .data import stack_images

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class ImageDets:
    """Scored boxes of a single class in one image."""

    boxes: np.ndarray
    scores: np.ndarray


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray, metric: str) -> float:
    if metric == "voc07":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            ok = recall >= t - 1e-12
            ap += precision[ok].max() if ok.any() else 0.0
        return ap / 11.0
    if metric == "continuous":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        step = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))
    raise ValueError(f"unknown metric {metric!r}")


def average_precision(
    dets: Sequence[ImageDets],
    gts: Sequence[np.ndarray],
    iou_thresh: float = 0.5,
    metric: str = "voc07",
    gt_ignore: Optional[Sequence[np.ndarray]] = None,
    det_ignore: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """AP of one class.

    ``dets[i]`` and ``gts[i]`` belong to image ``i``.  Optional ignore flags
    implement size-bucketed evaluation: a detection claiming an ignored ground
    truth, or an unmatched detection flagged in ``det_ignore``, counts as
    neither true nor false positive.  Returns NaN when there is no
    (non-ignored) ground truth.
    """
    n_gt = 0
    for i, g in enumerate(gts):
        n_gt += len(g) if gt_ignore is None else int((~gt_ignore[i]).sum())
    if n_gt == 0:
        return float("nan")

    img_idx, scores, boxes, dign = [], [], [], []
    for i, d in enumerate(dets):
        k = len(d.scores)
        img_idx.append(np.full(k, i))
        scores.append(np.asarray(d.scores, dtype=np.float64))
        boxes.append(np.asarray(d.boxes, dtype=np.float64).reshape(-1, 4))
        dign.append(np.zeros(k, bool) if det_ignore is None else np.asarray(det_ignore[i], bool))
    if not img_idx or sum(len(s) for s in scores) == 0:
        return 0.0
    img_idx = np.concatenate(img_idx)
    scores = np.concatenate(scores)
    boxes = np.concatenate(boxes)
    dign = np.concatenate(dign)
    order = np.lexsort((np.arange(len(scores)), -scores))

    claimed = [np.zeros(len(g), bool) for g in gts]
    tp, fp = [], []
    for d in order:
        i = img_idx[d]
        g = np.asarray(gts[i], dtype=np.float64).reshape(-1, 4)
        ign = np.zeros(len(g), bool) if gt_ignore is None else np.asarray(gt_ignore[i], bool)
        if len(g):
            ov = iou_matrix(boxes[d], g)[0]
            j = int(np.argmax(ov))
            best = ov[j]
        else:
            best, j = 0.0, -1
        if best >= iou_thresh:
            if ign[j]:
                continue
            if not claimed[i][j]:
                claimed[i][j] = True
                tp.append(1.0)
                fp.append(0.0)
            else:
                tp.append(0.0)
                fp.append(1.0)
        else:
            if dign[d]:
                continue
            tp.append(0.0)
            fp.append(1.0)
    if not tp:
        return 0.0
    tp, fp = np.cumsum(tp), np.cumsum(fp)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return float(_interpolated_ap(recall, precision, metric))


@dataclass
class EvalResult:
    per_class_ap: dict
    map: float
    ap50: float
    ap75: float
    ap_coco: float
    size_ap: dict
    size_cutoffs: list
    metric: str = "voc07"
    num_images: int = 0

    def to_record(self) -> dict:
        rec = {"type": "eval"}
        rec.update(asdict(self))
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))

    def table(self) -> str:
        rows = [("class", "AP@0.5")]
        rows += [(str(k), f"{v:.4f}") for k, v in self.per_class_ap.items()]
        rows += [
            ("mAP@0.5", f"{self.map:.4f}"),
            ("AP@0.75", f"{self.ap75:.4f}"),
            ("AP@[.5:.95]", f"{self.ap_coco:.4f}"),
        ]
        rows += [(f"AP_{k}", f"{v:.4f}") for k, v in self.size_ap.items()]
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{w}}  {b:>8}" for a, b in rows)


def _nanmean(values) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else 0.0


def _class_split(detections: Sequence[Detections], samples: Sequence[Sample], cls: int):
    dets = [ImageDets(d.boxes[d.labels == cls], d.scores[d.labels == cls]) for d in detections]
    gts = [s.box_array()[np.asarray(s.labels, dtype=np.int64) == cls] for s in samples]
    return dets, gts


def mean_ap(detections, samples, num_classes, iou_thresh=0.5, metric="voc07", size_range=None) -> tuple[float, dict]:
    """Mean over classes that have ground truth; returns (mAP, per-class dict)."""
    per = {}
    for c in range(1, num_classes):
        dets, gts = _class_split(detections, samples, c)
        gi = di = None
        if size_range is not None:
            lo, hi = size_range
            gi = [~((_areas(g) >= lo) & (_areas(g) < hi)) for g in gts]
            di = [~((_areas(d.boxes) >= lo) & (_areas(d.boxes) < hi)) for d in dets]
        per[c] = average_precision(dets, gts, iou_thresh, metric, gi, di)
    return _nanmean(per.values()), per


def _areas(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b).reshape(-1, 4)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def size_cutoffs(samples: Sequence[Sample]) -> list[float]:
    """Area terciles of all ground-truth boxes in ``samples``."""
    areas = np.concatenate([_areas(s.box_array()) for s in samples])
    return [float(v) for v in np.quantile(areas, [1 / 3, 2 / 3])]


def evaluate_detections(
    detections: Sequence[Detections], samples: Sequence[Sample], num_classes: int, metric: str = "voc07"
) -> EvalResult:
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    m50, per = mean_ap(detections, samples, num_classes, 0.5, metric)
    by_t = {t: (m50 if t == 0.5 else mean_ap(detections, samples, num_classes, t, metric)[0]) for t in COCO_THRESHOLDS}
    cuts = size_cutoffs(samples)
    bounds = {"small": (0.0, cuts[0]), "medium": (cuts[0], cuts[1]), "large": (cuts[1], np.inf)}
    size_ap = {k: mean_ap(detections, samples, num_classes, 0.5, metric, r)[0] for k, r in bounds.items()}
    return EvalResult(
        per_class_ap={int(k): (None if np.isnan(v) else float(v)) for k, v in per.items()},
        map=float(m50),
        ap50=float(m50),
        ap75=float(by_t[0.75]),
        ap_coco=float(np.mean(list(by_t.values()))),
        size_ap={k: float(v) for k, v in size_ap.items()},
        size_cutoffs=cuts,
        metric=metric,
        num_images=len(samples),
    )


def evaluate(model: ModelGraph, dataset: Sequence[Sample], metric: str = "voc07") -> EvalResult:
    """Forward + NMS over ``dataset`` and every :class:`EvalResult` field."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    detections = predict(model, stack_images(list(dataset)))
    return evaluate_detections(detections, dataset, model.num_classes, metric)
