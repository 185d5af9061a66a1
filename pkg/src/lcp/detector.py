"""Toy single-shot detector.

Six 3x3 conv+ReLU layers (16-32-32-64-64-64, stride 2 at layers 1 and 3)
turn a 3x64x64 image into a 64x16x16 map; one 3x3 head conv predicts, for
each of the six default boxes per cell, ``num_classes`` logits and four box
offsets.  Backbone channels can be masked; a masked channel is zeroed after
its ReLU, so it contributes nothing downstream.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import DEFAULT_MATCH_THRESHOLD, giou_loss, match_anchors
from .data import FormatError, Sample, stack_images
from .seeding import rng_for
from .tensor import Tensor

logger = logging.getLogger(__name__)

BACKBONE = ((3, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2), (64, 64, 1), (64, 64, 1))
NUM_CLASSES = 5  # background + 4 shapes
IMAGE_SIZE = 64
ANCHOR_SCALES = (12.0, 18.0, 26.0)
ANCHOR_RATIOS = (2.0 / 3.0, 1.5)
VARIANCES = (0.1, 0.2)
NEG_POS_RATIO = 3

CKPT_MAGIC = b"LCPM"
CKPT_VERSION = 1
_KIND_TAGS = {("conv", 1): 1, ("conv", 2): 2, ("head", 1): 3}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


class NumericalError(RuntimeError):
    """Loss or gradient became non-finite.  ``checkpoint`` names the last good state, if saved."""

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message if checkpoint is None else f"{message}; last good checkpoint: {checkpoint}")
        self.checkpoint = checkpoint


@dataclass
class Layer:
    kind: str  # "conv" or "head"
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 1

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class DefaultBoxSet:
    boxes: np.ndarray  # [B,4] corner form, clipped to the image
    centers: np.ndarray  # [B,4] (cx, cy, w, h) of the clipped boxes
    owner_head: int = 0

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class DetectionOutput:
    class_logits: Tensor  # [N, B, num_classes]
    box_offsets: Tensor  # [N, B, 4]


@dataclass
class FeatureMaps:
    pre: list  # conv outputs before ReLU, per backbone layer
    post: list  # masked ReLU outputs, per backbone layer


@dataclass
class ModelGraph:
    layers: list[Layer]
    masks: list[Optional[np.ndarray]]
    num_classes: int = NUM_CLASSES
    image_size: int = IMAGE_SIZE
    anchor_scales: tuple = ANCHOR_SCALES
    anchor_ratios: tuple = ANCHOR_RATIOS
    _anchors: Optional[DefaultBoxSet] = field(default=None, repr=False, compare=False)

    @property
    def backbone(self) -> list[Layer]:
        return [l for l in self.layers if l.kind == "conv"]

    @property
    def head(self) -> Layer:
        return self.layers[-1]

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def default_boxes(self) -> DefaultBoxSet:
        if self._anchors is None:
            stride = int(np.prod([l.stride for l in self.backbone]))
            self._anchors = make_default_boxes(
                self.image_size // stride, stride, self.image_size, self.anchor_scales, self.anchor_ratios
            )
        return self._anchors

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def parameters(self) -> list[Tensor]:
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def set_mask(self, layer: int, retained: Optional[Sequence[int]]) -> None:
        """Retain only ``retained`` output channels of backbone ``layer``.

        Dropped channels get zeroed filters and biases, and the next layer's
        filter slices consuming them are zeroed too.
        """
        if retained is None:
            self.masks[layer] = None
            return
        keep = np.asarray(sorted(retained), dtype=np.int64)
        self.masks[layer] = keep
        self.enforce_masks()

    def enforce_masks(self) -> None:
        for l, keep in enumerate(self.masks):
            if keep is None:
                continue
            drop = np.setdiff1d(np.arange(self.layers[l].out_channels), keep)
            self.layers[l].weight.data[drop] = 0.0
            self.layers[l].bias.data[drop] = 0.0
            self.layers[l + 1].weight.data[:, drop] = 0.0

    def channel_gate(self, layer: int) -> Optional[np.ndarray]:
        keep = self.masks[layer]
        if keep is None:
            return None
        gate = np.zeros(self.layers[layer].out_channels)
        gate[keep] = 1.0
        return gate[None, :, None, None]


def make_default_boxes(fmap: int, stride: int, image_size: int, scales, ratios) -> DefaultBoxSet:
    """Default boxes ordered (row, col, scale, ratio), clipped to the image."""
    boxes = []
    for i in range(fmap):
        for j in range(fmap):
            cx, cy = (j + 0.5) * stride, (i + 0.5) * stride
            for s in scales:
                for r in ratios:
                    w, h = s * math.sqrt(r), s / math.sqrt(r)
                    boxes.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    b = np.clip(np.array(boxes), 0.0, float(image_size))
    centers = np.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2, b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], 1)
    return DefaultBoxSet(boxes=b, centers=centers)


def build_model(seed: int = 0, num_classes: int = NUM_CLASSES, backbone=BACKBONE) -> ModelGraph:
    """He-initialised detector; weights depend only on ``seed``."""
    rng = rng_for(seed, "model-init")
    layers = []
    for cin, cout, stride in backbone:
        w = rng.normal(0.0, math.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
        layers.append(Layer("conv", Tensor(w), Tensor(np.zeros(cout)), stride, 1))
    cin = backbone[-1][1]
    a = len(ANCHOR_SCALES) * len(ANCHOR_RATIOS)
    cout = a * (num_classes + 4)
    w = rng.normal(0.0, 0.01, size=(cout, cin, 3, 3))
    b = np.zeros((a, num_classes + 4))
    b[:, 0] = math.log(num_classes * 10.0)  # background prior
    layers.append(Layer("head", Tensor(w), Tensor(b.reshape(-1)), 1, 1))
    return ModelGraph(layers=layers, masks=[None] * len(backbone), num_classes=num_classes)


# -- forward ----------------------------------------------------------------

def _as_batch(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def forward(model: ModelGraph, images, upto: Optional[int] = None):
    """Run the detector on an image batch [N,3,H,W].

    Returns ``(DetectionOutput, FeatureMaps)``.  With ``upto=l`` the pass stops
    after backbone layer ``l`` and the detection output is ``None``.
    """
    x = _as_batch(images)
    if x.ndim != 4 or x.shape[1] != model.layers[0].in_channels or x.shape[2:] != (model.image_size,) * 2:
        raise T.ShapeError(
            f"image batch {x.shape} does not match model input [N,{model.layers[0].in_channels},"
            f"{model.image_size},{model.image_size}]"
        )
    pre, post = [], []
    for l, layer in enumerate(model.backbone):
        z = T.conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)
        x = T.relu(z)
        gate = model.channel_gate(l)
        if gate is not None:
            x = x * gate
        pre.append(z)
        post.append(x)
        if upto is not None and l >= upto:
            return None, FeatureMaps(pre, post)
    head = model.head
    h = T.conv2d(x, head.weight, head.bias, head.stride, head.padding)
    n, _, fh, fw = h.shape
    a, k = model.anchors_per_cell, model.num_classes + 4
    h = T.transpose(h, (0, 2, 3, 1)).reshape(n, fh * fw * a, k)
    logits = h[:, :, : model.num_classes]
    offsets = h[:, :, model.num_classes :]
    return DetectionOutput(logits, offsets), FeatureMaps(pre, post)


# -- box coding -------------------------------------------------------------

def encode(boxes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Offsets that decode ``centers`` (cx,cy,w,h) default boxes into corner ``boxes``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gw, gh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    gcx, gcy = boxes[:, 0] + gw / 2, boxes[:, 1] + gh / 2
    v0, v1 = VARIANCES
    return np.stack(
        [
            (gcx - centers[:, 0]) / (centers[:, 2] * v0),
            (gcy - centers[:, 1]) / (centers[:, 3] * v0),
            np.log(gw / centers[:, 2]) / v1,
            np.log(gh / centers[:, 3]) / v1,
        ],
        axis=1,
    )


def decode(offsets: np.ndarray, centers: np.ndarray) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    v0, v1 = VARIANCES
    cx = centers[:, 0] + offsets[:, 0] * v0 * centers[:, 2]
    cy = centers[:, 1] + offsets[:, 1] * v0 * centers[:, 3]
    w = centers[:, 2] * np.exp(offsets[:, 2] * v1)
    h = centers[:, 3] * np.exp(offsets[:, 3] * v1)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def decode_tensor(offsets: Tensor, centers: np.ndarray) -> Tensor:
    """Taped version of :func:`decode`."""
    v0, v1 = VARIANCES
    cx = offsets[:, 0] * (v0 * centers[:, 2]) + centers[:, 0]
    cy = offsets[:, 1] * (v0 * centers[:, 3]) + centers[:, 1]
    hw = T.exp(offsets[:, 2] * v1) * (centers[:, 2] / 2)
    hh = T.exp(offsets[:, 3] * v1) * (centers[:, 3] / 2)
    return T.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)


# -- losses -----------------------------------------------------------------

@dataclass
class MatchTargets:
    labels: np.ndarray  # [N,B] class per default box, 0 = background
    gt_boxes: np.ndarray  # [N,B,4] matched box (zeros where negative)

    @property
    def positives(self) -> np.ndarray:
        return self.labels > 0

    @property
    def num_positive(self) -> int:
        return int(self.positives.sum())


def match_targets(model: ModelGraph, samples: Sequence[Sample], threshold: float = DEFAULT_MATCH_THRESHOLD) -> MatchTargets:
    anchors = model.default_boxes()
    n, b = len(samples), len(anchors)
    labels = np.zeros((n, b), dtype=np.int64)
    gt = np.zeros((n, b, 4))
    for i, s in enumerate(samples):
        boxes = s.box_array()
        pos, idx, _ = match_anchors(anchors.boxes, boxes, threshold)
        if pos.any():
            labels[i, pos] = np.asarray(s.labels)[idx[pos]]
            gt[i, pos] = boxes[idx[pos]]
    return MatchTargets(labels, gt)


def mine_negatives(ce: np.ndarray, labels: np.ndarray, ratio: int = NEG_POS_RATIO) -> np.ndarray:
    """Select per image the ``ratio * max(1, n_pos)`` highest-loss negatives.

    Ties favour the lower default-box index.
    """
    chosen = labels > 0
    for i in range(labels.shape[0]):
        neg = np.flatnonzero(labels[i] == 0)
        k = min(len(neg), ratio * max(1, int((labels[i] > 0).sum())))
        order = np.argsort(-ce[i, neg], kind="stable")[:k]
        chosen[i, neg[order]] = True
    return chosen


def detection_loss(
    output: DetectionOutput, targets: MatchTargets, centers: np.ndarray, m: float = 50.0
) -> tuple[Tensor, Tensor]:
    """Classification and GIoU regression losses of the detector.

    ``L_c`` sums softmax cross entropy over positives and hard-mined
    negatives; ``L_r = m * sum(1 - GIoU)`` over positives.
    """
    n, b, c = output.class_logits.shape
    ce = T.softmax_cross_entropy(output.class_logits.reshape(n * b, c), targets.labels.reshape(-1))
    chosen = np.flatnonzero(mine_negatives(ce.data.reshape(n, b), targets.labels).reshape(-1))
    l_c = T.tsum(ce[chosen])
    pos = np.flatnonzero(targets.positives.reshape(-1))
    if len(pos) == 0:
        return l_c, Tensor(0.0)
    offsets = output.box_offsets.reshape(n * b, 4)[pos]
    pred = decode_tensor(offsets, np.tile(centers, (n, 1))[pos])
    l_r, _ = giou_loss(pred, targets.gt_boxes.reshape(-1, 4)[pos], m)
    return l_c, l_r


# -- training ---------------------------------------------------------------

class SGD:
    """SGD with optional momentum; the first step is exactly ``w - lr * g``."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [None] * len(self.params)

    def step(self, scale: float = 1.0) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = g if self._velocity[i] is None else self.momentum * self._velocity[i] + g
                self._velocity[i] = v
                g = v
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction; used where feature scales vary too much for one SGD rate."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self, scale: float = 1.0) -> None:
        self._t += 1
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            m_hat = self._m[i] / (1 - b1**self._t)
            v_hat = self._v[i] / (1 - b2**self._t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def step_schedule(base_lr: float, epochs: int, milestones: Sequence[float] = (0.5,), factor: float = 0.1):
    """Piecewise-constant schedule dropping by ``factor`` at fractions of ``epochs``."""
    cuts = [int(round(f * epochs)) for f in milestones]

    def lr_at(epoch: int) -> float:
        return base_lr * factor ** sum(epoch >= c for c in cuts)

    return lr_at


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> Iterable[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    final_map: Optional[float] = None
    diverged: bool = False


def _finite_state(params: Sequence[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)


def train(
    model: ModelGraph,
    dataset: Sequence[Sample],
    epochs: int,
    lr_schedule: Callable[[int], float] | float = 1e-2,
    batch_size: int = 16,
    m: float = 1.0,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    seed: int = 0,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
    eval_set: Optional[Sequence[Sample]] = None,
    extra_loss: Optional[Callable] = None,
    extra_params: Sequence[Tensor] = (),
    log_every: int = 0,
) -> TrainReport:
    """SGD training of ``model`` in place.

    Each step minimises ``(L_c + L_r [+ extra]) / max(1, n_pos)``.  On a
    non-finite loss the weights of the last completed epoch are restored and
    :class:`NumericalError` is raised.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    sched = lr_schedule if callable(lr_schedule) else (lambda e, lr=float(lr_schedule): lr)
    params = model.parameters() + list(extra_params)
    opt = SGD(params, sched(0), momentum, weight_decay)
    rng = rng_for(seed, "train-shuffle")
    centers = model.default_boxes().centers
    images = stack_images(list(dataset))
    targets = match_targets(model, dataset, match_threshold)
    report = TrainReport()
    with T.trainable(params):
        _train_epochs(model, params, opt, sched, epochs, images, targets, centers, rng, batch_size, m, extra_loss, report, log_every)
    if eval_set is not None:
        from .metrics import evaluate

        report.final_map = evaluate(model, eval_set).map
    return report


def _train_epochs(model, params, opt, sched, epochs, images, targets, centers, rng, batch_size, m, extra_loss, report, log_every):
    n = len(images)
    for epoch in range(epochs):
        snapshot = [p.data.copy() for p in params]
        opt.lr = sched(epoch)
        total, steps = 0.0, 0
        for idx in batches(n, batch_size, rng):
            bt = MatchTargets(targets.labels[idx], targets.gt_boxes[idx])
            out, feats = forward(model, images[idx])
            l_c, l_r = detection_loss(out, bt, centers, m)
            loss = l_c + l_r
            if extra_loss is not None:
                loss = loss + extra_loss(feats, idx)
            if not np.isfinite(loss.item()):
                for p, s in zip(params, snapshot):
                    p.data[...] = s
                report.diverged = True
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step(scale=1.0 / max(1, bt.num_positive))
            model.enforce_masks()
            total += loss.item()
            steps += 1
            if log_every and steps % log_every == 0:
                logger.info("epoch %d step %d loss %.4f", epoch, steps, loss.item())
        if not _finite_state(params):
            for p, s in zip(params, snapshot):
                p.data[...] = s
            report.diverged = True
            raise NumericalError(f"non-finite weights after epoch {epoch}")
        report.epoch_losses.append(total / max(1, steps))
        logger.info("epoch %d mean loss %.4f lr %.2e", epoch, report.epoch_losses[-1], opt.lr)


# -- inference --------------------------------------------------------------

def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order (ties by index)."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    while len(order):
        i = order[0]
        keep.append(i)
        if len(order) == 1:
            break
        rest = order[1:]
        xx1 = np.maximum(boxes[i, 0], boxes[rest, 0])
        yy1 = np.maximum(boxes[i, 1], boxes[rest, 1])
        xx2 = np.minimum(boxes[i, 2], boxes[rest, 2])
        yy2 = np.minimum(boxes[i, 3], boxes[rest, 3])
        inter = np.clip(xx2 - xx1, 0, None) * np.clip(yy2 - yy1, 0, None)
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        area_r = (boxes[rest, 2] - boxes[rest, 0]) * (boxes[rest, 3] - boxes[rest, 1])
        ov = inter / (area_i + area_r - inter)
        order = rest[ov <= threshold]
    return np.asarray(keep, dtype=np.int64)


@dataclass
class Detections:
    boxes: np.ndarray  # [D,4]
    scores: np.ndarray  # [D]
    labels: np.ndarray  # [D]


def predict(
    model: ModelGraph,
    images: np.ndarray,
    batch_size: int = 50,
    conf_threshold: float = 0.01,
    nms_threshold: float = 0.5,
    top_k: int = 100,
) -> list[Detections]:
    """Per-image detections after per-class greedy NMS."""
    anchors = model.default_boxes()
    size = float(model.image_size)
    results = []
    for start in range(0, len(images), batch_size):
        with T.no_grad():
            out, _ = forward(model, images[start : start + batch_size])
        probs = T.softmax(out.class_logits.data, axis=-1)
        offsets = out.box_offsets.data
        for i in range(probs.shape[0]):
            boxes = np.clip(decode(offsets[i], anchors.centers), 0.0, size)
            valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            all_b, all_s, all_l = [], [], []
            for c in range(1, model.num_classes):
                sel = np.flatnonzero(valid & (probs[i, :, c] > conf_threshold))
                if len(sel) == 0:
                    continue
                sc = probs[i, sel, c]
                top = np.lexsort((sel, -sc))[:200]
                sel, sc = sel[top], sc[top]
                k = nms(boxes[sel], sc, nms_threshold)
                all_b.append(boxes[sel[k]])
                all_s.append(sc[k])
                all_l.append(np.full(len(k), c))
            if all_b:
                b, s, l = np.concatenate(all_b), np.concatenate(all_s), np.concatenate(all_l)
                order = np.lexsort((np.arange(len(s)), -s))[:top_k]
                results.append(Detections(b[order], s[order], l[order]))
            else:
                results.append(Detections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)))
    return results


# -- checkpoints ------------------------------------------------------------

def checkpoint_bytes(model: ModelGraph) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(model.layers))]
    for layer in model.layers:
        tag = _KIND_TAGS[(layer.kind, layer.stride)]
        shape = layer.weight.shape
        parts.append(struct.pack("<BI", tag, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(layer.weight.data, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
    masks = list(model.masks) + [None] * (len(model.layers) - len(model.masks))
    for keep in masks:
        keep = [] if keep is None else [int(k) for k in keep]
        parts.append(struct.pack(f"<I{len(keep)}I", len(keep), *keep))
    return b"".join(parts)


def save_checkpoint(model: ModelGraph, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def array(self, count: int, what: str) -> np.ndarray:
        size = 8 * count
        if self.pos + size > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += size
        return arr


def model_from_bytes(buf: bytes) -> ModelGraph:
    r = _Reader(buf)
    (magic,) = r.take("<4s", "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", 0)
    version, n_layers = r.take("<II", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if n_layers < 2 or n_layers > 1024:
        raise FormatError(f"implausible layer count {n_layers}", 8)
    layers = []
    for i in range(n_layers):
        at = r.pos
        tag, ndim = r.take("<BI", f"layer {i} header")
        if tag not in _TAG_KINDS:
            raise FormatError(f"unknown layer kind tag {tag}", at)
        if ndim != 4:
            raise FormatError(f"layer {i} weight must be 4-d, got {ndim} dims", at + 1)
        shape = r.take(f"<{ndim}I", f"layer {i} shape")
        w = r.array(int(np.prod(shape)), f"layer {i} weights").reshape(shape)
        b = r.array(shape[0], f"layer {i} bias")
        kind, stride = _TAG_KINDS[tag]
        layers.append(Layer(kind, Tensor(w), Tensor(b), stride, shape[2] // 2))
    masks: list[Optional[np.ndarray]] = []
    for i in range(n_layers):
        at = r.pos
        (count,) = r.take("<I", f"mask {i} count")
        idx = np.asarray(r.take(f"<{count}I", f"mask {i} indices"), dtype=np.int64)
        if count and (np.any(np.diff(idx) <= 0) or idx[-1] >= layers[i].out_channels):
            raise FormatError(f"mask {i} indices invalid", at)
        masks.append(idx if count else None)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    if layers[-1].kind != "head" or any(l.kind != "conv" for l in layers[:-1]):
        raise FormatError("checkpoint must hold conv layers followed by one head", 12)
    head = layers[-1]
    a = len(ANCHOR_SCALES) * len(ANCHOR_RATIOS)
    model = ModelGraph(layers=layers, masks=masks[:-1], num_classes=head.out_channels // a - 4)
    return model


def load_checkpoint(path: str | Path) -> ModelGraph:
    return model_from_bytes(Path(path).read_bytes())
