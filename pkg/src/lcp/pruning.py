"""Layer-wise localization-aware channel pruning.

For each prunable backbone layer ``l`` (in shallow-to-deep order):

1. attach a freshly initialised auxiliary head to the output of layer
   ``l + 1``, warm it up alone on frozen features, then fine-tune it
   together with the pruned detector on ``L_f = L_a + L_c + L_r``;
2. over a fixed scoring set, sum the gradients of the joint loss
   ``L = L_re + alpha * L_a`` with respect to layer ``l + 1``'s filter;
3. score each input channel ``k`` of that filter by the sum of squared
   gradient entries touching it and keep the ``K`` best;
4. refine the retained filter slices with plain SGD on the joint loss.

``alpha = 0`` reduces the joint loss to reconstruction only, which is the
baseline the localization-aware variant is compared against.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import DEFAULT_MATCH_THRESHOLD
from .data import Sample, stack_images
from .detector import (
    Adam,
    MatchTargets,
    ModelGraph,
    NumericalError,
    batches,
    forward,
    match_targets,
    save_checkpoint,
    step_schedule,
    train,
)
from .roialign import AuxHead, Positives, RoISpec, aux_losses, aux_losses_pooled, contextual_roi_align_batch
from .seeding import rng_for
from .tensor import Tensor

logger = logging.getLogger(__name__)

COMPONENTS = ("L_re", "L_ac", "L_ar")


@dataclass(frozen=True)
class PruneMask:
    layer_index: int
    retained: tuple[int, ...]
    budget: int

    def __post_init__(self):
        r = self.retained
        if len(r) != self.budget:
            raise ValueError(f"mask keeps {len(r)} channels but budget is {self.budget}")
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("retained indices must be unique and increasing")


@dataclass(frozen=True)
class PruneConfig:
    eta: float = 0.5
    alpha: float = 1.0
    m: float = 50.0
    gamma: float = 1e-6
    aux_warmup_epochs: int = 20
    aux_lr: float = 1e-3
    finetune_epochs_per_layer: int = 10
    finetune_lr: float = 1e-3
    final_finetune_epochs: int = 3
    final_lr: float = 1e-3
    detector_m: float = 1.0
    match_threshold: float = DEFAULT_MATCH_THRESHOLD
    scoring_batches: int = 8
    batch_size: int = 16
    refine_steps: Optional[int] = None
    score_scale: float = 1.0  # multiplies the joint loss during scoring only
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")
        if self.alpha < 0 or self.m <= 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be >= 0 and m > 0")

    @property
    def baseline(self) -> bool:
        return self.alpha == 0

    def budget(self, channels: int) -> int:
        return keep_count(channels, self.eta)


def keep_count(channels: int, eta: float) -> int:
    """``max(1, round((1 - eta) * channels))`` with halves rounded up."""
    return max(1, min(channels, math.floor((1.0 - eta) * channels + 0.5)))


@dataclass
class GradientLedger:
    """Squared-gradient mass per prunable layer and loss component."""

    mass: dict = field(default_factory=dict)  # layer -> {component: float}

    def add(self, layer: int, component: str, value: float) -> None:
        if value < 0:
            raise ValueError("gradient mass cannot be negative")
        self.mass.setdefault(layer, {c: 0.0 for c in COMPONENTS})[component] += float(value)

    def percentages(self, layer: int) -> dict:
        row = self.mass[layer]
        total = sum(row.values())
        if total <= 0:
            return {c: 0.0 for c in COMPONENTS}
        return {c: 100.0 * row[c] / total for c in COMPONENTS}

    def to_json(self) -> str:
        return json.dumps({str(k): v for k, v in sorted(self.mass.items())}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GradientLedger":
        raw = json.loads(text)
        return cls({int(k): {c: float(v[c]) for c in COMPONENTS} for k, v in raw.items()})

    def table(self) -> str:
        head = f"{'layer':>5}  " + "  ".join(f"{c + ' %':>9}" for c in COMPONENTS) + f"  {'total %':>8}"
        lines = [head]
        for layer in sorted(self.mass):
            p = self.percentages(layer)
            lines.append(f"{layer:>5}  " + "  ".join(f"{p[c]:>9.3f}" for c in COMPONENTS) + f"  {sum(p.values()):>8.3f}")
        return "\n".join(lines)


# -- losses and scoring -----------------------------------------------------

def reconstruction_loss(F, X, W_masked, bias=None, stride: int = 1, padding: int = 1) -> Tensor:
    """``||F - (X * W_masked + bias)||^2 / (2 Q)`` with Q the element count of F."""
    F = F.data if isinstance(F, Tensor) else np.asarray(F, dtype=np.float64)
    rec = T.conv2d(X, W_masked, bias, stride, padding)
    if rec.shape != F.shape:
        raise T.ShapeError(f"reconstruction {rec.shape} does not match target feature map {F.shape}")
    diff = rec - F
    return T.mul(T.tsum(diff * diff), 1.0 / (2.0 * F.size))


def joint_loss(l_re: Tensor, l_a: Tensor, alpha: float) -> Tensor:
    l_re, l_a = T.as_tensor(l_re), T.as_tensor(l_a)
    if not (np.isfinite(l_re.item()) and np.isfinite(l_a.item())):
        raise NumericalError(f"non-finite loss term (L_re={l_re.item()}, L_a={l_a.item()})")
    return l_re + T.mul(l_a, float(alpha))


def channel_importance(w_grad: np.ndarray) -> np.ndarray:
    """Sum of squared gradient entries per input channel of a [Cout,Cin,kH,kW] filter gradient."""
    g = np.asarray(w_grad, dtype=np.float64)
    return (g * g).sum(axis=(0, 2, 3))


def select_channels(scores: Sequence[float], K: int, layer_index: int = 0) -> PruneMask:
    """Keep the ``K`` highest-scoring channels; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= K <= len(scores):
        raise ValueError(f"K={K} out of range for {len(scores)} channels")
    order = np.lexsort((np.arange(len(scores)), -scores))
    return PruneMask(layer_index, tuple(int(i) for i in np.sort(order[:K])), K)


def refine_selected(
    W: Tensor,
    mask: PruneMask,
    gamma: float,
    steps: int,
    grad_fn,
) -> Tensor:
    """``steps`` SGD updates ``W_C <- W_C - gamma * dL/dW_C`` on the retained input channels.

    ``grad_fn(W, step)`` returns the joint-loss gradient for the current
    weights.  Non-retained slices stay exactly zero.
    """
    drop = np.setdiff1d(np.arange(W.shape[1]), mask.retained)
    W.data[:, drop] = 0.0
    for step in range(steps):
        if gamma == 0:
            break
        g = np.asarray(grad_fn(W, step))
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient while refining layer {mask.layer_index}")
        g = g.copy()
        g[:, drop] = 0.0
        W.data -= gamma * g
    return W


# -- the per-layer stage ----------------------------------------------------

@dataclass
class _Batch:
    images: np.ndarray
    targets: MatchTargets
    positives: Positives
    reference: Optional[np.ndarray] = None  # original model's layer l+1 conv output


@dataclass
class LayerReport:
    layer: int
    channels: int
    K: int
    retained: list
    percent: dict
    mass: dict
    joint_loss_pre: float
    joint_loss_post: float
    fallback_batches: int
    clamped_boxes: int

    def to_record(self) -> dict:
        rec = {"type": "layer"}
        rec.update(asdict(self))
        return rec


@dataclass
class PruneResult:
    model: ModelGraph
    ledger: GradientLedger
    reports: list
    masks: list


def feature_scale(model: ModelGraph, layer: int) -> float:
    stride = int(np.prod([l.stride for l in model.backbone[: layer + 1]]))
    return 1.0 / stride


def prunable_layers(model: ModelGraph) -> list[int]:
    """Backbone layers whose output feeds another backbone conv."""
    return list(range(len(model.backbone) - 1))


class LayerStage:
    """Scoring and refinement machinery for pruning the output channels of one layer."""

    def __init__(self, model: ModelGraph, original: ModelGraph, layer: int, head: AuxHead, config: PruneConfig):
        self.model = model
        self.original = original
        self.layer = layer
        self.head = head
        self.config = config

    @property
    def consumer(self):
        return self.model.backbone[self.layer + 1]

    def prepare(self, batch: _Batch) -> _Batch:
        """Attach the original model's layer ``l + 1`` conv output as the reconstruction target."""
        with T.no_grad():
            _, feats = forward(self.original, batch.images, upto=self.layer + 1)
        return replace(batch, reference=feats.pre[self.layer + 1].data)

    def losses(self, batch: _Batch) -> dict:
        """Taped L_re, L_ac, L_ar for one batch (fresh forward each call)."""
        with T.no_grad():
            _, feats = forward(self.model, batch.images, upto=self.layer)
        x = feats.post[self.layer]
        w = self.consumer
        z = T.conv2d(x, w.weight, w.bias, w.stride, w.padding)
        diff = z - batch.reference
        l_re = T.mul(T.tsum(diff * diff), 1.0 / (2.0 * batch.reference.size))
        out = T.relu(z)
        gate = self.model.channel_gate(self.layer + 1)
        if gate is not None:
            out = out * gate
        aux = aux_losses(out, batch.positives, self.head, self.config.m)
        return {"L_re": l_re, "L_ac": aux.l_ac, "L_ar": aux.l_ar, "L_a": aux.l_a, "aux": aux}

    def gradient(self, batch: _Batch, which: str = "joint", scale: float = 1.0) -> tuple[np.ndarray, float, dict]:
        W = self.consumer.weight
        with T.trainable([W]):
            parts = self.losses(batch)
            if which == "joint":
                loss = joint_loss(parts["L_re"], parts["L_a"], self.config.alpha)
            else:
                loss = parts[which]
            if scale != 1.0:
                loss = T.mul(loss, scale)
            if not loss.requires_grad:
                return np.zeros(W.shape), loss.item(), parts
            if not np.isfinite(loss.item()):
                raise NumericalError(f"non-finite {which} loss at layer {self.layer}")
            loss.backward()
            return W.grad.copy(), loss.item(), parts

    def joint_value(self, batches: Sequence[_Batch]) -> float:
        total = 0.0
        with T.no_grad():
            for b in batches:
                p = self.losses(b)
                total += p["L_re"].item() + self.config.alpha * p["L_a"].item()
        return total

    def score(self, batches: Sequence[_Batch], ledger: Optional[GradientLedger] = None, scale: float = 1.0):
        """Channel scores from the joint-loss gradient summed over ``batches``."""
        shape = self.consumer.weight.shape
        g_joint = np.zeros(shape)
        comp = {c: np.zeros(shape) for c in COMPONENTS}
        fallback = 0
        for b in batches:
            g, _, parts = self.gradient(b, "joint", scale)
            g_joint = g_joint + g
            fallback += parts["aux"].fallback
            if ledger is not None:
                for c in COMPONENTS:
                    comp[c] = comp[c] + self.gradient(b, c)[0]
        if ledger is not None:
            for c in COMPONENTS:
                ledger.add(self.layer, c, float(channel_importance(comp[c]).sum()))
        return channel_importance(g_joint), fallback


def _make_batches(model: ModelGraph, samples: Sequence[Sample], idx_sets, threshold: float) -> list[_Batch]:
    out = []
    for idx in idx_sets:
        chosen = [samples[i] for i in idx]
        targets = match_targets(model, chosen, threshold)
        out.append(_Batch(stack_images(chosen), targets, Positives.from_targets(model, targets)))
    return out


def scoring_indices(n: int, config: PruneConfig) -> list[np.ndarray]:
    rng = rng_for(config.seed, "scoring-set")
    order = rng.permutation(n)
    want = config.scoring_batches * config.batch_size
    order = order[: min(n, want)]
    return [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]


def warmup_aux_head(model: ModelGraph, head: AuxHead, layer: int, samples, targets, config: PruneConfig) -> None:
    """Train only the aux head on ``L_a`` over features of the frozen detector.

    The detector does not move here, so the contextual RoI features of every
    minibatch are pooled once and each epoch only runs the head's two small
    linear maps.
    """
    if config.aux_warmup_epochs <= 0:
        return
    images = stack_images(list(samples))
    rng = rng_for(config.seed, f"aux-warmup:{layer}")
    cached = []
    with T.no_grad():
        for idx in batches(len(images), config.batch_size, rng):
            bt = MatchTargets(targets.labels[idx], targets.gt_boxes[idx])
            pos = Positives.from_targets(model, bt)
            if len(pos) == 0:
                continue
            _, feats = forward(model, images[idx], upto=layer + 1)
            cached.append((contextual_roi_align_batch(feats.post[layer + 1], pos, head.spec).data, pos))
    params = head.parameters()
    opt = Adam(params, config.aux_lr)
    with T.trainable(params):
        for _ in range(config.aux_warmup_epochs):
            for k in rng.permutation(len(cached)):
                pooled, pos = cached[k]
                loss = aux_losses_pooled(Tensor(pooled), pos, head, config.m).l_a
                if not np.isfinite(loss.item()):
                    raise NumericalError(f"non-finite auxiliary loss while warming up layer {layer}")
                opt.zero_grad()
                loss.backward()
                opt.step(scale=1.0 / len(pos))


def finetune_layer(model: ModelGraph, head: AuxHead, layer: int, samples, targets, config: PruneConfig) -> None:
    """Fine-tune detector and aux head on ``L_a + L_c + L_r`` with the aux head on layer ``layer + 1``."""
    if config.finetune_epochs_per_layer <= 0:
        return

    def extra(feats, idx):
        bt = MatchTargets(targets.labels[idx], targets.gt_boxes[idx])
        pos = Positives.from_targets(model, bt)
        return aux_losses(feats.post[layer + 1], pos, head, config.m).l_a

    train(
        model,
        samples,
        config.finetune_epochs_per_layer,
        step_schedule(config.finetune_lr, config.finetune_epochs_per_layer),
        batch_size=config.batch_size,
        m=config.detector_m,
        seed=rng_for(config.seed, f"finetune:{layer}").integers(2**31),
        match_threshold=config.match_threshold,
        extra_loss=extra,
        extra_params=head.parameters(),
    )


def prune_model(
    model: ModelGraph,
    original: ModelGraph,
    dataset: Sequence[Sample],
    config: PruneConfig,
    checkpoint_dir: str | Path | None = None,
    layers: Optional[Sequence[int]] = None,
) -> PruneResult:
    """Prune ``model`` layer by layer against the frozen ``original``.

    ``model`` is modified in place and returned.  With ``checkpoint_dir`` a
    checkpoint is written after every completed layer; a numerical failure
    re-raises :class:`NumericalError` naming the last one.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    ledger = GradientLedger()
    reports: list[LayerReport] = []
    masks: list[PruneMask] = []
    targets = match_targets(model, dataset, config.match_threshold)
    score_batches = _make_batches(model, dataset, scoring_indices(len(dataset), config), config.match_threshold)
    last_ckpt: Optional[str] = None
    if checkpoint_dir is not None:
        last_ckpt = str(save_checkpoint(model, Path(checkpoint_dir) / "stage_init.lcpm"))

    try:
        for layer in layers if layers is not None else prunable_layers(model):
            channels = model.backbone[layer].out_channels
            spec = RoISpec(spatial_scale=feature_scale(model, layer + 1))
            head = AuxHead(model.backbone[layer + 1].out_channels, model.num_classes, spec, config.seed, f"aux:{layer}")
            warmup_aux_head(model, head, layer, dataset, targets, config)
            finetune_layer(model, head, layer, dataset, targets, config)

            stage = LayerStage(model, original, layer, head, config)
            scored = [stage.prepare(b) for b in score_batches]
            scores, fallback = stage.score(scored, ledger, config.score_scale)
            K = config.budget(channels)
            mask = select_channels(scores, K, layer)
            model.set_mask(layer, mask.retained)

            pre = stage.joint_value(scored)
            steps = config.refine_steps if config.refine_steps is not None else len(scored)
            refine_selected(
                stage.consumer.weight, mask, config.gamma, steps, lambda W, s: stage.gradient(scored[s % len(scored)])[0]
            )
            model.enforce_masks()
            post = stage.joint_value(scored)
            if not np.isfinite(post):
                raise NumericalError(f"non-finite joint loss after refining layer {layer}")

            clamped = sum(stage.losses(b)["aux"].clamped for b in scored)
            rep = LayerReport(
                layer=layer,
                channels=channels,
                K=K,
                retained=list(mask.retained),
                percent=ledger.percentages(layer),
                mass=dict(ledger.mass[layer]),
                joint_loss_pre=pre,
                joint_loss_post=post,
                fallback_batches=int(fallback),
                clamped_boxes=int(clamped),
            )
            reports.append(rep)
            masks.append(mask)
            logger.info("layer %d: kept %d/%d, joint loss %.5g -> %.5g", layer, K, channels, pre, post)
            if checkpoint_dir is not None:
                last_ckpt = str(save_checkpoint(model, Path(checkpoint_dir) / f"stage_layer{layer}.lcpm"))

        if config.final_finetune_epochs > 0:
            train(
                model,
                dataset,
                config.final_finetune_epochs,
                step_schedule(config.final_lr, config.final_finetune_epochs),
                batch_size=config.batch_size,
                m=config.detector_m,
                seed=rng_for(config.seed, "final-finetune").integers(2**31),
                match_threshold=config.match_threshold,
            )
    except NumericalError as exc:
        raise NumericalError(str(exc), last_ckpt) from exc
    return PruneResult(model, ledger, reports, masks)
