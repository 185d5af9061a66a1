"""Acceptance suite: one test per criterion, each at its stated tolerance.

The toy-scale directional experiment (criterion 7) trains the detector from
scratch and prunes it ten times, so this module takes roughly 20 to 30
minutes on a single core.  Its artifacts are shared with criteria 5, 6 and 8.
"""

import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from lcp import data as D
from lcp import tensor as T
from lcp.boxes import BBox, enclosing_box, giou, giou_loss, iou
from lcp.cli import main as cli_main
from lcp.detector import (
    build_model,
    checkpoint_bytes,
    load_checkpoint,
    model_from_bytes,
    save_checkpoint,
    step_schedule,
    train,
)
from lcp.metrics import evaluate
from lcp.pruning import (
    GradientLedger,
    PruneConfig,
    channel_importance,
    joint_loss,
    prune_model,
    reconstruction_loss,
    select_channels,
)
from lcp.roialign import AuxHead, Positives, RoISpec, aux_losses, contextual_roi_align, roi_align, roi_align_batch
from lcp.tensor import Tensor, check_gradients, numeric_gradient

# Pinned once by calibration on seed 0 (see README): 20 epochs reaches test mAP@0.5 of about 0.97.
TRAIN_EPOCHS = 20
TRAIN_LR = 0.01
MAP_FLOOR = 0.80
EXPERIMENT_SEEDS = (0, 1, 2, 3, 4)
# Identical budget for both selection modes: no per-layer detector epochs, 3 final epochs.
EXPERIMENT_CONFIG = dict(
    eta=0.5,
    m=50.0,
    gamma=1e-6,
    aux_warmup_epochs=20,
    aux_lr=1e-3,
    finetune_epochs_per_layer=0,
    final_finetune_epochs=3,
    final_lr=1e-3,
)


# -- criterion 1 -------------------------------------------------------------

def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _box_pair(rng):
    """Overlapping predicted/target boxes whose coordinates stay clear of max/min kinks."""
    while True:
        xy = rng.uniform(0, 20, 2)
        gt = np.concatenate([xy, xy + rng.uniform(4, 12, 2)])
        pred = gt + rng.normal(0, 2.0, 4)
        if pred[2] - pred[0] < 1 or pred[3] - pred[1] < 1:
            continue
        if np.min(np.abs(pred - gt)) > 1e-3:
            return pred, gt


def _grad_cases():
    def conv(rng):
        x, w, b = rng.normal(size=(2, 3, 5, 5)), Tensor(rng.normal(size=(4, 3, 3, 3))), Tensor(rng.normal(size=4))
        stride = int(rng.integers(1, 3))
        c = rng.normal(size=T.conv2d(Tensor(x), w, b, stride, 1).shape)
        return (lambda t: T.tsum(T.conv2d(t, w, b, stride, 1) * c)), x

    def conv_weight(rng):
        x, c = Tensor(rng.normal(size=(2, 3, 5, 5))), rng.normal(size=(2, 4, 5, 5))
        return (lambda t: T.tsum(T.conv2d(x, t, None, 1, 1) ** 2 * c)), rng.normal(size=(4, 3, 3, 3))

    def linear(rng):
        w, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=3))
        c = rng.normal(size=(4, 3))
        return (lambda t: T.tsum(T.linear(t, w, b) ** 2 * c)), rng.normal(size=(4, 5))

    def relu(rng):
        c = rng.normal(size=(3, 7))
        return (lambda t: T.tsum(T.relu(t) * c)), _away_from_zero(rng, (3, 7))

    def roialign(rng):
        boxes = np.column_stack([rng.uniform(-2, 8, (3, 2)), np.zeros((3, 2))])
        boxes[:, 2:] = boxes[:, :2] + rng.uniform(2, 10, (3, 2))
        idx = rng.integers(0, 2, 3)
        c = rng.normal(size=(3, 2, 3, 3))
        return (lambda t: T.tsum(roi_align_batch(t, boxes, idx, RoISpec(spatial_scale=0.5)) * c)), rng.normal(size=(2, 2, 6, 6))

    def giou_case(rng):
        pairs = [_box_pair(rng) for _ in range(3)]
        gt = np.array([p[1] for p in pairs])
        return (lambda t: giou_loss(t, gt, 50.0)[0]), np.array([p[0] for p in pairs])

    def cross_entropy(rng):
        labels = rng.integers(0, 5, 6)
        return (lambda t: T.tsum(T.softmax_cross_entropy(t, labels))), rng.normal(size=(6, 5)) * 3

    def reconstruction(rng):
        X, F = Tensor(rng.normal(size=(2, 3, 5, 5))), rng.normal(size=(2, 4, 5, 5))
        return (lambda t: reconstruction_loss(F, X, t)), rng.normal(size=(4, 3, 3, 3))

    def joint(rng):
        X = Tensor(np.abs(rng.normal(size=(1, 3, 8, 8))))
        F = rng.normal(size=(1, 3, 8, 8))
        head = AuxHead(3, 5, RoISpec(spatial_scale=0.5), seed=int(rng.integers(1000)))
        head.box_w.data[...] = rng.normal(scale=0.05, size=head.box_w.shape)
        d, g = _box_pair(rng)
        pos = Positives.from_pairs([(BBox(*(0.4 * d)), BBox(*(0.4 * g)), 2)])
        alpha = float(rng.uniform(0.1, 2.0))

        def f(t):
            z = T.conv2d(X, t, None, 1, 1)
            return joint_loss(reconstruction_loss(F, X, t), aux_losses(T.relu(z), pos, head, 50.0).l_a, alpha)

        return f, rng.normal(scale=0.5, size=(3, 3, 3, 3))

    return {
        "conv2d-input": conv,
        "conv2d-weight": conv_weight,
        "linear": linear,
        "relu": relu,
        "roialign": roialign,
        "giou-loss": giou_case,
        "cross-entropy": cross_entropy,
        "reconstruction-loss": reconstruction,
        "joint-loss": joint,
    }


@pytest.mark.criterion(1, "gradient oracle suite (8 ops x 20 seeds, rel err < 1e-5, < 2 min)")
def test_criterion_1_gradient_oracles(record_property):
    start = time.perf_counter()
    worst = {}
    failures = []
    for name, build in _grad_cases().items():
        worst[name] = 0.0
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            f, x0 = build(rng)
            rep = check_gradients(f, x0, step=1e-6, tol=1e-5)
            worst[name] = max(worst[name], rep.max_rel_error)
            if not rep.passed:
                failures.append((name, seed, rep.max_rel_error))
    elapsed = time.perf_counter() - start
    record_property("max_rel_error", f"{max(worst.values()):.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert not failures, failures
    assert elapsed < 120


# -- criterion 2 -------------------------------------------------------------

def _pixel_counts(a, b):
    size = int(max(a[2], b[2], a[3], b[3])) + 1
    ma = np.zeros((size, size), bool)
    mb = np.zeros((size, size), bool)
    ma[a[1] : a[3], a[0] : a[2]] = True
    mb[b[1] : b[3], b[0] : b[2]] = True
    return (ma & mb).sum(), (ma | mb).sum()


@pytest.mark.criterion(2, "geometry property suite over 10^4 random pairs (< 30 s)")
def test_criterion_2_geometry_properties(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_inv = 0.0
    for k in range(10_000):
        xy = rng.uniform(-50, 50, (2, 2))
        wh = rng.uniform(0.01, 40, (2, 2))
        if k % 10 == 0:  # exercise the equality branch
            xy[1], wh[1] = xy[0], wh[0]
        a = BBox(*xy[0], *(xy[0] + wh[0]))
        b = BBox(*xy[1], *(xy[1] + wh[1]))
        g, u = giou(a, b), iou(a, b)
        assert g <= u
        assert -1.0 < g <= 1.0
        assert g == giou(b, a)
        assert (g == 1.0) == (a == b)
        dx, dy, s = rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(0.01, 100)
        worst_inv = max(worst_inv, abs(giou(a.shifted(dx, dy), b.shifted(dx, dy)) - g), abs(giou(a.scaled(s), b.scaled(s)) - g))
        assert worst_inv <= 1e-12, (a, b, dx, dy, s)
        ia = rng.integers(0, 30, 2)
        ib = rng.integers(0, 30, 2)
        ai = np.concatenate([ia, ia + rng.integers(1, 15, 2)])
        bi = np.concatenate([ib, ib + rng.integers(1, 15, 2)])
        inter, union = _pixel_counts(ai, bi)
        assert iou(BBox(*ai.astype(float)), BBox(*bi.astype(float))) == inter / union
    elapsed = time.perf_counter() - start
    record_property("max_invariance_error", f"{worst_inv:.1e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert elapsed < 30


# -- criterion 3 -------------------------------------------------------------

@pytest.mark.criterion(3, "RoIAlign exactness on constant/affine maps; contextual = sum of plain aligns")
def test_criterion_3_roialign_exactness(record_property):
    rng = np.random.default_rng(3)
    h = w = 16
    scale = 0.25
    a, b, c = 0.37, -1.1, 4.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    affine = Tensor((a * ii + b * jj + c)[None])
    const = Tensor(np.full((1, h, w), -2.5))
    spec = RoISpec(spatial_scale=scale)
    lo, hi = 0.5 / scale, (w - 0.5) / scale
    worst = 0.0
    for _ in range(100):
        x = np.sort(rng.uniform(lo, hi, 2))
        y = np.sort(rng.uniform(lo, hi, 2))
        box = BBox(x[0], y[0], x[1], y[1])
        bw, bh = box.width / 3, box.height / 3
        cx = (box.x1 + (np.arange(3) + 0.5) * bw) * scale - 0.5
        cy = (box.y1 + (np.arange(3) + 0.5) * bh) * scale - 0.5
        expected = a * cy[:, None] + b * cx[None, :] + c
        worst = max(worst, np.max(np.abs(roi_align(affine, spec, box).data[0] - expected)))
        worst = max(worst, np.max(np.abs(roi_align(const, spec, box).data + 2.5)))
    record_property("max_abs_error", f"{worst:.1e}")
    assert worst <= 1e-9

    feat = Tensor(rng.normal(size=(8, h, w)))
    for _ in range(100):
        gt = rng.uniform(0, 40, 2)
        gt = BBox(*gt, *(gt + rng.uniform(8, 24, 2)))
        d = BBox(gt.x1 + rng.uniform(-1, 1), gt.y1 + rng.uniform(-1, 1), gt.x2 + rng.uniform(-1, 1), gt.y2 + rng.uniform(-1, 1))
        if iou(d, gt) <= 0.5:
            continue
        ctx = contextual_roi_align(feat, d, gt, spec).data
        plain = roi_align(feat, spec, d).data + roi_align(feat, spec, enclosing_box(gt, d)).data
        assert ctx.tobytes() == plain.tobytes()


# -- criterion 4 -------------------------------------------------------------

@pytest.mark.criterion(4, "channel importance vs finite differences on a 1-layer 8-channel 2-image instance")
def test_criterion_4_importance_oracle(record_property):
    rng = np.random.default_rng(4)
    X = Tensor(np.maximum(rng.normal(size=(2, 8, 8, 8)), 0.0))
    W0 = rng.normal(scale=0.3, size=(6, 8, 3, 3))
    F = T.conv2d(X, Tensor(rng.normal(scale=0.3, size=(6, 8, 3, 3))), padding=1).data
    head = AuxHead(6, 5, RoISpec(spatial_scale=0.25), seed=4)
    head.box_w.data[...] = rng.normal(scale=0.02, size=head.box_w.shape)
    pos = Positives(
        np.array([0, 1, 1]),
        np.array([[4.0, 4, 20, 22], [8, 6, 26, 24], [2, 10, 14, 30]]),
        np.array([[5.0, 3, 21, 23], [9, 8, 26, 26], [3, 11, 15, 28]]),
        np.array([1, 3, 4]),
    )

    def loss(w):
        l_a = aux_losses(T.relu(T.conv2d(X, w, padding=1)), pos, head, 50.0).l_a
        return joint_loss(reconstruction_loss(F, X, w), l_a, 1.0)

    w = Tensor(W0.copy(), requires_grad=True)
    loss(w).backward()
    analytic = channel_importance(w.grad)
    numeric = channel_importance(numeric_gradient(loss, W0, 1e-6))
    rel = np.max(np.abs(analytic - numeric) / np.abs(numeric))
    record_property("max_rel_error", f"{rel:.1e}")
    assert rel <= 1e-3
    assert select_channels(analytic, 4).retained == select_channels(numeric, 4).retained


# -- criterion 7 fixture (shared with 5, 6, 8) -------------------------------

@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiment")
    start = time.perf_counter()
    D.generate(D.DatasetManifest(seed=0, count=500, split="train"), root / "train")
    D.generate(D.DatasetManifest(seed=0, count=200, split="test"), root / "test")
    train_set, test_set = D.load(root / "train"), D.load(root / "test")
    model = build_model(seed=0)
    train(model, train_set, TRAIN_EPOCHS, step_schedule(TRAIN_LR, TRAIN_EPOCHS, (0.7,)), seed=0)
    save_checkpoint(model, root / "base.lcpm")
    base_map = evaluate(model, test_set).map
    runs = {}
    for alpha in (1.0, 0.0):
        for seed in EXPERIMENT_SEEDS:
            cfg = PruneConfig(alpha=alpha, seed=seed, **EXPERIMENT_CONFIG)
            res = prune_model(model.copy(), model.copy(), train_set, cfg)
            runs[(alpha, seed)] = (evaluate(res.model, test_set).map, res)
    elapsed = time.perf_counter() - start
    return {"root": root, "model": model, "train": train_set, "base_map": base_map, "runs": runs, "seconds": elapsed}


@pytest.mark.criterion(7, "toy-scale directional experiment: LCP >= reconstruction-only, drop <= 0.05, < 30 min")
def test_criterion_7_directional(experiment, record_property):
    runs = experiment["runs"]
    lcp = [runs[(1.0, s)][0] for s in EXPERIMENT_SEEDS]
    recon = [runs[(0.0, s)][0] for s in EXPERIMENT_SEEDS]
    base = experiment["base_map"]
    record_property("baseline_map", f"{base:.4f}")
    record_property("lcp_mean", f"{np.mean(lcp):.4f}")
    record_property("recon_only_mean", f"{np.mean(recon):.4f}")
    record_property("lcp_per_seed", "/".join(f"{v:.3f}" for v in lcp))
    record_property("recon_per_seed", "/".join(f"{v:.3f}" for v in recon))
    record_property("minutes", f"{experiment['seconds'] / 60:.1f}")
    for s in EXPERIMENT_SEEDS:
        for alpha in (1.0, 0.0):
            res = runs[(alpha, s)][1]
            assert [len(m.retained) for m in res.masks] == [8, 16, 16, 32, 32]
    assert base >= MAP_FLOOR
    assert np.mean(lcp) >= np.mean(recon)
    assert base - np.mean(lcp) <= 0.05
    assert experiment["seconds"] < 30 * 60


# -- criterion 5 -------------------------------------------------------------

@pytest.mark.criterion(5, "selected masks invariant to scaling the joint loss by 0.1, 1, 10")
def test_criterion_5_scale_invariance(experiment, record_property):
    model = experiment["model"]
    subset = experiment["train"][:64]
    masks = {}
    for c in (0.1, 1.0, 10.0):
        cfg = PruneConfig(
            alpha=1.0, seed=5, score_scale=c, aux_warmup_epochs=5, finetune_epochs_per_layer=0, final_finetune_epochs=0, scoring_batches=2, gamma=1e-6
        )
        res = prune_model(model.copy(), model.copy(), subset, cfg)
        masks[c] = [m.retained for m in res.masks]
    record_property("layers", len(masks[1.0]))
    assert masks[0.1] == masks[1.0] == masks[10.0]


# -- criterion 6 -------------------------------------------------------------

@pytest.mark.criterion(6, "prune twice with identical config and seed is bit-identical")
def test_criterion_6_determinism(experiment, tmp_path, record_property):
    root = experiment["root"]
    data = tmp_path / "data"
    D.write_dataset(experiment["train"][:48], data)
    out = tmp_path / "run"
    argv = [
        "prune", "--model", str(root / "base.lcpm"), "--data", str(data), "--out", str(out),
        "--eta", "0.5", "--alpha", "1.0", "--m", "50", "--seed", "13",
        "--epochs-per-layer", "1", "--final-epochs", "1", "--aux-warmup-epochs", "5",
        "--scoring-batches", "2", "--gamma", "1e-6",
    ]
    snapshots = []
    for _ in range(2):
        if out.exists():
            shutil.rmtree(out)
        assert cli_main(argv) == 0
        snapshots.append({str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    record_property("files_compared", len(snapshots[0]))
    assert snapshots[0].keys() == snapshots[1].keys()
    for name in snapshots[0]:
        assert snapshots[0][name] == snapshots[1][name], name
    assert "pruned.lcpm" in snapshots[0] and "report.jsonl" in snapshots[0]


# -- criterion 8 -------------------------------------------------------------

@pytest.mark.criterion(8, "gradient-accounting report: non-negative percentages summing to 100 +- 0.1, one row per layer")
def test_criterion_8_gradient_report(experiment, tmp_path, capsys, record_property):
    worst = 0.0
    for (alpha, seed), (_, res) in experiment["runs"].items():
        for layer in res.ledger.mass:
            p = res.ledger.percentages(layer)
            assert all(v >= 0 for v in p.values())
            worst = max(worst, abs(sum(p.values()) - 100.0))
    assert worst <= 0.1
    ledger = experiment["runs"][(1.0, 0)][1].ledger
    path = tmp_path / "ledger.json"
    path.write_text(ledger.to_json())
    capsys.readouterr()
    assert cli_main(["report-gradients", "--ledger", str(path)]) == 0
    out = capsys.readouterr().out.splitlines()
    header = next(i for i, l in enumerate(out) if l.strip().startswith("layer"))
    rows = out[header + 1 :]
    assert len(rows) == len(experiment["runs"][(1.0, 0)][1].masks) == 5
    for row in rows:
        vals = [float(v) for v in row.split()[1:4]]
        assert all(v >= 0 for v in vals) and abs(sum(vals) - 100.0) <= 0.1
    record_property("max_sum_deviation", f"{worst:.1e}")
    record_property("rows", len(rows))


# -- criterion 9 -------------------------------------------------------------

@pytest.mark.criterion(9, "checkpoint and dataset write-read-write identical; corrupt headers give offset errors")
def test_criterion_9_file_formats(tmp_path, record_property):
    model = build_model(9)
    model.set_mask(1, [0, 5, 7, 30])
    first = checkpoint_bytes(model)
    assert checkpoint_bytes(model_from_bytes(first)) == first
    save_checkpoint(load_checkpoint(save_checkpoint(model, tmp_path / "a.lcpm")), tmp_path / "b.lcpm")
    assert (tmp_path / "a.lcpm").read_bytes() == (tmp_path / "b.lcpm").read_bytes()

    D.generate(D.DatasetManifest(seed=9, count=6), tmp_path / "d1")
    D.write_dataset(D.load(tmp_path / "d1"), tmp_path / "d2")
    for name in (D.IMAGES_FILE, D.ANNOTATIONS_FILE):
        assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes()

    fixtures = 0
    # checkpoints: every truncation inside the header region and every header byte mutation
    for cut in list(range(0, 40)) + [len(first) // 2, len(first) - 1]:
        with pytest.raises(D.FormatError) as exc:
            model_from_bytes(first[:cut])
        assert 0 <= exc.value.offset <= cut
        fixtures += 1
    for pos in range(0, 30):
        for value in (0x00, 0xFF, 0x7F):
            buf = bytearray(first)
            if buf[pos] == value:
                continue
            buf[pos] = value
            try:
                model_from_bytes(bytes(buf))
            except D.FormatError as exc:
                assert 0 <= exc.offset <= len(buf)
                fixtures += 1
    # datasets
    images = (tmp_path / "d1" / D.IMAGES_FILE).read_bytes()
    for cut in list(range(0, 30)) + [len(images) - 1]:
        (tmp_path / "d2" / D.IMAGES_FILE).write_bytes(images[:cut])
        with pytest.raises(D.FormatError) as exc:
            D.load(tmp_path / "d2")
        assert 0 <= exc.value.offset <= cut
        fixtures += 1
    for pos in range(0, 24):
        buf = bytearray(images)
        buf[pos] ^= 0xFF
        (tmp_path / "d2" / D.IMAGES_FILE).write_bytes(bytes(buf))
        with pytest.raises(D.FormatError):
            D.load(tmp_path / "d2")
        fixtures += 1
    record_property("corrupt_fixtures", fixtures)
