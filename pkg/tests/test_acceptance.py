"""Acceptance suite: one test per shipped guarantee, in order.

Each test prints a single PASS/FAIL summary line straight to the
terminal (bypassing capture) so a plain `pytest -v` run ends with a
readable scorecard.  Tolerances are part of the guarantee and are
asserted exactly as stated in each test.

The full-scale training check (criterion 6) runs a 500-image,
2000-iteration experiment and dominates the suite's runtime; everything
else is property-based and quick.  Set BAN_ABLATION_FULL=1 to run the
ablation comparison (criterion 7) at the same full scale instead of the
reduced default.
"""

import filecmp
import os
import statistics
import sys
import time
from fractions import Fraction

import numpy as np

from ban.checkpoint import save_checkpoint
from ban.cli import main as cli_main
from ban.evaluation import (
    DetectionRecord,
    Protocol,
    average_precision,
    dataset_ground_truth,
    evaluate,
    run_detector,
)
from ban.geometry import (
    SIDE_KINDS,
    VERTEX_KINDS,
    Box,
    ContextKind,
    decode_box,
    encode_box,
    generate_context,
    nms,
)
from ban.head import (
    BanConfig,
    backward_sharing_check,
    build_head,
    head_forward_graph,
    subnet_kinds,
    zero_context_convs,
)
from ban.pooling import PoolMode, PoolSpec, psroi_pool_rois, roi_pool_rois, vote
from ban.rng import derive_seed
from ban.synthetic import SyntheticSpec, generate_dataset, load_dataset
from ban.tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    fully_connected,
    grad_check,
    parameter,
    relu,
    smooth_l1_rows,
    softmax_cross_entropy,
    weighted_sum,
)
from ban.training import SgdConfig, build_model, train


def announce(number: int, name: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    print(
        f"[acceptance {number}] {name}: {status} ({detail})",
        file=sys.__stdout__,
        flush=True,
    )


# --------------------------------------------------------------------
# 1. finite-difference gradient suite over every differentiable op
#
# Each check builds the op's inputs, draws a fixed random projection of
# the output once, and lets grad_check probe every input element with
# central differences.  The projection is drawn before grad_check so the
# scalar function is stable across perturbed evaluations.


def _fd_conv2d(gen):
    x = parameter(gen.standard_normal((1, 3, 6, 7)))
    w = parameter(gen.standard_normal((4, 3, 3, 3)) * 0.5)
    b = parameter(gen.standard_normal(4) * 0.1)
    proj = gen.standard_normal(conv2d(x, w, b).shape)
    return grad_check(lambda: weighted_sum(conv2d(x, w, b), proj), [x, w, b])


def _fd_relu(gen):
    raw = gen.standard_normal((5, 7))
    raw += np.where(raw >= 0, 0.05, -0.05)  # keep clear of the kink
    x = parameter(raw)
    proj = gen.standard_normal(x.shape)
    return grad_check(lambda: weighted_sum(relu(x), proj), [x])


def _fd_fully_connected(gen):
    x = parameter(gen.standard_normal((4, 6)))
    w = parameter(gen.standard_normal((6, 3)) * 0.3)
    b = parameter(gen.standard_normal(3) * 0.1)
    proj = gen.standard_normal((4, 3))
    return grad_check(
        lambda: weighted_sum(fully_connected(x, w, b), proj), [x, w, b]
    )


def _fd_concat(gen):
    parts = [parameter(gen.standard_normal((2, c, 3, 3))) for c in (1, 2, 3)]
    proj = gen.standard_normal((2, 6, 3, 3))
    return grad_check(lambda: weighted_sum(concat_channels(parts), proj), parts)


def _spread_features(gen, shape):
    # distinct, well-separated values so max-pool argmaxes cannot flip
    # under the finite-difference probe
    flat = gen.permutation(int(np.prod(shape))).astype(np.float64)
    return (flat * 0.01).reshape(shape)


def _rois_for(gen, h, w, count=2):
    corners = np.empty((count, 4))
    for i in range(count):
        x1 = gen.uniform(0, w - 3)
        y1 = gen.uniform(0, h - 3)
        corners[i] = (x1, y1, x1 + gen.uniform(1.5, w - x1), y1 + gen.uniform(1.5, h - y1))
    return corners


def _fd_roi_pool(gen):
    x = parameter(_spread_features(gen, (3, 8, 8)))
    corners = _rois_for(gen, 8, 8)
    spec = PoolSpec(k=2, spatial_scale=1.0, mode=PoolMode.ROI)
    proj = gen.standard_normal(roi_pool_rois(x, corners, spec).shape)
    return grad_check(
        lambda: weighted_sum(roi_pool_rois(x, corners, spec), proj), [x]
    )


def _fd_psroi_pool(gen):
    k, channels = 2, 3
    x = parameter(gen.standard_normal((channels * k * k, 8, 8)))
    corners = _rois_for(gen, 8, 8)
    spec = PoolSpec(k=k, spatial_scale=1.0, mode=PoolMode.PSROI)
    proj = gen.standard_normal(psroi_pool_rois(x, corners, spec).shape)
    return grad_check(
        lambda: weighted_sum(psroi_pool_rois(x, corners, spec), proj), [x]
    )


def _fd_vote(gen):
    k, channels = 3, 4
    x = parameter(gen.standard_normal((channels * k * k, 8, 8)))
    corners = _rois_for(gen, 8, 8)
    spec = PoolSpec(k=k, spatial_scale=1.0, mode=PoolMode.PSROI)
    proj = gen.standard_normal((2, channels))
    return grad_check(
        lambda: weighted_sum(vote(psroi_pool_rois(x, corners, spec)), proj), [x]
    )


def _fd_cross_entropy(gen):
    scores = parameter(gen.standard_normal((5, 4)))
    labels = gen.integers(0, 4, size=5)
    proj = gen.standard_normal(5)
    return grad_check(
        lambda: weighted_sum(softmax_cross_entropy(scores, labels), proj),
        [scores],
    )


def _fd_smooth_l1(gen):
    pred = parameter(gen.standard_normal((6, 4)))
    # keep |pred - target| clear of the quadratic/linear switch at 1
    magnitude = np.where(
        gen.uniform(size=(6, 4)) < 0.5,
        gen.uniform(0.1, 0.85, size=(6, 4)),
        gen.uniform(1.15, 2.5, size=(6, 4)),
    )
    target = pred.data - np.sign(gen.standard_normal((6, 4))) * magnitude
    weights = (gen.uniform(size=6) > 0.3).astype(np.float64)
    proj = gen.standard_normal(6)
    return grad_check(
        lambda: weighted_sum(smooth_l1_rows(pred, target, weights), proj),
        [pred],
    )


def _fd_full_head(gen):
    config = BanConfig(
        contexts=frozenset("B"), k=2, num_classes=1, trunk_channels=4
    )
    params = build_head(config, int(gen.integers(1 << 30)), in_channels=4)
    feats = parameter(gen.standard_normal((1, 4, 8, 8)))
    proposals = [Box(20, 24, 18, 14), Box(40, 30, 22, 26)]
    labels = [1, 0]
    targets = gen.standard_normal((2, 4)) * 0.4
    weights = np.array([1.0, 0.0])
    proj_cls = gen.standard_normal(2)
    proj_reg = gen.standard_normal(2)

    def loss():
        graph = head_forward_graph(
            params, feats, proposals, config, spatial_scale=0.125
        )
        cls_vec = softmax_cross_entropy(graph.class_scores, labels)
        reg_vec = smooth_l1_rows(graph.box_deltas, targets, weights)
        return add(
            weighted_sum(cls_vec, proj_cls), weighted_sum(reg_vec, proj_reg)
        )

    return grad_check(loss, list(params.values()) + [feats])


def test_criterion_1_gradient_suite():
    started = time.monotonic()
    checks = {
        "conv2d": _fd_conv2d,
        "relu": _fd_relu,
        "fully_connected": _fd_fully_connected,
        "concat_channels": _fd_concat,
        "roi_pool": _fd_roi_pool,
        "psroi_pool": _fd_psroi_pool,
        "vote": _fd_vote,
        "softmax_cross_entropy": _fd_cross_entropy,
        "smooth_l1": _fd_smooth_l1,
        "full_head": _fd_full_head,
    }
    seeds_per_op = 20
    worst = 0.0
    worst_op = ""
    for name, check in checks.items():
        for seed in range(seeds_per_op):
            err = check(np.random.default_rng(derive_seed(seed, name) % (1 << 32)))
            if err > worst:
                worst, worst_op = err, name
    elapsed = time.monotonic() - started
    ok = worst < 1e-4 and elapsed < 300.0
    announce(
        1,
        "gradient suite",
        ok,
        f"{len(checks)} ops x {seeds_per_op} seeds, max rel err {worst:.2e} "
        f"({worst_op}), {elapsed:.0f}s",
    )
    assert worst < 1e-4
    assert elapsed < 300.0


# --------------------------------------------------------------------
# 2. summed ensemble: per-branch gradient == aggregate gradient, bitwise


def test_criterion_2_gradient_sharing_bit_identical():
    rng = np.random.default_rng(20)
    families = ("S", "V", "B")
    checked = 0
    for case in range(100):
        picks = frozenset(f for f in families if rng.uniform() < 0.6)
        config = BanConfig(
            contexts=picks,
            k=int(rng.integers(1, 4)),
            num_classes=int(rng.integers(1, 5)),
            trunk_channels=int(rng.integers(4, 13)),
            shared_features=bool(rng.integers(2)),
        )
        in_channels = int(rng.integers(3, 7))
        params = build_head(config, int(rng.integers(1 << 30)), in_channels)
        h, w = int(rng.integers(6, 11)), int(rng.integers(6, 11))
        feats = Tensor(rng.standard_normal((1, in_channels, h, w)))
        proposal = Box(
            float(rng.uniform(8, 8 * w - 8)),
            float(rng.uniform(8, 8 * h - 8)),
            float(rng.uniform(8, 4 * w)),
            float(rng.uniform(8, 4 * h)),
        )
        report = backward_sharing_check(
            params, feats, proposal, config, rng_seed=case
        )
        for kind, grad in report.per_context.items():
            assert np.array_equal(grad, report.aggregate), (case, kind)
            checked += 1
    announce(
        2,
        "per-branch gradients bit-identical to aggregate",
        True,
        f"100 random configurations, {checked} branch comparisons",
    )


# --------------------------------------------------------------------
# 3. summed ensemble additivity: zeroed branch family == smaller model


def test_criterion_3_additivity_max_diff_zero():
    seed = 77
    feats = Tensor(np.random.default_rng(5).standard_normal((1, 4, 10, 12)))
    proposals = [Box(40, 36, 30, 26), Box(60, 50, 44, 38)]
    worst = 0.0
    for shared in (True, False):
        full_cfg = BanConfig(
            contexts=frozenset(("S", "V", "B")), k=2, num_classes=2,
            trunk_channels=6, shared_features=shared,
        )
        small_cfg = BanConfig(
            contexts=frozenset(("S", "B")), k=2, num_classes=2,
            trunk_channels=6, shared_features=shared,
        )
        full = build_head(full_cfg, seed, in_channels=4)
        small = build_head(small_cfg, seed, in_channels=4)
        for kind in VERTEX_KINDS:
            zero_context_convs(full, full_cfg, kind)
        g_full = head_forward_graph(full, feats, proposals, full_cfg)
        g_small = head_forward_graph(small, feats, proposals, small_cfg)
        for a, b in (
            (g_full.class_scores.data, g_small.class_scores.data),
            (g_full.box_deltas.data, g_small.box_deltas.data),
        ):
            worst = max(worst, float(np.max(np.abs(a - b))))
            assert np.array_equal(a, b)
    announce(
        3,
        "zeroed branch family equals smaller model",
        worst == 0.0,
        f"max output difference {worst}",
    )
    assert worst == 0.0


# --------------------------------------------------------------------
# 4. geometry: exact area ratios, equivariance, codec, NMS vs brute force


def _frac_iou(a, b):
    ax1, ay1, ax2, ay2 = (Fraction(v) for v in a)
    bx1, by1, bx2, by2 = (Fraction(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _brute_nms(corner_rows, scores, thresh: Fraction):
    order = sorted(range(len(corner_rows)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(_frac_iou(corner_rows[i], corner_rows[j]) <= thresh for j in kept):
            kept.append(i)
    return sorted(kept)


def test_criterion_4_geometry_suite():
    rng = np.random.default_rng(4)

    # exact area ratios on boxes whose sides are multiples of three,
    # where two thirds of the extent is exact in floating point
    for _ in range(50):
        w = 3.0 * float(rng.integers(1, 60))
        h = 3.0 * float(rng.integers(1, 60))
        box = Box(float(rng.uniform(-40, 200)), float(rng.uniform(-40, 200)), w, h)
        for kind in SIDE_KINDS:
            assert generate_context(box, kind).area() / box.area() == 2.0 / 3.0
        for kind in VERTEX_KINDS:
            assert generate_context(box, kind).area() / box.area() == 4.0 / 9.0
        assert (
            generate_context(box, ContextKind.IN_BOUNDARY).area() / box.area()
            == 0.25
        )
        assert (
            generate_context(box, ContextKind.OUT_BOUNDARY).area() / box.area()
            == 4.0
        )

    # translation and scale equivariance
    kinds = [k for k in ContextKind if k is not ContextKind.BASE]
    for _ in range(200):
        box = Box(
            float(rng.uniform(-50, 150)),
            float(rng.uniform(-50, 150)),
            float(rng.uniform(0.5, 90)),
            float(rng.uniform(0.5, 90)),
        )
        dx, dy = rng.uniform(-70, 70, size=2)
        s = float(rng.uniform(0.1, 8.0))
        for kind in kinds:
            ctx = generate_context(box, kind)
            moved = generate_context(
                Box(box.cx + dx, box.cy + dy, box.w, box.h), kind
            )
            assert abs(moved.cx - (ctx.cx + dx)) <= 1e-9
            assert abs(moved.cy - (ctx.cy + dy)) <= 1e-9
            assert abs(moved.w - ctx.w) <= 1e-9 and abs(moved.h - ctx.h) <= 1e-9
            scaled = generate_context(
                Box(box.cx * s, box.cy * s, box.w * s, box.h * s), kind
            )
            assert abs(scaled.cx - ctx.cx * s) <= 1e-9 * max(1.0, abs(ctx.cx * s))
            assert abs(scaled.cy - ctx.cy * s) <= 1e-9 * max(1.0, abs(ctx.cy * s))
            assert abs(scaled.w - ctx.w * s) <= 1e-9 * max(1.0, ctx.w * s)
            assert abs(scaled.h - ctx.h * s) <= 1e-9 * max(1.0, ctx.h * s)

    # encode/decode round trip
    for _ in range(500):
        gt = Box(*(float(v) for v in rng.uniform(10, 100, size=4)))
        anchor = Box(*(float(v) for v in rng.uniform(10, 100, size=4)))
        back = decode_box(encode_box(gt, anchor), anchor)
        for got, want in zip(back.corners(), gt.corners()):
            assert abs(got - want) <= 1e-9 * max(1.0, abs(want))

    # NMS against an exact-arithmetic brute force on an integer grid
    # (integer coordinates force overlap ties, quantized scores force
    # score ties, so ordering rules are exercised too)
    instances = 0
    for case in range(1000):
        n = int(rng.integers(0, 9))
        boxes = []
        corner_rows = []
        for _ in range(n):
            x1 = int(rng.integers(0, 12))
            y1 = int(rng.integers(0, 12))
            bw = int(rng.integers(2, 10))
            bh = int(rng.integers(2, 10))
            boxes.append(Box.from_corners(x1, y1, x1 + bw, y1 + bh))
            corner_rows.append((x1, y1, x1 + bw, y1 + bh))
        scores = [float(rng.integers(0, 5)) / 4.0 for _ in range(n)]
        got = sorted(nms(boxes, scores, 0.3))
        want = _brute_nms(corner_rows, scores, Fraction(3, 10))
        assert got == want, case
        instances += 1

    announce(
        4,
        "geometry suite",
        True,
        f"ratios exact, equivariance/codec at 1e-9, NMS == brute force "
        f"on {instances} instances",
    )


# --------------------------------------------------------------------
# 5. average precision against an exact rational oracle


def _oracle_flags(dets, gts, class_id, thresh: Fraction):
    order = sorted(
        (i for i, d in enumerate(dets) if d.class_id == class_id),
        key=lambda i: (-dets[i].score, i),
    )
    matched = set()
    flags = []
    for i in order:
        gt_list = gts.get(dets[i].image_id, [])
        best, best_j = Fraction(-1), None
        for j, (cls, g) in enumerate(gt_list):
            if cls != class_id or (dets[i].image_id, j) in matched:
                continue
            v = _frac_iou(dets[i].box.corners(), g.corners())
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= thresh:
            matched.add((dets[i].image_id, best_j))
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _oracle_ap(dets, gts, class_id, thresh, protocol):
    npos = sum(1 for pairs in gts.values() for cls, _ in pairs if cls == class_id)
    if npos == 0:
        return 0.0
    flags = _oracle_flags(dets, gts, class_id, Fraction(thresh))
    points = []
    tp = 0
    for rank, flag in enumerate(flags, start=1):
        tp += int(flag)
        points.append((Fraction(tp, npos), Fraction(tp, rank)))
    if protocol is Protocol.VOC07:
        total = Fraction(0)
        for step in range(11):
            level = Fraction(step, 10)
            best = max((p for r, p in points if r >= level), default=Fraction(0))
            total += best
        return float(total / 11)
    total = Fraction(0)
    for recall in sorted({r for r, _ in points}):
        prev = max((r for r, _ in points if r < recall), default=Fraction(0))
        envelope = max(p for r, p in points if r >= recall)
        total += (recall - prev) * envelope
    return float(total)


def _random_ap_instance(rng, n_det, n_gt):
    dets = []
    gts = {"img": []}
    for _ in range(n_gt):
        x1 = int(rng.integers(0, 6)) * 4
        y1 = int(rng.integers(0, 6)) * 4
        s = int(rng.integers(1, 5)) * 4
        gts["img"].append((1, Box.from_corners(x1, y1, x1 + s, y1 + s)))
    for _ in range(n_det):
        x1 = int(rng.integers(0, 6)) * 4
        y1 = int(rng.integers(0, 6)) * 4
        s = int(rng.integers(1, 5)) * 4
        dets.append(
            DetectionRecord(
                "img",
                1,
                float(rng.integers(0, 6)) / 5.0,
                Box.from_corners(x1, y1, x1 + s, y1 + s),
            )
        )
    return dets, gts


def test_criterion_5_average_precision_oracle():
    rng = np.random.default_rng(55)

    # every detection/ground-truth count combination up to 5 x 3, many
    # draws each, compared for exact float equality
    exact_cases = 0
    for n_det in range(6):
        for n_gt in range(4):
            for _ in range(40):
                dets, gts = _random_ap_instance(rng, n_det, n_gt)
                for protocol in (Protocol.VOC07, Protocol.AREA):
                    got = average_precision(dets, gts, 1, 0.5, protocol)
                    want = _oracle_ap(dets, gts, 1, 0.5, protocol)
                    assert got == want, (n_det, n_gt, protocol)
                    exact_cases += 1

    # larger random instances at 1e-9
    for case in range(10):
        dets, gts = _random_ap_instance(rng, 50, 20)
        for protocol in (Protocol.VOC07, Protocol.AREA):
            got = average_precision(dets, gts, 1, 0.5, protocol)
            want = _oracle_ap(dets, gts, 1, 0.5, protocol)
            assert abs(got - want) <= 1e-9, case

    # worked example: ranked [TP, FP, TP] over two ground truths
    g1 = Box(10, 10, 8, 8)
    g2 = Box(40, 40, 8, 8)
    gts = {"img": [(1, g1), (1, g2)]}
    dets = [
        DetectionRecord("img", 1, 0.9, g1),
        DetectionRecord("img", 1, 0.8, Box(70, 70, 8, 8)),
        DetectionRecord("img", 1, 0.7, g2),
    ]
    worked = average_precision(dets, gts, 1, 0.5, Protocol.AREA)
    assert worked == float(Fraction(5, 6))

    announce(
        5,
        "average precision oracle",
        True,
        f"{exact_cases} micro instances exact, 10 larger at 1e-9, "
        f"worked example = 5/6",
    )


# --------------------------------------------------------------------
# 6. full training run at the shipped scale


def _window_mean(rows, lo, hi):
    return sum(r.loss_total for r in rows[lo:hi]) / (hi - lo)


def test_criterion_6_desk_scale_training(tmp_path):
    started = time.monotonic()
    seed = 42
    train_spec = SyntheticSpec(num_images=500, rng_seed=derive_seed(seed, "train"))
    test_spec = SyntheticSpec(num_images=100, rng_seed=derive_seed(seed, "test"))
    generate_dataset(train_spec, tmp_path / "train")
    generate_dataset(test_spec, tmp_path / "test")
    train_set = load_dataset(tmp_path / "train")
    test_set = load_dataset(tmp_path / "test")

    config = BanConfig()  # all three context families, k=5, summing head
    sgd = SgdConfig()  # 2000 iterations, lr 1e-3 -> 1e-4 at 1400
    result = train(train_set, config, sgd, rng_seed=seed)

    first = _window_mean(result.loss_rows, 0, 100)
    last = _window_mean(result.loss_rows, sgd.iterations - 100, sgd.iterations)

    dets = run_detector(result.params, test_set, config, rng_seed=seed)
    report = evaluate(dets, dataset_ground_truth(test_set), class_ids=[1, 2, 3])
    minutes = (time.monotonic() - started) / 60.0

    ok = last < first and report.map50 >= 0.80 and minutes < 30.0
    announce(
        6,
        "desk-scale training",
        ok,
        f"loss {first:.3f} -> {last:.3f}, test mAP@0.5 {report.map50:.4f}, "
        f"{minutes:.1f} min",
    )
    assert last < first, "smoothed loss must decrease"
    assert report.map50 >= 0.80
    assert minutes < 30.0


# --------------------------------------------------------------------
# 7. ablation direction (soft: reported, never hard-failed)


def test_criterion_7_ablation_direction(tmp_path):
    full_scale = os.environ.get("BAN_ABLATION_FULL") == "1"
    if full_scale:
        spec_args = dict(num_images=500)
        test_images = 100
        sgd = SgdConfig()
        model = dict(k=5, trunk_channels=1024)
        rois = 300
    else:
        spec_args = dict(
            num_images=80, image_size=(64, 64), min_size=12, max_size=28
        )
        test_images = 25
        sgd = SgdConfig(
            iterations=250, schedule=((175, 1e-4),), rois_per_image=96,
            ohem_keep=48,
        )
        model = dict(k=3, trunk_channels=96)
        rois = 96

    scores = {"none": [], "full": []}
    for seed in (0, 1, 2):
        generate_dataset(
            SyntheticSpec(rng_seed=derive_seed(seed, "train"), **spec_args),
            tmp_path / f"train{seed}",
        )
        generate_dataset(
            SyntheticSpec(
                rng_seed=derive_seed(seed, "test"),
                **{**spec_args, "num_images": test_images},
            ),
            tmp_path / f"test{seed}",
        )
        train_set = load_dataset(tmp_path / f"train{seed}")
        test_set = load_dataset(tmp_path / f"test{seed}")
        for label, contexts in (
            ("none", frozenset()),
            ("full", frozenset(("S", "V", "B"))),
        ):
            config = BanConfig(contexts=contexts, **model)
            result = train(train_set, config, sgd, rng_seed=seed)
            dets = run_detector(
                result.params, test_set, config, rng_seed=seed,
                rois_per_image=rois,
            )
            report = evaluate(
                dets, dataset_ground_truth(test_set), class_ids=[1, 2, 3]
            )
            scores[label].append(report.map50)

    med_none = statistics.median(scores["none"])
    med_full = statistics.median(scores["full"])
    ok = med_full >= med_none - 0.02
    scale = "full" if full_scale else "reduced"
    announce(
        7,
        "ablation direction (soft)",
        ok,
        f"{scale} scale, median mAP@0.5 full {med_full:.4f} vs "
        f"no-context {med_none:.4f}; large-scale reference: no-context "
        f"79.54 vs full 80.75 (+1.21 mAP@0.5), 61.95 vs 64.66 "
        f"(+2.71 mAP@0.7)",
    )
    if not ok:
        print(
            "[acceptance 7] direction not reproduced at this scale; "
            "reported without failing the suite",
            file=sys.__stdout__,
            flush=True,
        )


# --------------------------------------------------------------------
# 8. contribution tables emitted by the analyze command


def test_criterion_8_contribution_tables(tmp_path):
    cfg_path = tmp_path / "cfg.txt"
    cfg_path.write_text(
        f"seed = 6\ndata_dir = {tmp_path / 'data'}\nk = 2\n"
        "trunk_channels = 8\ntrain_images = 2\ntest_images = 3\n"
        "image_size = 48x48\nmin_size = 12\nmax_size = 20\n"
        "rois_per_image = 16\nohem_keep = 8\n"
    )
    assert cli_main(
        ["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "data")]
    ) == 0
    params = build_model(BanConfig(k=2, trunk_channels=8), rng_seed=6)
    save_checkpoint(tmp_path / "model.ckpt", params)
    assert cli_main(
        [
            "analyze",
            "--config", str(cfg_path),
            "--checkpoint", str(tmp_path / "model.ckpt"),
            "--out", str(tmp_path / "analyze"),
        ]
    ) == 0

    expected_header = [
        "", "Base", "Up", "Down", "Left", "Right",
        "NW", "SE", "NE", "SW", "In", "Out",
    ]
    worst = 0.0
    rows_seen = 0
    for name in (
        "contribution_classification.csv",
        "contribution_localization.csv",
    ):
        lines = (tmp_path / "analyze" / name).read_text().splitlines()
        assert lines[0].split(",") == expected_header, name
        assert len(lines) > 1, name
        for line in lines[1:]:
            shares = [float(v) for v in line.split(",")[1:]]
            worst = max(worst, abs(sum(shares) - 1.0))
            rows_seen += 1
    ok = worst <= 1e-9
    announce(
        8,
        "contribution tables",
        ok,
        f"{rows_seen} rows across both tables, worst row-sum deviation "
        f"{worst:.1e}, headers Base/Up/Down/Left/Right/NW/SE/NE/SW/In/Out",
    )
    assert worst <= 1e-9


# --------------------------------------------------------------------
# 9. bitwise determinism of the train and gen-data commands


def test_criterion_9_determinism(tmp_path):
    cfg_path = tmp_path / "cfg.txt"
    cfg_path.write_text(
        f"seed = 3\ndata_dir = {tmp_path / 'data1'}\ncontexts = B\nk = 2\n"
        "trunk_channels = 8\niterations = 3\nimages_per_batch = 1\n"
        "rois_per_image = 12\nohem_keep = 6\ntrain_images = 3\n"
        "test_images = 2\nimage_size = 48x48\nmin_size = 12\n"
        "max_size = 20\n"
    )
    for out in ("data1", "data2"):
        assert cli_main(
            ["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / out)]
        ) == 0
    identical_files = 0
    for split in ("train", "test"):
        a = tmp_path / "data1" / split
        b = tmp_path / "data2" / split
        names = [p.name for p in sorted(a.iterdir())]
        match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
        assert mismatch == [] and errors == [], split
        identical_files += len(match)

    for out in ("run1", "run2"):
        assert cli_main(
            ["train", "--config", str(cfg_path), "--out", str(tmp_path / out)]
        ) == 0
    ckpt_a = (tmp_path / "run1" / "checkpoint.ckpt").read_bytes()
    ckpt_b = (tmp_path / "run2" / "checkpoint.ckpt").read_bytes()
    loss_a = (tmp_path / "run1" / "loss.csv").read_bytes()
    loss_b = (tmp_path / "run2" / "loss.csv").read_bytes()
    ok = ckpt_a == ckpt_b and loss_a == loss_b
    announce(
        9,
        "determinism",
        ok,
        f"{identical_files} dataset files and {len(ckpt_a)}-byte checkpoints "
        f"bit-identical across repeat runs",
    )
    assert ckpt_a == ckpt_b
    assert loss_a == loss_b
