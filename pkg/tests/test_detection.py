import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap_by_hand, polygon_iou_monte_carlo
from stfusion.checks import numeric_gradient, relative_error
from stfusion.detection import (
    DetectionBox, DetectionHead, average_precision, classify, decode_boxes, decode_cells, detect, evaluate_ap,
    focal_loss, nms, polygon_area, read_records, regress, rotated_iou, smooth_l1, write_records,
)
from stfusion.errors import ConfigError
from stfusion.grid import FeatureGrid, GridSpec, LinearHead, Pose


# -- heads and decoding -------------------------------------------------

def test_classify_examples():
    g = FeatureGrid(np.zeros((3, 3, 7)))
    assert np.array_equal(classify(g, LinearHead(np.zeros(7))), np.full((3, 3), 0.5))
    data = np.full((3, 3, 7), 0.0)
    data[..., 0] = -5.0
    data[1, 1, 0] = 5.0
    conf = classify(FeatureGrid(data), LinearHead.one_hot(7, 0))
    assert conf[1, 1] == pytest.approx(1 / (1 + math.exp(-5)), abs=1e-15)
    assert np.all(np.delete(conf.reshape(-1), 4) <= 0.007)


def test_regress_width_mismatch_and_analytic_head():
    with pytest.raises(ConfigError):
        regress(FeatureGrid(np.zeros((2, 2, 7))), LinearHead(np.zeros((7, 5))))
    with pytest.raises(ConfigError):
        DetectionHead.analytic(6)
    data = np.random.default_rng(0).normal(size=(2, 2, 9))
    head = DetectionHead.analytic(9)
    assert np.array_equal(regress(FeatureGrid(data), head.regressor), data[..., 1:7])


def test_zero_readout_decodes_unit_box_at_cell_center():
    spec = GridSpec(4, 4, 7, 1.0)
    regs = np.zeros((4, 4, 6))
    regs[..., 5] = 0.0
    cells = decode_cells(regs, spec, Pose())
    centers = spec.cell_centers()
    assert np.array_equal(cells[..., :2], centers)
    assert np.all(cells[..., 2:4] == 1.0) and np.all(cells[..., 4] == 0.0)


def test_heading_from_sin_cos():
    spec = GridSpec(1, 1, 7, 1.0)
    regs = np.array([[[0, 0, 0, 0, 0.0, -1.0]]])
    assert decode_cells(regs, spec, Pose())[0, 0, 4] == pytest.approx(math.pi)


def test_decode_matches_hand_arithmetic():
    rng = np.random.default_rng(3)
    spec = GridSpec(2, 3, 7, 0.5)
    pose = Pose(4.0, -1.0, yaw=0.4)
    regs = rng.normal(size=(2, 3, 6))
    got = decode_cells(regs, spec, pose)
    ox, oy = spec.origin
    for h in range(2):
        for w in range(3):
            lx, ly = ox + w * 0.5, oy + h * 0.5
            cx = 4.0 + math.cos(0.4) * lx - math.sin(0.4) * ly
            cy = -1.0 + math.sin(0.4) * lx + math.cos(0.4) * ly
            r = regs[h, w]
            want = (cx + r[0], cy + r[1], math.exp(r[2]), math.exp(r[3]), math.atan2(r[4], r[5]))
            assert np.allclose(got[h, w], want, atol=1e-12)


def test_decode_boxes_examples():
    spec = GridSpec(3, 3, 7, 1.0)
    regs = np.zeros((3, 3, 6))
    regs[..., 5] = 1.0
    assert decode_boxes(np.full((3, 3), 0.5), regs, spec, Pose(), score_thr=0.6) == []
    conf = np.zeros((3, 3))
    conf[0, 0] = conf[2, 2] = 0.9
    boxes = decode_boxes(conf, regs, spec, Pose(), 0.6, 0.1)
    assert [(b.x, b.y) for b in boxes] == [(-1.0, -1.0), (1.0, 1.0)]
    with pytest.raises(ConfigError):
        decode_boxes(conf, regs, spec, Pose(), 1.5)


def test_detect_recovers_rasterized_box():
    spec = GridSpec(16, 16, 7, 1.0)
    data = np.zeros((16, 16, 7))
    data[..., 0] = -5.0
    centers = spec.cell_centers()
    box = DetectionBox(1.2, -0.7, 4.4, 1.9, 0.3)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = box.x - centers[..., 0], box.y - centers[..., 1]
    cover = (np.abs(c * dx + s * dy) <= 2.2) & (np.abs(-s * dx + c * dy) <= 0.95)
    data[cover] = np.stack([np.full_like(dx, 5.0), dx, dy, np.full_like(dx, math.log(4.4)),
                            np.full_like(dx, math.log(1.9)), np.full_like(dx, s), np.full_like(dx, c)], -1)[cover]
    dets = detect(FeatureGrid(data), DetectionHead.analytic(7), Pose())
    assert len(dets) == 1 and rotated_iou(dets[0], box) > 0.999


# -- geometry and NMS ---------------------------------------------------

def test_box_validation_and_corners():
    with pytest.raises(ConfigError):
        DetectionBox(0, 0, 0, 1, 0)
    with pytest.raises(ConfigError):
        DetectionBox(0, 0, 1, 1, 0, score=1.5)
    b = DetectionBox(0, 0, 4, 2, 0)
    assert polygon_area(b.corners()) == pytest.approx(8.0)


def test_identical_boxes_leave_one_survivor():
    b = DetectionBox(1, 2, 4, 2, 0.3, 0.8)
    assert rotated_iou(b, b) == pytest.approx(1.0)
    assert nms([b, b], 0.5) == [b]


@pytest.mark.parametrize("seed", range(12))
def test_rotated_iou_matches_area_sampling(seed):
    rng = np.random.default_rng(seed)
    a = DetectionBox(0.0, 0.0, *rng.uniform(1, 5, 2), rng.uniform(-math.pi, math.pi))
    b = DetectionBox(*rng.uniform(-2, 2, 2), *rng.uniform(1, 5, 2), rng.uniform(-math.pi, math.pi))
    assert rotated_iou(a, b) == pytest.approx(polygon_iou_monte_carlo(a, b), abs=5e-3)
    assert rotated_iou(a, b) == pytest.approx(rotated_iou(b, a), abs=1e-12)


def test_rotated_iou_against_shapely():
    shapely = pytest.importorskip("shapely.geometry")
    rng = np.random.default_rng(99)
    for _ in range(100):
        a = DetectionBox(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-3, 3))
        b = DetectionBox(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-3, 3))
        pa, pb = shapely.Polygon(a.corners()), shapely.Polygon(b.corners())
        want = pa.intersection(pb).area / pa.union(pb).area
        assert rotated_iou(a, b) == pytest.approx(want, abs=1e-9)


def test_nms_with_pairwise_overlaps():
    a = DetectionBox(0.0, 0.0, 4.0, 2.0, 0.0, 0.9)
    b = DetectionBox(4 * 0.1 / 1.9, 0.0, 4.0, 2.0, 0.0, 0.8)  # IoU 0.9 with a
    c = DetectionBox(-4 * 0.9 / 1.1, 0.0, 4.0, 2.0, 0.0, 0.7)  # IoU 0.1 with a
    assert polygon_iou_monte_carlo(a, b) == pytest.approx(0.9, abs=5e-3)
    assert polygon_iou_monte_carlo(a, c) == pytest.approx(0.1, abs=5e-3)
    assert polygon_iou_monte_carlo(b, c) < 0.1
    assert nms([a, b, c], 0.5) == [a, c]
    with pytest.raises(ConfigError):
        nms([a], 0.0)


@given(st.permutations(list(range(6))))
@settings(max_examples=30, deadline=None)
def test_nms_is_order_independent(perm):
    rng = np.random.default_rng(4)
    boxes = [DetectionBox(*rng.uniform(-2, 2, 2), 3.0, 1.5, rng.uniform(-1, 1), round(rng.uniform(0.5, 1), 3))
             for _ in range(6)]
    assert nms([boxes[i] for i in perm], 0.3) == nms(boxes, 0.3)


# -- losses -------------------------------------------------------------

def test_smooth_l1_examples():
    x = np.array([0.5, -2.0, 3.0])
    loss, grad = smooth_l1(x, x)
    assert loss == 0.0 and not np.any(grad)
    beta = 0.7
    quad = 0.5 * beta * beta / beta
    lin = beta - 0.5 * beta
    assert quad == pytest.approx(lin) == pytest.approx(0.5 * beta)
    assert smooth_l1(np.array([beta]), np.array([0.0]), beta)[0] == pytest.approx(0.5 * beta)
    with pytest.raises(ConfigError):
        smooth_l1(x, x, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_smooth_l1_gradient(seed):
    rng = np.random.default_rng(seed)
    target = rng.normal(size=20)
    pred = target + rng.normal(0, 1.5, 20)
    pred = np.where(np.abs(np.abs(pred - target) - 1.0) < 1e-3, pred + 0.01, pred)  # stay off the kink
    f = lambda p: smooth_l1(p, target)[0]  # noqa: E731
    assert relative_error(smooth_l1(pred, target)[1], numeric_gradient(f, pred)) <= 1e-6


def test_focal_loss_examples():
    p = np.array([0.2, 0.6, 0.9])
    t = np.array([1.0, 0.0, 1.0])
    ce = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert focal_loss(p, t, alpha=0.5, gamma=0.0)[0] == pytest.approx(0.5 * ce.sum(), rel=1e-14)
    assert focal_loss(np.array([1 - 1e-7]), np.array([1.0]))[0] == pytest.approx(0.0, abs=1e-12)
    loss, grad = focal_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.isfinite(loss) and not np.any(grad)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
def test_focal_loss_gradient(gamma):
    rng = np.random.default_rng(int(gamma * 10))
    p = rng.uniform(0.05, 0.95, 30)
    t = (rng.random(30) < 0.5).astype(float)
    f = lambda q: focal_loss(q, t, 0.25, gamma)[0]  # noqa: E731
    assert relative_error(focal_loss(p, t, 0.25, gamma)[1], numeric_gradient(f, p)) <= 1e-6


# -- average precision --------------------------------------------------

def _gts():
    return [DetectionBox(0, 0, 4, 2, 0), DetectionBox(10, 0, 4, 2, 0.5), DetectionBox(0, 10, 4, 2, -0.5)]


def test_perfect_and_empty_detections():
    gts = _gts()
    dets = [DetectionBox(b.x, b.y, b.length, b.width, b.yaw, 1.0) for b in gts]
    for thr in (0.5, 0.7, 0.95):
        assert average_precision(dets, gts, thr) == pytest.approx(1.0)
    assert average_precision([], gts, 0.5) == 0.0
    assert average_precision(dets, [], 0.5) is None


def test_ap_with_false_positive_ranked_second():
    gts = _gts()
    dets = [
        DetectionBox(0, 0, 4, 2, 0, 0.9),
        DetectionBox(30, 30, 4, 2, 0, 0.8),  # false positive
        DetectionBox(10, 0, 4, 2, 0.5, 0.7),
        DetectionBox(0, 10, 4, 2, -0.5, 0.6),
    ]
    want = ap_by_hand([True, False, True, True], 3)
    assert want == pytest.approx(5 / 6)
    assert average_precision(dets, gts, 0.5) == pytest.approx(want, abs=1e-12)


@given(st.lists(st.floats(0.01, 0.99), min_size=5, max_size=5, unique=True))
@settings(max_examples=50, deadline=None)
def test_ap_invariant_under_monotone_score_transform(scores):
    rng = np.random.default_rng(0)
    gts = [DetectionBox(float(i) * 8, 0, 4, 2, 0) for i in range(4)]
    geo = [(i * 8 + rng.uniform(-1.5, 1.5), rng.uniform(-0.5, 0.5)) for i in range(5)]
    dets = [DetectionBox(x, y, 4, 2, 0, s) for (x, y), s in zip(geo, scores)]
    squashed = [DetectionBox(d.x, d.y, 4, 2, 0, d.score**3) for d in dets]
    assert average_precision(dets, gts, 0.5) == average_precision(squashed, gts, 0.5)


def test_range_buckets():
    gts = [DetectionBox(10, 0, 4, 2, 0), DetectionBox(40, 0, 4, 2, 0), DetectionBox(100, 0, 4, 2, 0)]
    dets = [DetectionBox(10, 0, 4, 2, 0, 0.9), DetectionBox(100, 0, 4, 2, 0, 0.8)]
    r = evaluate_ap(dets, gts)
    assert r.buckets["short"]["ap_05"] == 1.0
    assert r.buckets["middle"]["ap_05"] == 0.0
    assert r.buckets["long"]["ap_05"] == 1.0
    assert r.ap_05 == pytest.approx(2 / 3)
    assert evaluate_ap([], [], (0, 0)).buckets["short"]["ap_05"] is None


def test_records_round_trip(tmp_path):
    boxes = {0: [DetectionBox(1.5, -2.0, 4.0, 2.0, 0.1, 0.9)], 3: [DetectionBox(0.1, 0.2, 3.0, 1.0, -1.0, 0.61)]}
    write_records(tmp_path / "d.jsonl", boxes)
    assert read_records(tmp_path / "d.jsonl") == boxes
