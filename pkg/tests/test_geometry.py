import math

import cv2
import numpy as np
import pytest

from looptrack.errors import EmptyTargetError
from looptrack.geometry import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    AnchorConfig,
    Box,
    BoxDelta,
    LabelCaps,
    RotatedBox,
    assign_anchor_labels,
    box_from_mask,
    decode,
    decode_many,
    encode,
    encode_many,
    iou,
    iou_many,
    make_anchor_grid,
)


def _brute_iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def _random_box(rng, lo=1.0, hi=100.0) -> Box:
    return Box(rng.uniform(0, 200), rng.uniform(0, 200), rng.uniform(lo, hi), rng.uniform(lo, hi))


# --- Boxes ---


def test_box_rejects_non_positive_size():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 1)
    with pytest.raises(ValueError):
        Box(0, 0, 1, float("nan"))


def test_from_xywh_uses_top_left_corner():
    assert Box.from_xywh(0, 0, 4, 2) == Box(2, 1, 4, 2)
    assert Box(2, 1, 4, 2).to_xywh() == (0, 0, 4, 2)


def test_rotated_box_bounds_and_area():
    diamond = RotatedBox.from_flat([5, 0, 10, 5, 5, 10, 0, 5])
    assert diamond.area == pytest.approx(50.0)
    assert diamond.bounds() == Box(5, 5, 10, 10)


def test_rotated_box_rejects_degenerate():
    with pytest.raises(ValueError):
        RotatedBox.from_flat([0, 0, 1, 1, 2, 2, 3, 3])


# --- IoU ---


def test_iou_half_shifted_squares_is_one_third():
    assert iou(Box(1, 1, 2, 2), Box(2, 1, 2, 2)) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_properties():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a, b = _random_box(rng), _random_box(rng)
        value = iou(a, b)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(iou(b, a), abs=1e-12)
        assert value == pytest.approx(_brute_iou(a, b), abs=1e-12)
        assert iou(a, a) == pytest.approx(1.0)


def test_iou_disjoint_is_zero():
    assert iou(Box(0, 0, 2, 2), Box(10, 10, 2, 2)) == 0.0


def test_iou_many_matches_scalar():
    rng = np.random.default_rng(1)
    boxes = [_random_box(rng) for _ in range(50)]
    target = _random_box(rng)
    many = iou_many(np.stack([b.as_array() for b in boxes]), target)
    assert many == pytest.approx([iou(b, target) for b in boxes], abs=1e-12)


# --- Deltas ---


def test_encode_known_values():
    delta = encode(Box(10, 10, 4, 4), Box(12, 10, 8, 4))
    assert delta.as_array() == pytest.approx([0.5, 0.0, math.log(2.0), 0.0], abs=1e-12)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        anchor = _random_box(rng, 8, 128)
        box = Box(anchor.cx + rng.uniform(-40, 40), anchor.cy + rng.uniform(-40, 40),
                  anchor.w * math.exp(rng.uniform(-2, 2)), anchor.h * math.exp(rng.uniform(-2, 2)))
        decoded, clamped = decode(anchor, encode(anchor, box))
        assert not clamped
        assert decoded.as_array() == pytest.approx(box.as_array(), abs=1e-6)


def test_decode_clamps_log_scale():
    anchor = Box(0, 0, 2, 2)
    box, clamped = decode(anchor, BoxDelta(0, 0, 10.0, -10.0), bound=4.0)
    assert clamped
    assert box.w == pytest.approx(2 * math.exp(4))
    assert box.h == pytest.approx(2 * math.exp(-4))


def test_vectorized_forms_match_scalar():
    rng = np.random.default_rng(4)
    anchors = np.stack([_random_box(rng, 8, 64).as_array() for _ in range(20)])
    box = Box(50, 60, 30, 20)
    deltas = encode_many(anchors, box)
    for row, anchor in zip(deltas, anchors):
        assert row == pytest.approx(encode(Box.from_array(anchor), box).as_array())
    boxes, clamped = decode_many(anchors, deltas)
    assert not clamped.any()
    assert boxes == pytest.approx(np.tile(box.as_array(), (20, 1)))


# --- Anchors ---


def test_anchor_grid_layout():
    grid = make_anchor_grid()
    assert grid.anchors.shape == (5, 25, 25, 4)
    assert len(grid) == 5 * 25 * 25
    assert grid.position_center(12, 12) == (127.5, 127.5)
    assert grid.position_center(0, 1)[0] - grid.position_center(0, 0)[0] == 8.0
    for a, ratio in enumerate(grid.config.ratios):
        w, h = grid.anchors[a, 0, 0, 2:]
        assert h / w == pytest.approx(ratio)
        assert w * h == pytest.approx(64.0 ** 2)


def test_flat_index_order():
    grid = make_anchor_grid()
    s = grid.size
    index = 3 * s * s + 7 * s + 11
    assert grid.unravel(index) == (3, 7, 11)
    box = grid.box(index)
    assert (box.cx, box.cy) == grid.position_center(7, 11)
    assert box.as_array() == pytest.approx(grid.anchors[3, 7, 11])


def test_single_position_single_anchor():
    grid = make_anchor_grid(AnchorConfig(ratios=(1.0,), score_size=1))
    assert len(grid) == 1
    assert grid.box(0) == Box(127.5, 127.5, 64.0, 64.0)


def test_anchor_config_parses_ratio_strings():
    config = AnchorConfig(ratios="0.5, 1, 2")
    assert config.ratios == (0.5, 1.0, 2.0)
    with pytest.raises(ValueError):
        AnchorConfig(ratios="1,-2")


# --- Labels ---


def test_labels_match_brute_force_thresholds():
    grid = make_anchor_grid()
    rng = np.random.default_rng(5)
    for _ in range(20):
        gt = Box(rng.uniform(80, 175), rng.uniform(80, 175), rng.uniform(30, 120), rng.uniform(30, 120))
        labels = assign_anchor_labels(grid, gt, caps=None)
        for index in range(0, len(grid), 7):
            overlap = _brute_iou(grid.box(index), gt)
            if overlap > 0.6:
                assert labels.labels[index] == POSITIVE
            elif overlap < 0.3 and not labels.promoted:
                assert labels.labels[index] == NEGATIVE
            elif not labels.promoted:
                assert labels.labels[index] == IGNORE


def test_positive_targets_encode_gt():
    grid = make_anchor_grid()
    gt = grid.box(2 * 625 + 12 * 25 + 12)
    labels = assign_anchor_labels(grid, gt, caps=None)
    assert not labels.promoted
    for index in labels.positives:
        assert labels.targets[index] == pytest.approx(encode(grid.box(index), gt).as_array())


def test_best_anchor_promoted_when_none_positive():
    grid = make_anchor_grid()
    gt = Box(127.5, 127.5, 4, 4)
    labels = assign_anchor_labels(grid, gt, caps=None)
    assert labels.promoted
    assert len(labels.positives) == 1
    assert labels.positives[0] == int(np.argmax(iou_many(grid.flat, gt)))


def test_label_caps():
    grid = make_anchor_grid()
    gt = Box(127.5, 127.5, 64, 64)
    labels = assign_anchor_labels(grid, gt, LabelCaps(max_positives=2, max_total=10), np.random.default_rng(0))
    assert 1 <= len(labels.positives) <= 2
    assert labels.num_labeled <= 10


# --- Boxes from masks ---


def test_single_pixel_mask_box():
    mask = np.zeros((5, 6), dtype=bool)
    mask[2, 3] = True
    assert box_from_mask(mask) == Box(3.5, 2.5, 1.0, 1.0)


def test_empty_mask_raises():
    with pytest.raises(EmptyTargetError):
        box_from_mask(np.zeros((4, 4), dtype=bool))


def test_min_area_of_rectangle_mask():
    mask = np.zeros((20, 20), dtype=bool)
    mask[3:9, 4:14] = True
    rotated = box_from_mask(mask, "min_area")
    assert rotated.area == pytest.approx(60.0, abs=1e-3)
    assert rotated.bounds().as_array() == pytest.approx(box_from_mask(mask).as_array(), abs=1e-3)


def test_min_area_covers_rotated_mask():
    mask = np.zeros((64, 64), dtype=np.uint8)
    cv2.ellipse(mask, (32, 32), (20, 8), 30, 0, 360, 1, -1)
    rotated = box_from_mask(mask, "min_area")
    contour = rotated.as_array().astype(np.float32).reshape(-1, 1, 2)
    for r, c in zip(*np.nonzero(mask)):
        assert cv2.pointPolygonTest(contour, (c + 0.5, r + 0.5), True) >= -1e-3
    assert rotated.area < box_from_mask(mask).area


def _swept_min_area(mask: np.ndarray, step_deg: float = 0.5) -> float:
    rows, cols = np.nonzero(mask)
    corners = np.concatenate([
        np.stack([cols + dx, rows + dy], axis=1) for dx in (0.0, 1.0) for dy in (0.0, 1.0)
    ]).astype(np.float64)
    best = math.inf
    for theta in np.deg2rad(np.arange(0.0, 90.0, step_deg)):
        c, s = math.cos(theta), math.sin(theta)
        u = corners[:, 0] * c + corners[:, 1] * s
        v = -corners[:, 0] * s + corners[:, 1] * c
        best = min(best, (u.max() - u.min()) * (v.max() - v.min()))
    return best


def test_min_area_of_diagonal_strip_matches_rotation_sweep():
    rows, cols = np.indices((40, 40))
    mask = np.abs(rows - cols) <= 2
    rotated = box_from_mask(mask, "min_area")
    assert rotated.area == pytest.approx(_swept_min_area(mask), rel=1e-3)
    assert rotated.area < box_from_mask(mask).area
