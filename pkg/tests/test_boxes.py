import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msfacedet.boxes import (
    clip_box,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    iou,
    iou_matrix,
    nms,
    project_roi,
)

box_strategy = st.tuples(
    st.floats(0, 90), st.floats(0, 90), st.floats(1, 40), st.floats(1, 40)
).map(lambda t: np.array([t[0], t[1], t[0] + t[2], t[1] + t[3]]))


def pixel_count_iou(a, b):
    """Rasterized oracle: count integer-grid pixels covered by each box."""
    def cells(box):
        x1, y1, x2, y2 = (int(v) for v in box)
        return {(x, y) for x in range(x1, x2) for y in range(y1, y2)}

    ca, cb = cells(a), cells(b)
    inter = len(ca & cb)
    union = len(ca | cb)
    return inter / union


class TestIoU:
    def test_identical(self):
        b = np.array([3.0, 4.0, 10.0, 12.0])
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(np.array([0, 0, 5, 5]), np.array([6, 6, 9, 9])) == 0.0

    def test_half_overlap_matches_pixel_oracle(self):
        a = np.array([0.0, 0.0, 10.0, 10.0])
        b = np.array([5.0, 0.0, 15.0, 10.0])
        assert abs(iou(a, b) - 50.0 / 150.0) < 1e-12
        assert abs(iou(a, b) - pixel_count_iou(a, b)) < 1e-12

    def test_random_integer_boxes_match_pixel_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.integers(0, 20, size=2)
            b = rng.integers(1, 15, size=2)
            box_a = np.array([a[0], a[1], a[0] + b[0], a[1] + b[1]], dtype=float)
            c = rng.integers(0, 20, size=2)
            d = rng.integers(1, 15, size=2)
            box_b = np.array([c[0], c[1], c[0] + d[0], c[1] + d[1]], dtype=float)
            assert abs(iou(box_a, box_b) - pixel_count_iou(box_a, box_b)) < 1e-12

    @given(a=box_strategy, b=box_strategy)
    @settings(max_examples=100, deadline=None)
    def test_symmetry_and_bounds(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    def test_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(0, 50, size=(6, 2))
        wh = rng.uniform(1, 30, size=(6, 2))
        boxes = np.hstack([xy, xy + wh])
        m = iou_matrix(boxes[:3], boxes[3:])
        for i in range(3):
            for j in range(3):
                assert abs(m[i, j] - iou(boxes[i], boxes[3 + j])) < 1e-12


class TestDeltas:
    def test_identity(self):
        b = np.array([2.0, 3.0, 8.0, 9.0])
        assert np.allclose(encode_deltas(b, b), 0.0)

    def test_double_width(self):
        anchor = np.array([0.0, 0.0, 10.0, 10.0])
        target = np.array([-5.0, 0.0, 15.0, 10.0])
        d = encode_deltas(target, anchor)
        assert np.allclose(d, [0.0, 0.0, np.log(2.0), 0.0])
        assert np.allclose(decode_deltas(d, anchor), target)

    def test_decode_hand_value(self):
        out = decode_deltas(np.array([0.0, 0.0, np.log(2.0), 0.0]), np.array([0.0, 0.0, 10.0, 10.0]))
        assert np.allclose(out, [-5.0, 0.0, 15.0, 10.0])

    def test_extreme_width_clamped_finite(self):
        out = decode_deltas(np.array([0.0, 0.0, 50.0, 50.0]), np.array([0.0, 0.0, 10.0, 10.0]))
        assert np.all(np.isfinite(out))
        assert out[2] - out[0] == pytest.approx(10_000.0)

    @given(t=box_strategy, a=box_strategy)
    @settings(max_examples=100, deadline=None)
    def test_round_trip(self, t, a):
        assert np.max(np.abs(decode_deltas(encode_deltas(t, a), a) - t)) < 1e-9

    def test_round_trip_many_random_pairs(self):
        rng = np.random.default_rng(2)
        xy = rng.uniform(0, 100, size=(10_000, 2, 2))
        wh = rng.uniform(0.5, 60, size=(10_000, 2, 2))
        boxes = np.concatenate([xy, xy + wh], axis=-1)
        t, a = boxes[:, 0], boxes[:, 1]
        back = decode_deltas(encode_deltas(t, a), a)
        assert np.max(np.abs(back - t)) < 1e-9


class TestClip:
    def test_interior_unchanged(self):
        b = np.array([5.0, 6.0, 20.0, 30.0])
        assert np.array_equal(clip_box(b, 100, 100), b)

    def test_partial_clip(self):
        assert np.array_equal(clip_box(np.array([-5.0, -5.0, 5.0, 5.0]), 100, 100), [0, 0, 5, 5])

    def test_outside_dropped(self):
        assert clip_box(np.array([-10.0, -10.0, -2.0, -2.0]), 100, 100) is None

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(3)
        boxes = rng.uniform(-30, 130, size=(50, 4))
        boxes[:, 2:] = boxes[:, :2] + rng.uniform(0.1, 50, size=(50, 2))
        clipped, keep = clip_boxes(boxes, 100, 100)
        for i in range(50):
            single = clip_box(boxes[i], 100, 100)
            if single is None:
                assert not keep[i]
            else:
                assert keep[i]
                assert np.allclose(clipped[i], single)


def reference_nms(boxes, scores, thresh):
    """Plain O(n^2) greedy reference."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= thresh for j in kept):
            kept.append(i)
    return kept


class TestNms:
    def test_single_box(self):
        assert nms(np.array([[0, 0, 5, 5.0]]), np.array([0.3]), 0.5) == [0]

    def test_hand_example(self):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]], dtype=float)
        scores = np.array([0.9, 0.8, 0.7])
        assert abs(iou(boxes[0], boxes[1]) - 81.0 / 119.0) < 1e-12
        assert nms(boxes, scores, 0.5) == [0, 2]

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(1, 201))
            xy = rng.uniform(0, 80, size=(n, 2))
            wh = rng.uniform(2, 40, size=(n, 2))
            boxes = np.hstack([xy, xy + wh])
            scores = rng.random(n)
            thresh = float(rng.uniform(0.2, 0.7))
            assert nms(boxes, scores, thresh) == reference_nms(boxes, scores, thresh)

    def test_kept_set_is_an_antichain(self):
        rng = np.random.default_rng(5)
        xy = rng.uniform(0, 60, size=(80, 2))
        wh = rng.uniform(2, 40, size=(80, 2))
        boxes = np.hstack([xy, xy + wh])
        scores = rng.random(80)
        kept = nms(boxes, scores, 0.4)
        for i in kept:
            for j in kept:
                if i != j:
                    assert iou(boxes[i], boxes[j]) <= 0.4

    def test_score_ties_break_by_index(self):
        boxes = np.array([[0, 0, 10, 10], [20, 20, 30, 30], [0, 0, 10, 10.0]])
        scores = np.array([0.5, 0.5, 0.5])
        assert nms(boxes, scores, 0.3) == [0, 1]


class TestProjectRoi:
    def test_64px_roi_at_stride_16_gives_4x4(self):
        x1, y1, x2, y2 = project_roi(np.array([0.0, 0.0, 64.0, 64.0]), 16)
        assert (x2 - x1, y2 - y1) == (4, 4)

    def test_12px_roi_at_stride_16_clamps_to_one_cell(self):
        x1, y1, x2, y2 = project_roi(np.array([50.0, 50.0, 62.0, 62.0]), 16)
        assert (x2 - x1, y2 - y1) == (1, 1)

    def test_stride_one_is_ceil_expanded_rect(self):
        x1, y1, x2, y2 = project_roi(np.array([3.2, 4.7, 10.1, 12.0]), 1)
        assert (x1, y1, x2, y2) == (3, 4, 11, 12)
