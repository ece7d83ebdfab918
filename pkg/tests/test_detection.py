import numpy as np
import pytest

from msfacedet.boxes import clip_boxes, decode_deltas, iou_matrix, nms
from msfacedet.detector import (
    DetTrainConfig,
    assign_detection_targets,
    postprocess_detections,
)
from msfacedet.fusion import FeatureTap, make_l2norm
from msfacedet.model import ModelConfig, MultiScaleDetector
from msfacedet.rpn import AnchorConfig
from msfacedet.fusion import FusionConfig
from msfacedet.tensor import softmax


def tiny_model(seed=0, mode="multi"):
    return MultiScaleDetector(
        ModelConfig(
            stage_channels=(2, 2, 3, 3, 3),
            rpn_channels=4,
            head_width=8,
            fusion=FusionConfig(shrink_channels=3, roi_pool_size=3),
            anchors=AnchorConfig(scales=(1.0,), ratios=(1.0, 1.3)),
            fusion_mode=mode,
        ),
        seed=seed,
    )


class TestDetectionForward:
    def test_shapes_one_proposal(self):
        model = tiny_model()
        taps, _ = model.backbone_forward(np.random.default_rng(0).uniform(size=(1, 1, 32, 32)))
        (logits, deltas), _ = model.roi_forward(taps, np.array([[4.0, 4.0, 20.0, 24.0]]))
        assert logits.shape == (1, 2)
        assert deltas.shape == (1, 4)

    def test_identical_proposals_identical_outputs(self):
        model = tiny_model(1)
        taps, _ = model.backbone_forward(np.random.default_rng(1).uniform(size=(1, 1, 32, 32)))
        rois = np.array([[2.0, 3.0, 18.0, 22.0], [2.0, 3.0, 18.0, 22.0]])
        (logits, deltas), _ = model.roi_forward(taps, rois)
        assert np.array_equal(logits[0], logits[1])
        assert np.array_equal(deltas[0], deltas[1])

    def test_batch_equals_per_proposal(self):
        model = tiny_model(2)
        taps, _ = model.backbone_forward(np.random.default_rng(2).uniform(size=(1, 1, 32, 32)))
        rois = np.array([[1.0, 1.0, 15.0, 17.0], [8.0, 4.0, 30.0, 28.0], [12.0, 12.0, 16.0, 16.0]])
        (batch_lg, batch_dl), _ = model.roi_forward(taps, rois)
        for i, roi in enumerate(rois):
            (lg, dl), _ = model.roi_forward(taps, roi.reshape(1, 4))
            assert np.allclose(lg[0], batch_lg[i])
            assert np.allclose(dl[0], batch_dl[i])

    def test_empty_proposals_empty_outputs(self):
        model = tiny_model(3)
        taps, _ = model.backbone_forward(np.random.default_rng(3).uniform(size=(1, 1, 32, 32)))
        (logits, deltas), cache = model.roi_forward(taps, np.zeros((0, 4)))
        assert logits.shape == (0, 2)
        assert deltas.shape == (0, 4)
        assert cache is None


class TestAssignDetectionTargets:
    def _gt(self):
        return np.array([[10.0, 10.0, 40.0, 40.0]])

    def test_gt_proposal_is_face_with_zero_deltas(self):
        gt = self._gt()
        rois = np.vstack([np.array([[60.0, 60.0, 90.0, 90.0]]), gt])
        t = assign_detection_targets(rois, gt, np.random.default_rng(0))
        gt_pos = np.flatnonzero(t.roi_indices == 1)
        assert t.labels[gt_pos] == 1
        assert np.allclose(t.target_deltas[gt_pos], 0.0)

    def test_band_rules(self):
        gt = self._gt()
        near = np.array([12.0, 12.0, 40.0, 40.0])  # IoU ~0.87 -> face
        mid = np.array([25.0, 25.0, 55.0, 55.0])  # IoU ~0.14 -> background
        far = np.array([80.0, 80.0, 110.0, 110.0])  # IoU 0 -> discarded
        rois = np.vstack([near, mid, far, gt[0]])
        assert iou_matrix(near, gt)[0, 0] >= 0.5
        assert 0.1 <= iou_matrix(mid, gt)[0, 0] < 0.5
        t = assign_detection_targets(rois, gt, np.random.default_rng(1))
        picked = dict(zip(t.roi_indices.tolist(), t.labels.tolist()))
        assert picked[0] == 1
        assert picked[1] == 0
        assert 2 not in picked
        assert picked[3] == 1

    def test_background_fallback_from_discarded(self):
        gt = self._gt()
        rois = np.vstack([np.array([[100.0, 100.0, 120.0, 120.0]]), gt])  # IoU 0 only
        t = assign_detection_targets(rois, gt, np.random.default_rng(2))
        assert (t.labels == 0).sum() >= 1  # filled from the discarded pool

    def test_caps(self):
        rng = np.random.default_rng(3)
        gt = self._gt()
        xy = rng.uniform(0, 90, size=(400, 2))
        rois = np.vstack([np.hstack([xy, xy + 30]), gt])
        cfg = DetTrainConfig()
        t = assign_detection_targets(rois, gt, rng, cfg)
        assert t.roi_indices.size <= cfg.batch_size
        assert t.n_pos <= cfg.max_positives


class TestPostprocess:
    def _inputs(self, seed, n=40):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 80, size=(n, 2))
        wh = rng.uniform(5, 30, size=(n, 2))
        rois = np.hstack([xy, xy + wh])
        logits = rng.standard_normal((n, 2))
        deltas = 0.1 * rng.standard_normal((n, 4))
        return logits, deltas, rois

    def test_all_below_threshold_empty(self):
        logits, deltas, rois = self._inputs(0)
        logits[:, 1] = logits[:, 0] - 10.0  # face prob ~ 0
        assert postprocess_detections(logits, deltas, rois, 0.5, 0.3, 100, 100) == []

    def test_dominant_proposal_zero_deltas(self):
        rois = np.array([[10.0, 10.0, 30.0, 30.0], [50.0, 50.0, 70.0, 70.0]])
        logits = np.array([[0.0, 8.0], [0.0, -8.0]])
        dets = postprocess_detections(logits, np.zeros((2, 4)), rois, 0.5, 0.3, 100, 100)
        assert len(dets) == 1
        assert np.allclose(dets[0].box, rois[0])

    def test_matches_compositional_reference(self):
        for seed in range(20):
            logits, deltas, rois = self._inputs(seed)
            dets = postprocess_detections(logits, deltas, rois, 0.3, 0.4, 100, 100)
            scores = softmax(logits)[:, 1]
            boxes, keep = clip_boxes(decode_deltas(deltas, rois), 100, 100)
            keep &= scores > 0.3
            idx = np.flatnonzero(keep)
            order = idx[np.argsort(-scores[idx], kind="stable")]
            kept = nms(boxes[order], scores[order], 0.4)
            assert len(dets) == len(kept)
            for d, i in zip(dets, kept):
                assert np.allclose(d.box, boxes[order[i]])
                assert d.score == pytest.approx(scores[order[i]])

    def test_scores_strictly_exceed_threshold_and_antichain(self):
        logits, deltas, rois = self._inputs(7, n=80)
        dets = postprocess_detections(logits, deltas, rois, 0.4, 0.35, 100, 100)
        assert all(d.score > 0.4 for d in dets)
        boxes = np.array([d.box for d in dets])
        if len(boxes) > 1:
            m = iou_matrix(boxes, boxes)
            np.fill_diagonal(m, 0.0)
            assert m.max() <= 0.35
