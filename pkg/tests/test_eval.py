import numpy as np
import pytest

from reldet.core import BoxGeometry, Detection, ValidationError
from reldet.evaluate import (
    GroundTruthBox,
    average_precision,
    evaluate_detections,
    tracks_to_ground_truth,
)
from reldet.synth import TrackTruth


def det(frame, class_id, score, box, source=0):
    return Detection(frame_index=frame, class_id=class_id, score=score,
                     box=box, source_proposal_id=source)


def gt(frame, class_id, box):
    return GroundTruthBox(frame_index=frame, class_id=class_id, box=box)


BOX_A = BoxGeometry(0, 0, 10, 10)
BOX_B = BoxGeometry(100, 100, 130, 130)
BOX_FAR = BoxGeometry(400, 400, 420, 420)


class TestAveragePrecision:
    def test_hand_enumerated_fp_then_tp(self):
        """One GT; a higher-scored false positive before the true positive."""
        recalls = np.array([0.0, 1.0])
        precisions = np.array([0.0, 0.5])
        assert average_precision(recalls, precisions) == pytest.approx(0.5)

    def test_perfect_curve(self):
        recalls = np.array([0.5, 1.0])
        precisions = np.array([1.0, 1.0])
        assert average_precision(recalls, precisions) == pytest.approx(1.0)

    def test_empty(self):
        assert average_precision(np.array([]), np.array([])) == 0.0


class TestEvaluateDetections:
    def test_perfect_detector(self):
        truths = [gt(0, 1, BOX_A), gt(0, 2, BOX_B), gt(1, 1, BOX_A)]
        dets = [det(t.frame_index, t.class_id, 0.9, t.box) for t in truths]
        result = evaluate_detections(dets, truths)
        assert result.mean_ap == pytest.approx(1.0)
        assert all(c.ap == pytest.approx(1.0) for c in result.per_class.values())

    def test_no_detections(self):
        truths = [gt(0, 1, BOX_A), gt(0, 2, BOX_B)]
        result = evaluate_detections([], truths)
        assert result.mean_ap == 0.0

    def test_one_tp_one_higher_fp(self):
        """AP = 0.5 under all-point interpolation (hand-enumerated PR curve)."""
        truths = [gt(0, 1, BOX_A)]
        dets = [
            det(0, 1, 0.9, BOX_FAR, source=0),  # false positive, ranked first
            det(0, 1, 0.5, BOX_A, source=1),    # true positive
        ]
        result = evaluate_detections(dets, truths)
        assert result.per_class[1].ap == pytest.approx(0.5)

    def test_duplicate_detection_counts_as_fp(self):
        truths = [gt(0, 1, BOX_A)]
        dets = [det(0, 1, 0.9, BOX_A, source=0), det(0, 1, 0.8, BOX_A, source=1)]
        result = evaluate_detections(dets, truths)
        # second hit on an already-matched gt is a false positive
        assert result.per_class[1].ap == pytest.approx(1.0)
        recalls = result.per_class[1].recalls
        assert recalls[-1] == 1.0

    def test_iou_threshold_gates_matching(self):
        truths = [gt(0, 1, BOX_A)]
        shifted = BoxGeometry(6, 0, 16, 10)  # IoU ~ 0.25 with BOX_A
        assert evaluate_detections([det(0, 1, 0.9, shifted)], truths,
                                   iou_threshold=0.5).mean_ap == 0.0
        assert evaluate_detections([det(0, 1, 0.9, shifted)], truths,
                                   iou_threshold=0.2).mean_ap == pytest.approx(1.0)

    def test_strict_class_mismatch(self):
        truths = [gt(0, 1, BOX_A)]
        with pytest.raises(ValidationError, match="without ground truth"):
            evaluate_detections([det(0, 2, 0.9, BOX_A)], truths)

    def test_configured_range_ignores_gt_free_classes(self):
        truths = [gt(0, 1, BOX_A)]
        dets = [det(0, 1, 0.9, BOX_A), det(0, 2, 0.9, BOX_FAR)]
        result = evaluate_detections(dets, truths, num_classes=3)
        assert set(result.per_class) == {1}
        assert result.mean_ap == pytest.approx(1.0)

    def test_configured_range_rejects_out_of_range(self):
        truths = [gt(0, 1, BOX_A)]
        with pytest.raises(ValidationError, match="outside the configured range"):
            evaluate_detections([det(0, 5, 0.9, BOX_A)], truths, num_classes=3)

    def test_needs_ground_truth(self):
        with pytest.raises(ValidationError):
            evaluate_detections([], [])

    def test_mean_over_gt_classes_only(self):
        truths = [gt(0, 1, BOX_A), gt(0, 3, BOX_B)]
        dets = [det(0, 1, 0.9, BOX_A)]
        result = evaluate_detections(dets, truths)
        assert set(result.per_class) == {1, 3}
        assert result.mean_ap == pytest.approx(0.5)


class TestTracksToGroundTruth:
    def test_flattening(self):
        track = TrackTruth(track_id=0, class_id=2, frames=(0, 1),
                           boxes=(BOX_A, BOX_B))
        flat = tracks_to_ground_truth([track])
        assert len(flat) == 2
        assert flat[0] == gt(0, 2, BOX_A)
        assert flat[1] == gt(1, 2, BOX_B)
