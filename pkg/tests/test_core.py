import numpy as np
import pytest

from reldet.core import (
    BoxGeometry,
    Detection,
    Proposal,
    ValidationError,
    iou,
    nms,
    sample_top_k,
    sample_top_ratio,
)

from conftest import random_box


def make_det(score, box, source_id, frame=0, class_id=1):
    return Detection(frame_index=frame, class_id=class_id, score=score,
                     box=box, source_proposal_id=source_id)


def make_proposal(pid, objectness, frame=0):
    return Proposal(id=pid, frame_index=frame,
                    box=BoxGeometry(0, 0, 10, 10),
                    feature=np.zeros(4), objectness=objectness)


class TestBoxGeometry:
    def test_rejects_degenerate(self):
        with pytest.raises(ValidationError):
            BoxGeometry(0, 0, 0, 10)
        with pytest.raises(ValidationError):
            BoxGeometry(5, 0, 4, 10)
        with pytest.raises(ValidationError):
            BoxGeometry(0, 0, float("nan"), 10)

    def test_derived_quantities(self):
        box = BoxGeometry(2.0, 3.0, 6.0, 11.0)
        assert box.width == 4.0 and box.height == 8.0
        assert box.center == (4.0, 7.0)
        assert box.area == 32.0


class TestProposal:
    def test_feature_is_readonly_copy(self):
        raw = np.ones(4)
        p = make_proposal(0, 0.5)
        assert not p.feature.flags.writeable
        q = Proposal(id=1, frame_index=0, box=BoxGeometry(0, 0, 1, 1),
                     feature=raw, objectness=0.5)
        raw[0] = 99.0
        assert q.feature[0] == 1.0

    def test_objectness_bounds(self):
        with pytest.raises(ValidationError):
            make_proposal(0, 1.5)
        with pytest.raises(ValidationError):
            make_proposal(0, -0.1)


def rasterized_iou(a: BoxGeometry, b: BoxGeometry, step: float = 0.05) -> float:
    """Pixel-count oracle: fraction of fine-grid cells covered by both boxes."""
    x_lo = min(a.x1, b.x1)
    x_hi = max(a.x2, b.x2)
    y_lo = min(a.y1, b.y1)
    y_hi = max(a.y2, b.y2)
    xs = np.arange(x_lo + step / 2, x_hi, step)
    ys = np.arange(y_lo + step / 2, y_hi, step)
    gx, gy = np.meshgrid(xs, ys)
    in_a = (gx > a.x1) & (gx < a.x2) & (gy > a.y1) & (gy < a.y2)
    in_b = (gx > b.x1) & (gx < b.x2) & (gy > b.y1) & (gy < b.y2)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union


class TestIou:
    def test_identity(self):
        box = BoxGeometry(0, 0, 10, 10)
        assert iou(box, box) == 1.0

    def test_disjoint(self):
        assert iou(BoxGeometry(0, 0, 10, 10), BoxGeometry(20, 20, 30, 30)) == 0.0

    def test_third_overlap_against_pixel_oracle(self):
        a = BoxGeometry(0, 0, 10, 10)
        b = BoxGeometry(5, 0, 15, 10)
        expected = rasterized_iou(a, b)
        assert expected == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_symmetry_and_self_unity_random(self, rng):
        for _ in range(200):
            a = random_box(rng)
            b = random_box(rng)
            assert iou(a, b) == iou(b, a)
            assert iou(a, a) == 1.0
            assert 0.0 <= iou(a, b) <= 1.0


def greedy_nms_oracle(dets, threshold):
    """Independent suppression: rescan the whole remaining list every step."""
    remaining = sorted(dets, key=lambda d: (-d.score, d.source_proposal_id))
    kept = []
    while remaining:
        best = remaining[0]
        kept.append(best)
        remaining = [d for d in remaining[1:] if iou(best.box, d.box) <= threshold]
    return kept


class TestNms:
    def test_duplicate_suppressed(self):
        box = BoxGeometry(0, 0, 10, 10)
        kept = nms([make_det(0.9, box, 0), make_det(0.8, box, 1)], 0.5)
        assert [d.score for d in kept] == [0.9]

    def test_disjoint_kept_in_score_order(self):
        a = make_det(0.3, BoxGeometry(0, 0, 10, 10), 0)
        b = make_det(0.7, BoxGeometry(50, 50, 60, 60), 1)
        kept = nms([a, b], 0.5)
        assert [d.score for d in kept] == [0.7, 0.3]

    def test_matches_rescan_oracle(self, rng):
        for trial in range(20):
            dets = [make_det(float(rng.uniform(0, 1)), random_box(rng, span=120.0), i)
                    for i in range(10)]
            kept = nms(dets, 0.5)
            oracle = greedy_nms_oracle(dets, 0.5)
            assert kept == oracle

    def test_retained_pairs_below_threshold(self, rng):
        dets = [make_det(float(rng.uniform(0, 1)), random_box(rng, span=100.0), i)
                for i in range(15)]
        kept = nms(dets, 0.4)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert iou(a.box, b.box) <= 0.4

    def test_tie_breaks_toward_lower_source_id(self):
        box = BoxGeometry(0, 0, 10, 10)
        kept = nms([make_det(0.5, box, 7), make_det(0.5, box, 3)], 0.5)
        assert [d.source_proposal_id for d in kept] == [3]

    def test_mixed_frames_rejected(self):
        box = BoxGeometry(0, 0, 10, 10)
        with pytest.raises(ValidationError):
            nms([make_det(0.5, box, 0, frame=0), make_det(0.5, box, 1, frame=1)], 0.5)

    def test_empty(self):
        assert nms([], 0.5) == []


class TestSampling:
    def test_top_k_ordering(self):
        scores = (0.9, 0.1, 0.8, 0.7, 0.2)
        proposals = [make_proposal(i, s) for i, s in enumerate(scores)]
        picked = sample_top_k(proposals, 3)
        assert [p.id for p in picked] == [0, 2, 3]

    def test_top_k_zero_and_saturation(self):
        proposals = [make_proposal(i, 0.1 * (i + 1)) for i in range(4)]
        assert sample_top_k(proposals, 0) == []
        assert [p.id for p in sample_top_k(proposals, 99)] == [3, 2, 1, 0]

    def test_top_k_idempotent(self, rng):
        proposals = [make_proposal(i, float(rng.uniform(0, 1))) for i in range(20)]
        once = sample_top_k(proposals, 7)
        assert sample_top_k(once, 7) == once

    def test_top_k_tie_by_lower_id(self):
        proposals = [make_proposal(5, 0.5), make_proposal(2, 0.5), make_proposal(9, 0.5)]
        assert [p.id for p in sample_top_k(proposals, 2)] == [2, 5]

    def test_ratio_twenty_percent_of_300(self, rng):
        pool = [make_proposal(i, float(rng.uniform(0, 1))) for i in range(300)]
        picked = sample_top_ratio(pool, 20.0)
        assert len(picked) == 60
        floor = min(p.objectness for p in picked)
        assert all(p.objectness <= floor for p in pool if p not in picked)

    def test_ratio_ceiling(self):
        pool = [make_proposal(i, 0.5) for i in range(3)]
        assert len(sample_top_ratio(pool, 10.0)) == 1

    def test_ratio_full_is_reordering(self, rng):
        pool = [make_proposal(i, float(rng.uniform(0, 1))) for i in range(17)]
        picked = sample_top_ratio(pool, 100.0)
        assert sorted(p.id for p in picked) == sorted(p.id for p in pool)

    def test_ratio_empty_pool(self):
        assert sample_top_ratio([], 50.0) == []

    def test_ratio_domain(self):
        with pytest.raises(ValidationError):
            sample_top_ratio([make_proposal(0, 0.5)], 0.0)
        with pytest.raises(ValidationError):
            sample_top_ratio([make_proposal(0, 0.5)], 101.0)
