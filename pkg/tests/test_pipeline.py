import numpy as np
import pytest

from reldet.core import BoxGeometry, ValidationError
from reldet.model import init_model_params
from reldet.pipeline import (
    FrameBuffer,
    PipelineConfig,
    RetainedWeights,
    assemble_pools,
    decode_box,
    detect_frame,
    run_video,
)
from reldet.synth import ScenarioSpec, desk_dims, generate_scenario

from conftest import random_proposals

DIMS = desk_dims()


def desk_config(**overrides) -> PipelineConfig:
    base = dict(temporal_range=2, top_k=8, advanced_ratio=25.0,
                num_reference=300, num_classes=3)
    base.update(overrides)
    return PipelineConfig(**base)


def frame_proposals(rng, frame, count, id_offset):
    return random_proposals(rng, count, DIMS.d_model, frame=frame, id_offset=id_offset)


def make_video(rng, num_frames, per_frame=6):
    frames = []
    next_id = 0
    for t in range(num_frames):
        frames.append(frame_proposals(rng, t, per_frame, next_id))
        next_id += per_frame
    return frames


def desk_model(seed=0):
    return init_model_params(seed, DIMS, 3, advanced_ratio=25.0)


class TestPipelineConfig:
    def test_full_scale_defaults(self):
        config = PipelineConfig()
        assert config.temporal_range == 18
        assert config.top_k == 75
        assert config.advanced_ratio == 20.0
        assert config.num_reference == 300
        assert config.nms_threshold == 0.5
        assert config.score_threshold == 0.05
        assert config.window_capacity == 37

    def test_validation(self):
        with pytest.raises(ValidationError):
            PipelineConfig(temporal_range=-1)
        with pytest.raises(ValidationError):
            PipelineConfig(top_k=0)
        with pytest.raises(ValidationError):
            PipelineConfig(advanced_ratio=0.0)


class TestFrameBuffer:
    def test_first_frame(self, rng):
        buffer = FrameBuffer(capacity=5, sample_k=3)
        buffer.ingest(0, frame_proposals(rng, 0, 4, 0))
        assert len(buffer) == 1 and 0 in buffer

    def test_eviction_keeps_capacity(self, rng):
        capacity = 5  # 2T+1 with T=2
        buffer = FrameBuffer(capacity=capacity, sample_k=3)
        next_id = 0
        for t in range(capacity + 1):
            buffer.ingest(t, frame_proposals(rng, t, 3, next_id))
            next_id += 3
            assert len(buffer) <= capacity
        assert 0 not in buffer
        assert buffer.frames() == [1, 2, 3, 4, 5]

    def test_empty_frame_stored(self):
        buffer = FrameBuffer(capacity=3, sample_k=2)
        buffer.ingest(0, [])
        assert 0 in buffer
        assert buffer.full_set(0) == [] and buffer.sampled_set(0) == []

    def test_non_sequential_rejected(self, rng):
        buffer = FrameBuffer(capacity=3, sample_k=2)
        buffer.ingest(0, frame_proposals(rng, 0, 2, 0))
        with pytest.raises(ValidationError):
            buffer.ingest(2, frame_proposals(rng, 2, 2, 10))

    def test_wrong_frame_index_rejected(self, rng):
        buffer = FrameBuffer(capacity=3, sample_k=2)
        with pytest.raises(ValidationError):
            buffer.ingest(0, frame_proposals(rng, 1, 2, 0))

    def test_sample_is_top_k(self, rng):
        buffer = FrameBuffer(capacity=3, sample_k=2)
        proposals = frame_proposals(rng, 0, 6, 0)
        buffer.ingest(0, proposals)
        sampled = buffer.sampled_set(0)
        assert len(sampled) == 2
        threshold = min(p.objectness for p in sampled)
        others = [p for p in proposals if p.id not in {q.id for q in sampled}]
        assert all(p.objectness <= threshold for p in others)


class TestAssemblePools:
    def test_full_window_size(self, rng):
        config = desk_config(top_k=4)
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        frames = make_video(rng, 5, per_frame=6)
        for t, proposals in enumerate(frames):
            buffer.ingest(t, proposals)
        refs, pool = assemble_pools(buffer, 2, config)
        assert len(pool) == config.window_capacity * config.top_k  # (2T+1) * K
        assert [p.id for p in refs] != []

    def test_boundary_clipping(self, rng):
        config = desk_config(top_k=4)
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        frames = make_video(rng, 3, per_frame=5)
        for t, proposals in enumerate(frames):
            buffer.ingest(t, proposals)
        _, pool = assemble_pools(buffer, 0, config)
        assert {p.frame_index for p in pool} == {0, 1, 2}

    def test_reference_frame_supports_itself(self, rng):
        config = desk_config(top_k=4)
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        buffer.ingest(0, [])
        buffer.ingest(1, frame_proposals(rng, 1, 5, 0))
        buffer.ingest(2, [])
        refs, pool = assemble_pools(buffer, 1, config)
        assert {p.frame_index for p in pool} == {1}
        assert len(pool) == 4

    def test_missing_frame_rejected(self, rng):
        config = desk_config()
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        with pytest.raises(ValidationError):
            assemble_pools(buffer, 3, config)

    def test_reference_cap(self, rng):
        config = desk_config(num_reference=3)
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        buffer.ingest(0, frame_proposals(rng, 0, 10, 0))
        refs, _ = assemble_pools(buffer, 0, config)
        assert len(refs) == 3


class TestDecodeBox:
    def test_zero_deltas_identity(self):
        box = BoxGeometry(10, 20, 30, 60)
        assert decode_box(box, np.zeros(4)) == box

    def test_log_space_parameterization(self):
        box = BoxGeometry(0, 0, 10, 10)
        decoded = decode_box(box, np.array([0.5, 0.0, np.log(2.0), 0.0]))
        assert decoded.center[0] == pytest.approx(10.0)
        assert decoded.width == pytest.approx(20.0)
        assert decoded.height == pytest.approx(10.0)


class TestDetectFrame:
    def test_class_probabilities_on_simplex(self, rng):
        model = desk_model()
        config = desk_config()
        scenario = generate_scenario(ScenarioSpec(num_frames=5))
        frames = scenario.support_frames()
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        for t, proposals in enumerate(frames):
            buffer.ingest(t, proposals)
        refs, _ = assemble_pools(buffer, 2, config)
        features = np.stack([p.feature for p in refs])
        probs = model.head.class_probabilities(features)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_regression_keeps_proposal_boxes(self, rng):
        from dataclasses import replace as dc_replace
        model = desk_model()
        head = dc_replace(
            model.head,
            reg_weight=np.zeros_like(model.head.reg_weight),
            reg_bias=np.zeros_like(model.head.reg_bias),
        )
        config = desk_config(score_threshold=0.0)
        frames = make_video(rng, 3, per_frame=4)
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        for t, proposals in enumerate(frames):
            buffer.ingest(t, proposals)
        detections, _ = detect_frame(buffer, 1, model.basic, model.advanced,
                                     head, config)
        boxes = {p.id: p.box for p in frames[1]}
        assert detections
        for det in detections:
            assert det.box == boxes[det.source_proposal_id]

    def test_threshold_saturation(self, rng):
        model = desk_model()
        config = desk_config(score_threshold=1.0)
        frames = make_video(rng, 3, per_frame=4)
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        for t, proposals in enumerate(frames):
            buffer.ingest(t, proposals)
        detections, _ = detect_frame(buffer, 1, model.basic, model.advanced,
                                     model.head, config)
        assert detections == []

    def test_empty_frame_yields_nothing(self, rng):
        model = desk_model()
        config = desk_config()
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        buffer.ingest(0, [])
        detections, retained = detect_frame(buffer, 0, model.basic, model.advanced,
                                            model.head, config)
        assert detections == [] and retained is None

    def test_retained_weights_labels(self, rng):
        model = desk_model()
        config = desk_config()
        frames = make_video(rng, 3, per_frame=4)
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        for t, proposals in enumerate(frames):
            buffer.ingest(t, proposals)
        _, retained = detect_frame(buffer, 1, model.basic, model.advanced,
                                   model.head, config)
        refs, pool = assemble_pools(buffer, 1, config)
        assert retained.ref_ids == tuple(p.id for p in refs)
        assert retained.support_ids == tuple(p.id for p in pool)
        assert retained.per_head.shape == (DIMS.num_heads, len(refs), len(pool))
        np.testing.assert_allclose(retained.per_head.sum(axis=2), 1.0, atol=1e-6)


class TestRetainedWeights:
    def test_mean_lookup_and_fallback(self):
        per_head = np.array([[[0.2, 0.8]], [[0.4, 0.6]]])
        retained = RetainedWeights(frame_index=0, ref_ids=(7,), support_ids=(3, 9),
                                   per_head=per_head)
        assert retained.mean_weight(7, 3) == pytest.approx(0.3)
        assert retained.mean_weight(7, 9) == pytest.approx(0.7)
        assert retained.mean_weight(7, 99) is None
        np.testing.assert_allclose(retained.mean_matrix(), [[0.3, 0.7]])


def batch_recompute(frames, model, config, mode):
    """Non-streaming oracle: rebuild the window buffer from scratch per frame."""
    length = len(frames)
    out = []
    for t in range(length):
        lo = max(0, t - config.temporal_range)
        hi = min(length - 1, t + config.temporal_range)
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        for tau in range(lo, hi + 1):
            buffer.ingest(tau, frames[tau])
        detections, _ = detect_frame(buffer, t, model.basic, model.advanced,
                                     model.head, config, mode)
        out.append(detections)
    return out


class TestRunVideo:
    def test_single_frame_t0(self, rng):
        model = desk_model()
        config = desk_config(temporal_range=0)
        frames = make_video(rng, 1, per_frame=5)
        detections, weights = run_video(frames, model.basic, model.advanced,
                                        model.head, config)
        buffer = FrameBuffer(config.window_capacity, config.top_k)
        buffer.ingest(0, frames[0])
        expected, _ = detect_frame(buffer, 0, model.basic, model.advanced,
                                   model.head, config)
        assert detections[0] == expected
        assert len(weights) == 1

    def test_streaming_equals_batch_oracle(self, rng):
        model = desk_model(seed=3)
        config = desk_config()
        scenario = generate_scenario(ScenarioSpec(num_frames=30, seed=5))
        frames = scenario.support_frames()
        for mode in ("basic_only", "full"):
            streamed, _ = run_video(frames, model.basic, model.advanced,
                                    model.head, config, mode=mode)
            batch = batch_recompute(frames, model, config, mode)
            assert [len(d) for d in streamed] == [len(d) for d in batch]
            for frame_dets, batch_dets in zip(streamed, batch):
                for a, b in zip(frame_dets, batch_dets):
                    assert a.class_id == b.class_id
                    assert a.source_proposal_id == b.source_proposal_id
                    assert abs(a.score - b.score) < 1e-9
                    assert a.box == b.box

    def test_video_shorter_than_prefill(self, rng):
        model = desk_model()
        config = desk_config(temporal_range=4)
        frames = make_video(rng, 2, per_frame=4)
        detections, _ = run_video(frames, model.basic, model.advanced,
                                  model.head, config)
        assert len(detections) == 2

    def test_empty_video_rejected(self):
        model = desk_model()
        with pytest.raises(ValidationError):
            run_video([], model.basic, model.advanced, model.head, desk_config())

    def test_frame_index_consistency_checked(self, rng):
        model = desk_model()
        frames = [frame_proposals(rng, 1, 3, 0)]  # claims frame 1 at position 0
        with pytest.raises(ValidationError):
            run_video(frames, model.basic, model.advanced, model.head, desk_config())

    def test_sources_resolve_to_reference_proposals(self, rng):
        model = desk_model()
        config = desk_config(score_threshold=0.01)
        frames = make_video(rng, 6, per_frame=5)
        detections, _ = run_video(frames, model.basic, model.advanced,
                                  model.head, config)
        for t, frame_dets in enumerate(detections):
            valid = {p.id for p in frames[t]}
            for det in frame_dets:
                assert det.frame_index == t
                assert det.source_proposal_id in valid

    def test_empty_frame_mid_video(self, rng):
        model = desk_model()
        config = desk_config()
        frames = make_video(rng, 5, per_frame=4)
        frames[2] = []
        detections, weights = run_video(frames, model.basic, model.advanced,
                                        model.head, config)
        assert detections[2] == [] and weights[2] is None
        # neighbors still run; the empty frame contributes nothing to their pools
        assert weights[1] is not None and weights[3] is not None
        ids_by_frame = {p.id: p.frame_index for f in frames for p in f}
        for retained in (weights[1], weights[3]):
            assert all(ids_by_frame[sid] != 2 for sid in retained.support_ids)

    def test_on_frame_callback(self, rng):
        model = desk_model()
        config = desk_config()
        frames = make_video(rng, 4, per_frame=3)
        seen = []
        run_video(frames, model.basic, model.advanced, model.head, config,
                  on_frame=lambda t, dets, sec: seen.append((t, sec >= 0.0)))
        assert [t for t, _ in seen] == [0, 1, 2, 3]
        assert all(ok for _, ok in seen)
