"""Streaming inference: sliding proposal buffer, pool assembly, detection head.

Frames arrive strictly sequentially. The buffer keeps at most 2T+1
consecutive frames; processing frame t draws its supportive pool from the
window [t-T, t+T] clipped to frames that exist, so the streaming result is
identical to rebuilding the pools from scratch per frame.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import BoxGeometry, Detection, Proposal, ValidationError, nms, sample_top_k
from .distill import AdvancedStageParams, BasicStageParams, distillation_forward

__all__ = [
    "PipelineConfig",
    "FrameBuffer",
    "DetectionHeadParams",
    "RetainedWeights",
    "assemble_pools",
    "detect_frame",
    "run_video",
    "decode_box",
]


@dataclass(frozen=True)
class PipelineConfig:
    """Run-level knobs of the streaming detector."""

    temporal_range: int = 18        # T: support window is [t-T, t+T]
    top_k: int = 75                 # K: per-frame supportive sample size
    advanced_ratio: float = 20.0    # r%: share of the pool kept for the cascade
    num_reference: int = 300        # cap on reference proposals per frame
    num_classes: int = 30
    nms_threshold: float = 0.5
    score_threshold: float = 0.05   # detections need score strictly above this

    def __post_init__(self) -> None:
        if self.temporal_range < 0:
            raise ValidationError(f"temporal_range must be >= 0, got {self.temporal_range}")
        if self.top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {self.top_k}")
        if self.num_reference < 1:
            raise ValidationError(f"num_reference must be >= 1, got {self.num_reference}")
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        if not (0.0 < self.advanced_ratio <= 100.0):
            raise ValidationError(f"advanced_ratio {self.advanced_ratio} outside (0, 100]")
        if not (0.0 < self.nms_threshold <= 1.0):
            raise ValidationError(f"nms_threshold {self.nms_threshold} outside (0, 1]")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValidationError(f"score_threshold {self.score_threshold} outside [0, 1]")

    @property
    def window_capacity(self) -> int:
        return 2 * self.temporal_range + 1


@dataclass(frozen=True)
class _FrameEntry:
    full: tuple[Proposal, ...]
    sampled: tuple[Proposal, ...]


class FrameBuffer:
    """Sliding window of per-frame proposal sets, at most ``capacity`` consecutive frames.

    Single-owner mutable state: one writer ingests frames in strictly
    increasing order; ingesting frame j evicts frame j - capacity if present,
    so the size bound holds at every point of a run.
    """

    def __init__(self, capacity: int, sample_k: int):
        if capacity < 1:
            raise ValidationError(f"buffer capacity must be >= 1, got {capacity}")
        if sample_k < 1:
            raise ValidationError(f"sample_k must be >= 1, got {sample_k}")
        self._capacity = capacity
        self._sample_k = sample_k
        self._entries: dict[int, _FrameEntry] = {}

    @property
    def capacity(self) -> int:
        return self._capacity

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, frame_index: int) -> bool:
        return frame_index in self._entries

    def frames(self) -> list[int]:
        return list(self._entries)

    def ingest(self, frame_index: int, proposals: list[Proposal]) -> None:
        """Store a frame's full set and its top-K sample; evict the frame falling out."""
        if self._entries:
            expected = next(reversed(self._entries)) + 1
            if frame_index != expected:
                raise ValidationError(
                    f"frames must arrive sequentially: got {frame_index}, expected {expected}"
                )
        elif frame_index < 0:
            raise ValidationError(f"frame_index must be >= 0, got {frame_index}")
        for p in proposals:
            if p.frame_index != frame_index:
                raise ValidationError(
                    f"proposal {p.id} carries frame {p.frame_index}, ingested as {frame_index}"
                )
        self._entries[frame_index] = _FrameEntry(
            full=tuple(proposals),
            sampled=tuple(sample_top_k(list(proposals), self._sample_k)),
        )
        self._entries.pop(frame_index - self._capacity, None)
        assert len(self._entries) <= self._capacity

    def full_set(self, frame_index: int) -> list[Proposal]:
        return list(self._entries[frame_index].full)

    def sampled_set(self, frame_index: int) -> list[Proposal]:
        return list(self._entries[frame_index].sampled)


def assemble_pools(buffer: FrameBuffer, t: int,
                   config: PipelineConfig) -> tuple[list[Proposal], list[Proposal]]:
    """Reference set (frame t, capped) and supportive pool (window union).

    The window [t-T, t+T] clips to frames present in the buffer, which covers
    both video boundaries; frames that yielded zero proposals contribute
    nothing.
    """
    if t not in buffer:
        raise ValidationError(f"frame {t} is not in the buffer")
    refs = sample_top_k(buffer.full_set(t), config.num_reference)
    pool: list[Proposal] = []
    for tau in range(t - config.temporal_range, t + config.temporal_range + 1):
        if tau in buffer:
            pool.extend(buffer.sampled_set(tau))
    return refs, pool


@dataclass(frozen=True, eq=False)
class DetectionHeadParams:
    """Classification (softmax over C+1, class 0 background) and per-class box regression."""

    class_weight: np.ndarray  # (d_model, C+1)
    class_bias: np.ndarray    # (C+1,)
    reg_weight: np.ndarray    # (d_model, 4C)
    reg_bias: np.ndarray      # (4C,)

    def __post_init__(self) -> None:
        cw = np.array(self.class_weight, dtype=np.float64, copy=True)
        cb = np.array(self.class_bias, dtype=np.float64, copy=True)
        rw = np.array(self.reg_weight, dtype=np.float64, copy=True)
        rb = np.array(self.reg_bias, dtype=np.float64, copy=True)
        if cw.ndim != 2 or cw.shape[1] < 2:
            raise ValidationError("class_weight must be (d_model, C+1) with C >= 1")
        num_classes = cw.shape[1] - 1
        if cb.shape != (cw.shape[1],):
            raise ValidationError("class_bias shape does not match class_weight")
        if rw.shape != (cw.shape[0], 4 * num_classes):
            raise ValidationError(
                f"reg_weight must be (d_model, {4 * num_classes}), got {rw.shape}"
            )
        if rb.shape != (4 * num_classes,):
            raise ValidationError("reg_bias shape does not match reg_weight")
        for name, arr in (("class_weight", cw), ("class_bias", cb),
                          ("reg_weight", rw), ("reg_bias", rb)):
            if not np.isfinite(arr).all():
                raise ValidationError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
        object.__setattr__(self, "class_weight", cw)
        object.__setattr__(self, "class_bias", cb)
        object.__setattr__(self, "reg_weight", rw)
        object.__setattr__(self, "reg_bias", rb)

    @property
    def num_classes(self) -> int:
        return self.class_weight.shape[1] - 1

    @property
    def d_model(self) -> int:
        return self.class_weight.shape[0]

    def class_probabilities(self, features: np.ndarray) -> np.ndarray:
        logits = features @ self.class_weight + self.class_bias
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    def box_deltas(self, features: np.ndarray) -> np.ndarray:
        return features @ self.reg_weight + self.reg_bias


def decode_box(box: BoxGeometry, deltas: np.ndarray) -> BoxGeometry:
    """Standard log-space delta decoding: (dx, dy, dw, dh) on (cx, cy, w, h).

    Written corner-relative with expm1 so zero deltas return the box
    bit-exactly: x' = x + dx*w -+ (w/2)*expm1(dw), likewise for y.
    """
    dx, dy, dw, dh = (float(v) for v in deltas)
    shift_x = dx * box.width
    shift_y = dy * box.height
    grow_x = 0.5 * box.width * math.expm1(dw)
    grow_y = 0.5 * box.height * math.expm1(dh)
    return BoxGeometry(
        x1=box.x1 + shift_x - grow_x,
        y1=box.y1 + shift_y - grow_y,
        x2=box.x2 + shift_x + grow_x,
        y2=box.y2 + shift_y + grow_y,
    )


@dataclass(frozen=True, eq=False)
class RetainedWeights:
    """Last-basic-module relation weights of one frame, labeled by proposal ids."""

    frame_index: int
    ref_ids: tuple[int, ...]
    support_ids: tuple[int, ...]
    per_head: np.ndarray  # (num_heads, n_refs, n_support)

    def __post_init__(self) -> None:
        arr = np.asarray(self.per_head, dtype=np.float64)
        if arr.shape[1:] != (len(self.ref_ids), len(self.support_ids)):
            raise ValidationError("per_head shape does not match the id labels")
        object.__setattr__(self, "per_head", arr)

    @cached_property
    def _ref_index(self) -> dict[int, int]:
        return {pid: i for i, pid in enumerate(self.ref_ids)}

    @cached_property
    def _support_index(self) -> dict[int, int]:
        return {pid: j for j, pid in enumerate(self.support_ids)}

    def mean_matrix(self) -> np.ndarray:
        return self.per_head.mean(axis=0)

    def mean_weight(self, ref_id: int, support_id: int) -> float | None:
        """Head-averaged weight for a labeled pair, or None when the pair is absent."""
        i = self._ref_index.get(ref_id)
        j = self._support_index.get(support_id)
        if i is None or j is None:
            return None
        return float(self.per_head[:, i, j].mean())


def detect_frame(buffer: FrameBuffer, t: int, basic: BasicStageParams,
                 advanced: AdvancedStageParams, head: DetectionHeadParams,
                 config: PipelineConfig,
                 mode: str = "full") -> tuple[list[Detection], RetainedWeights | None]:
    """Detections of frame t plus the labeled relation weights kept for linking.

    Classes are decoded and suppressed independently; scores must strictly
    exceed the configured threshold. An empty reference set yields no
    detections and no weights.
    """
    refs, pool = assemble_pools(buffer, t, config)
    if not refs:
        return [], None
    augmented, weights = distillation_forward(refs, pool, basic, advanced, mode)
    features = np.stack([p.feature for p in augmented])
    probs = head.class_probabilities(features)
    deltas = head.box_deltas(features)

    detections: list[Detection] = []
    for class_id in range(1, config.num_classes + 1):
        candidates = []
        for i, proposal in enumerate(augmented):
            score = float(probs[i, class_id])
            if score > config.score_threshold:
                block = deltas[i, 4 * (class_id - 1):4 * class_id]
                candidates.append(
                    Detection(
                        frame_index=t,
                        class_id=class_id,
                        score=score,
                        box=decode_box(proposal.box, block),
                        source_proposal_id=proposal.id,
                    )
                )
        detections.extend(nms(candidates, config.nms_threshold))

    retained = RetainedWeights(
        frame_index=t,
        ref_ids=tuple(p.id for p in refs),
        support_ids=tuple(p.id for p in pool),
        per_head=weights.per_head,
    )
    return detections, retained


def run_video(frames: list[list[Proposal]], basic: BasicStageParams,
              advanced: AdvancedStageParams, head: DetectionHeadParams,
              config: PipelineConfig, mode: str = "full",
              on_frame=None,
              ) -> tuple[list[list[Detection]], list[RetainedWeights | None]]:
    """Stream a whole video: prefill T+1 frames, then detect t while ingesting t+T+1.

    Videos shorter than T+1 frames clamp the prefill; every frame is
    processed. Output is one detection list and one retained-weights record
    (possibly None for empty frames) per frame. ``on_frame``, when given, is
    called with (t, detections, seconds) after each frame.
    """
    if not frames:
        raise ValidationError("video has no frames")
    for t, proposals in enumerate(frames):
        for p in proposals:
            if p.frame_index != t:
                raise ValidationError(
                    f"proposal {p.id} carries frame {p.frame_index}, found at position {t}"
                )
    buffer = FrameBuffer(config.window_capacity, config.top_k)
    length = len(frames)
    for t in range(min(config.temporal_range + 1, length)):
        buffer.ingest(t, frames[t])

    all_detections: list[list[Detection]] = []
    all_weights: list[RetainedWeights | None] = []
    for t in range(length):
        started = time.perf_counter()
        detections, retained = detect_frame(buffer, t, basic, advanced, head, config, mode)
        all_detections.append(detections)
        all_weights.append(retained)
        if on_frame is not None:
            on_frame(t, detections, time.perf_counter() - started)
        incoming = t + config.temporal_range + 1
        if incoming < length:
            buffer.ingest(incoming, frames[incoming])
    return all_detections, all_weights
