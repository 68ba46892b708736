"""Box geometry, proposals, detections, and the shared sampling/suppression helpers.

Everything in this module is immutable after construction; the operations are
pure functions and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ValidationError",
    "BoxGeometry",
    "Proposal",
    "Detection",
    "iou",
    "nms",
    "sample_top_k",
    "sample_top_ratio",
]


class ValidationError(ValueError):
    """An input violates a documented contract."""


@dataclass(frozen=True)
class BoxGeometry:
    """Axis-aligned box in continuous coordinates, corners (x1, y1) and (x2, y2).

    Degenerate boxes (zero or negative extent) are rejected at construction so
    downstream geometry never has to guard against them.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"box coordinates must be finite, got {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValidationError(
                f"degenerate box {coords}: requires x2 > x1 and y2 > y1"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True, eq=False)
class Proposal:
    """One region proposal: stable id, frame, geometry, appearance feature, objectness.

    The feature vector is coerced to a read-only float64 copy; feature length
    against the configured model width is checked where proposals meet
    parameters, not here.
    """

    id: int
    frame_index: int
    box: BoxGeometry
    feature: np.ndarray
    objectness: float

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValidationError(f"proposal {self.id}: frame_index must be >= 0")
        if not (0.0 <= self.objectness <= 1.0):
            raise ValidationError(
                f"proposal {self.id}: objectness {self.objectness} outside [0, 1]"
            )
        feature = np.array(self.feature, dtype=np.float64, copy=True)
        if feature.ndim != 1:
            raise ValidationError(f"proposal {self.id}: feature must be a 1-d vector")
        feature.setflags(write=False)
        object.__setattr__(self, "feature", feature)


@dataclass(frozen=True)
class Detection:
    """A classified, regressed, scored box with provenance to its source proposal.

    Scores above 1.0 only arise from tube rescoring, which is capped at 2.0;
    freshly detected boxes carry softmax probabilities in [0, 1].
    """

    frame_index: int
    class_id: int
    score: float
    box: BoxGeometry
    source_proposal_id: int

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValidationError(f"detection class_id must be >= 0, got {self.class_id}")
        if not (0.0 <= self.score <= 2.0):
            raise ValidationError(f"detection score {self.score} outside [0, 2]")


def iou(a: BoxGeometry, b: BoxGeometry) -> float:
    """Intersection over union of two boxes; symmetric, 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression over one frame and one class.

    Returns survivors in descending score order; a detection is suppressed
    when it overlaps an already-kept, higher-scored one strictly above the
    threshold. Score ties break toward the lower source proposal id.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValidationError(f"iou_threshold {iou_threshold} outside (0, 1]")
    if not dets:
        return []
    if len({d.frame_index for d in dets}) > 1 or len({d.class_id for d in dets}) > 1:
        raise ValidationError("nms expects detections from a single frame and class")
    ranked = sorted(dets, key=lambda d: (-d.score, d.source_proposal_id))
    kept: list[Detection] = []
    for det in ranked:
        if all(iou(det.box, survivor.box) <= iou_threshold for survivor in kept):
            kept.append(det)
    return kept


def sample_top_k(proposals: list[Proposal], k: int) -> list[Proposal]:
    """The min(k, n) proposals of highest objectness, ties toward lower id.

    The result is independent of the input order, which keeps every
    downstream pool assembly deterministic.
    """
    if k < 0:
        raise ValidationError(f"k must be >= 0, got {k}")
    ranked = sorted(proposals, key=lambda p: (-p.objectness, p.id))
    return ranked[:k]


def sample_top_ratio(pool: list[Proposal], r_percent: float) -> list[Proposal]:
    """The top ceil(n * r/100) proposals by objectness; >= 1 whenever the pool is non-empty."""
    if not (0.0 < r_percent <= 100.0):
        raise ValidationError(f"r_percent {r_percent} outside (0, 100]")
    if not pool:
        return []
    count = math.ceil(len(pool) * r_percent / 100.0)
    return sample_top_k(pool, count)
