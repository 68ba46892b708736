"""Relation-weighted box linking: per-class optimal paths and tube rescoring.

Detections of consecutive frames are scored by the sum of their confidences
and overlap, amplified exponentially by the head-averaged relation weight
between their source proposals. Per class, dynamic programming extracts the
best one-box-per-frame path; frames without candidates split the problem
into independent contiguous segments.

Tie-break contract: per-frame candidates are canonically ordered by
descending score, then ascending source proposal id; among equal-score paths
the lexicographically smallest index sequence wins, matching first-maximum
enumeration exactly (the DP accumulates edge sums left to right and carries
the smallest optimal prefix per state).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import Detection, ValidationError, iou
from .pipeline import RetainedWeights

__all__ = [
    "Tube",
    "LinkGraph",
    "linking_score",
    "mean_relation_weight",
    "build_link_graph",
    "optimal_path",
    "extract_tubes",
    "rescore_tube",
    "link_and_rescore",
]

# Rescored confidences may exceed 1 (additive boost); serialization caps here.
MAX_RESCORED_SCORE = 2.0


@dataclass(frozen=True)
class Tube:
    """A per-class temporal chain of detections, one per consecutive frame."""

    class_id: int
    detections: tuple[Detection, ...]
    path_score: float
    rescored: bool = False
    scores_before: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.detections:
            raise ValidationError("a tube needs at least one detection")
        frames = [d.frame_index for d in self.detections]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise ValidationError(f"tube frames must be consecutive, got {frames}")
        if any(d.class_id != self.class_id for d in self.detections):
            raise ValidationError("tube detections must share the tube's class")
        object.__setattr__(self, "detections", tuple(self.detections))

    @property
    def frames(self) -> tuple[int, ...]:
        return tuple(d.frame_index for d in self.detections)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(d.score for d in self.detections)


def linking_score(a: Detection, b: Detection, w_bar: float) -> float:
    """Edge score of two consecutive-frame detections of one class."""
    if b.frame_index != a.frame_index + 1:
        raise ValidationError(
            f"linking requires consecutive frames, got {a.frame_index} -> {b.frame_index}"
        )
    if a.class_id != b.class_id:
        raise ValidationError(
            f"linking requires one class, got {a.class_id} vs {b.class_id}"
        )
    return (a.score + b.score + iou(a.box, b.box)) * math.exp(w_bar)


def mean_relation_weight(ref_id: int, support_id: int, retained) -> float:
    """Head-averaged relation weight for a proposal pair; 0 when unavailable.

    Accepts a RetainedWeights record (averages its heads) or a pre-averaged
    mapping keyed by (ref_id, support_id); the zero fallback neutralizes the
    exponential factor of the linking score.
    """
    if retained is None:
        return 0.0
    if isinstance(retained, RetainedWeights):
        value = retained.mean_weight(ref_id, support_id)
        return 0.0 if value is None else value
    if isinstance(retained, Mapping):
        return float(retained.get((ref_id, support_id), 0.0))
    raise ValidationError(f"unsupported retained-weights container: {type(retained)!r}")


def _canonical_order(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.source_proposal_id))


@dataclass(eq=False)
class _ClassGraph:
    frames: list[int]                       # sorted frames holding >= 1 candidate
    candidates: dict[int, list[Detection]]  # canonical per-frame order
    edges: dict[int, np.ndarray]            # t -> (n_t, n_{t+1}) for consecutive frames


@dataclass(eq=False)
class LinkGraph:
    """Per-class edge structure between consecutive-frame detection pairs."""

    classes: dict[int, _ClassGraph]


def build_link_graph(dets_by_frame: Mapping[int, Sequence[Detection]],
                     weights_by_frame: Mapping[int, object] | None = None) -> LinkGraph:
    """Edge weights for every class present in the detections.

    ``weights_by_frame`` maps the earlier frame t to its retained relation
    weights; absent frames or pairs fall back to a zero relation weight.
    """
    classes: dict[int, _ClassGraph] = {}
    class_ids = sorted({d.class_id for dets in dets_by_frame.values() for d in dets})
    for class_id in class_ids:
        candidates = {
            t: _canonical_order([d for d in dets if d.class_id == class_id])
            for t, dets in dets_by_frame.items()
        }
        candidates = {t: dets for t, dets in candidates.items() if dets}
        frames = sorted(candidates)
        edges: dict[int, np.ndarray] = {}
        for t in frames:
            if t + 1 not in candidates:
                continue
            retained = weights_by_frame.get(t) if weights_by_frame else None
            left, right = candidates[t], candidates[t + 1]
            matrix = np.empty((len(left), len(right)), dtype=np.float64)
            for i, a in enumerate(left):
                for j, b in enumerate(right):
                    w_bar = mean_relation_weight(
                        a.source_proposal_id, b.source_proposal_id, retained
                    )
                    matrix[i, j] = linking_score(a, b, w_bar)
            edges[t] = matrix
        classes[class_id] = _ClassGraph(frames=frames, candidates=candidates, edges=edges)
    return LinkGraph(classes=classes)


def _segments(frames: list[int]) -> list[list[int]]:
    runs: list[list[int]] = []
    for frame in frames:
        if runs and frame == runs[-1][-1] + 1:
            runs[-1].append(frame)
        else:
            runs.append([frame])
    return runs


def _best_segment_path(graph: _ClassGraph, run: list[int]) -> tuple[float, tuple[int, ...]]:
    """Max-sum path over one contiguous segment, exact enumeration semantics.

    Each state carries its left-to-right prefix sum and the lexicographically
    smallest prefix achieving it, so both the score and the chosen indices
    match brute-force first-maximum enumeration bit for bit.
    """
    first = run[0]
    states: list[tuple[float, tuple[int, ...]]] = [
        (0.0, (i,)) for i in range(len(graph.candidates[first]))
    ]
    for t in run[1:]:
        edge = graph.edges[t - 1]
        n_prev, n_here = edge.shape
        new_states: list[tuple[float, tuple[int, ...]]] = []
        for j in range(n_here):
            best_score = -math.inf
            best_prefix: tuple[int, ...] | None = None
            for i in range(n_prev):
                score = states[i][0] + edge[i, j]
                prefix = states[i][1]
                if score > best_score or (score == best_score
                                          and best_prefix is not None
                                          and prefix < best_prefix):
                    best_score = score
                    best_prefix = prefix
            assert best_prefix is not None
            new_states.append((best_score, best_prefix + (j,)))
        states = new_states
    best = min(states, key=lambda s: (-s[0], s[1]))
    return best


def optimal_path(graph: LinkGraph, class_id: int) -> Tube | None:
    """The best one-detection-per-frame path of a class, or None without candidates.

    The reported path score is the mean over the path's edges (0 for a
    single-detection path). Across disjoint segments: higher score first,
    then the earlier segment, then the lexicographic index tie-break.
    """
    cgraph = graph.classes.get(class_id)
    if cgraph is None or not cgraph.frames:
        return None
    best: tuple[float, int, tuple[int, ...], list[int]] | None = None
    for run in _segments(cgraph.frames):
        total, indices = _best_segment_path(cgraph, run)
        score = total / (len(run) - 1) if len(run) > 1 else 0.0
        key = (-score, run[0], indices)
        if best is None or key < (-best[0], best[1], best[2]):
            best = (score, run[0], indices, run)
    assert best is not None
    score, _, indices, run = best
    detections = tuple(
        cgraph.candidates[frame][index] for frame, index in zip(run, indices)
    )
    return Tube(class_id=class_id, detections=detections, path_score=score)


def extract_tubes(dets_by_frame: Mapping[int, Sequence[Detection]],
                  weights_by_frame: Mapping[int, object] | None,
                  class_id: int, max_tubes: int = 100,
                  min_path_score: float = 0.0) -> list[Tube]:
    """Iterative find-remove-repeat path extraction for one class.

    Stops when no candidates remain, the tube budget is spent, or the next
    best path scores below the floor. No detection joins two tubes.
    """
    remaining = {
        t: [d for d in dets if d.class_id == class_id]
        for t, dets in dets_by_frame.items()
    }
    tubes: list[Tube] = []
    while len(tubes) < max_tubes:
        graph = build_link_graph(remaining, weights_by_frame)
        tube = optimal_path(graph, class_id)
        if tube is None or tube.path_score < min_path_score:
            break
        tubes.append(tube)
        for det in tube.detections:
            frame = det.frame_index
            remaining[frame] = [d for d in remaining[frame] if d is not det]
    return tubes


def rescore_tube(tube: Tube) -> Tube:
    """Boost every detection by the mean of the tube's top-half scores.

    The boost is one value added to each score (so relative confidences keep
    their ordering); results cap at MAX_RESCORED_SCORE for serialization.
    Rescoring twice is rejected.
    """
    if tube.rescored:
        raise ValidationError("tube has already been rescored")
    scores = sorted(tube.scores, reverse=True)
    top = scores[:math.ceil(len(scores) / 2)]
    boost = sum(top) / len(top)
    rescored = tuple(
        replace(d, score=min(d.score + boost, MAX_RESCORED_SCORE))
        for d in tube.detections
    )
    return Tube(class_id=tube.class_id, detections=rescored,
                path_score=tube.path_score, rescored=True,
                scores_before=tube.scores)


def link_and_rescore(dets_by_frame: Mapping[int, Sequence[Detection]],
                     weights_by_frame: Mapping[int, object] | None,
                     num_classes: int, max_tubes: int = 100,
                     min_path_score: float = 0.0,
                     ) -> tuple[list[Tube], dict[int, list[Detection]]]:
    """Full post-processing: per-class tubes plus the re-emitted detections.

    Detections belonging to a tube carry their boosted scores; everything
    else passes through unchanged. Per-frame output keeps each frame's
    original detection order.
    """
    tubes: list[Tube] = []
    replacement: dict[int, Detection] = {}  # id(original detection) -> boosted twin
    for class_id in range(1, num_classes + 1):
        for raw in extract_tubes(dets_by_frame, weights_by_frame, class_id,
                                 max_tubes=max_tubes, min_path_score=min_path_score):
            tube = rescore_tube(raw)
            tubes.append(tube)
            for original, boosted in zip(raw.detections, tube.detections):
                replacement[id(original)] = boosted
    rescored_by_frame = {
        t: [replacement.get(id(d), d) for d in dets]
        for t, dets in dets_by_frame.items()
    }
    return tubes, rescored_by_frame
