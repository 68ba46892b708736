"""Detection evaluation: per-class average precision and their mean.

Matching is greedy by descending score: each detection claims the unmatched
same-frame, same-class ground-truth box of highest overlap, counting as a
true positive at or above the IoU threshold. AP integrates the all-point
precision envelope over recall; the mean runs over classes that have ground
truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import BoxGeometry, Detection, ValidationError, iou
from .synth import TrackTruth

__all__ = [
    "GroundTruthBox",
    "ClassEval",
    "EvalResult",
    "tracks_to_ground_truth",
    "average_precision",
    "evaluate_detections",
]


@dataclass(frozen=True)
class GroundTruthBox:
    frame_index: int
    class_id: int
    box: BoxGeometry


def tracks_to_ground_truth(tracks: Iterable[TrackTruth]) -> list[GroundTruthBox]:
    return [
        GroundTruthBox(frame_index=f, class_id=track.class_id, box=box)
        for track in tracks
        for f, box in zip(track.frames, track.boxes)
    ]


@dataclass(frozen=True, eq=False)
class ClassEval:
    class_id: int
    ap: float
    num_ground_truth: int
    num_detections: int
    recalls: np.ndarray
    precisions: np.ndarray


@dataclass(frozen=True, eq=False)
class EvalResult:
    per_class: dict[int, ClassEval]
    mean_ap: float


def average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """All-point interpolated AP: area under the precision envelope."""
    if recalls.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recalls, [1.0]])
    mpre = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _class_curve(dets: list[Detection], gts: list[GroundTruthBox],
                 iou_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    ranked = sorted(dets, key=lambda d: (-d.score, d.frame_index, d.source_proposal_id))
    matched = [False] * len(gts)
    by_frame: dict[int, list[int]] = {}
    for index, gt in enumerate(gts):
        by_frame.setdefault(gt.frame_index, []).append(index)

    tp = np.zeros(len(ranked))
    for rank, det in enumerate(ranked):
        best_iou = 0.0
        best_index = -1
        for gt_index in by_frame.get(det.frame_index, []):
            if matched[gt_index]:
                continue
            overlap = iou(det.box, gts[gt_index].box)
            if overlap > best_iou:
                best_iou = overlap
                best_index = gt_index
        if best_index >= 0 and best_iou >= iou_threshold:
            matched[best_index] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recalls = cum_tp / len(gts)
    precisions = cum_tp / np.arange(1, len(ranked) + 1)
    return recalls, precisions


def evaluate_detections(detections: Sequence[Detection],
                        ground_truth: Sequence[GroundTruthBox],
                        iou_threshold: float = 0.5,
                        num_classes: int | None = None) -> EvalResult:
    """Per-class AP plus their mean over all classes with ground truth.

    With ``num_classes`` given, detection classes must lie in [1, num_classes]
    and detections for in-range classes without ground truth are ignored
    (they have no recall axis). Without it, any detection class absent from
    the ground truth is a mismatch.
    """
    if not ground_truth:
        raise ValidationError("evaluation needs at least one ground-truth box")
    gt_classes = sorted({gt.class_id for gt in ground_truth})
    det_classes = {d.class_id for d in detections}
    if num_classes is None:
        stray = sorted(det_classes - set(gt_classes))
        if stray:
            raise ValidationError(
                f"detections reference classes without ground truth: {stray}"
            )
    else:
        invalid = sorted(c for c in det_classes | set(gt_classes)
                         if not 1 <= c <= num_classes)
        if invalid:
            raise ValidationError(
                f"classes {invalid} outside the configured range [1, {num_classes}]"
            )

    per_class: dict[int, ClassEval] = {}
    for class_id in gt_classes:
        class_dets = [d for d in detections if d.class_id == class_id]
        class_gts = [g for g in ground_truth if g.class_id == class_id]
        recalls, precisions = _class_curve(class_dets, class_gts, iou_threshold)
        per_class[class_id] = ClassEval(
            class_id=class_id,
            ap=average_precision(recalls, precisions),
            num_ground_truth=len(class_gts),
            num_detections=len(class_dets),
            recalls=recalls,
            precisions=precisions,
        )
    mean_ap = float(np.mean([c.ap for c in per_class.values()]))
    return EvalResult(per_class=per_class, mean_ap=mean_ap)
