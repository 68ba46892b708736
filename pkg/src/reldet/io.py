"""JSON Lines readers and writers for every artifact the pipeline exchanges.

Each file may start with one header line ``{"header": {...}}`` echoing the
resolved configuration; readers skip it. Record schemas:

proposals   {"frame", "id", "box": [x1,y1,x2,y2], "objectness",
             "feature": [...]}  or, with a binary side-car,
            {"feature_offset", "feature_len"} (little-endian float64)
detections  {"frame", "class", "score", "box", "source_proposal_id"}
weights     {"frame", "ref_id", "support_id", "w_bar"}
tubes       {"class", "tube_id", "frames", "boxes", "scores_before",
             "scores_after", "path_score"}
tracks      {"track_id", "class", "frames", "boxes"}

Writers emit keys sorted and floats via repr, so a fixed seed reproduces
byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import BoxGeometry, Detection, Proposal, ValidationError
from .linking import Tube
from .pipeline import RetainedWeights
from .synth import TrackTruth

__all__ = [
    "FileFormatError",
    "read_header",
    "write_proposals",
    "read_proposals",
    "write_detections",
    "read_detections",
    "write_weights",
    "read_weights",
    "write_tubes",
    "read_tubes",
    "write_tracks",
    "read_tracks",
]


class FileFormatError(ValueError):
    """A record file is malformed; the message carries file and line context."""


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def _iter_records(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise FileFormatError(f"{path}:{lineno}: record must be an object")
            if "header" in record:
                continue
            yield lineno, record


def _require(record: dict, keys: Sequence[str], path: Path, lineno: int) -> None:
    missing = [k for k in keys if k not in record]
    if missing:
        raise FileFormatError(f"{path}:{lineno}: missing keys {missing}")


def read_header(path: str | Path) -> dict | None:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        first = handle.readline().strip()
    if not first:
        return None
    try:
        record = json.loads(first)
    except json.JSONDecodeError:
        return None
    if isinstance(record, dict) and "header" in record:
        return record["header"]
    return None


def _open_out(path: str | Path, header: dict | None):
    handle = open(path, "w", encoding="utf-8")
    if header is not None:
        handle.write(_dump({"header": header}) + "\n")
    return handle


def _box_list(box: BoxGeometry) -> list[float]:
    return [float(v) for v in box.as_tuple()]


def _box_from(value, path: Path, lineno: int) -> BoxGeometry:
    if not (isinstance(value, list) and len(value) == 4):
        raise FileFormatError(f"{path}:{lineno}: box must be a list of 4 numbers")
    try:
        return BoxGeometry(*(float(v) for v in value))
    except ValidationError as exc:
        raise FileFormatError(f"{path}:{lineno}: {exc}") from exc


def write_proposals(path: str | Path, frames: Sequence[Sequence[Proposal]],
                    header: dict | None = None,
                    feature_file: str | Path | None = None) -> None:
    """One record per proposal, frames in order; optionally a binary feature side-car."""
    sidecar = open(feature_file, "wb") if feature_file is not None else None
    try:
        with _open_out(path, header) as handle:
            for proposals in frames:
                for p in proposals:
                    record = {
                        "frame": int(p.frame_index),
                        "id": int(p.id),
                        "box": _box_list(p.box),
                        "objectness": float(p.objectness),
                    }
                    if sidecar is None:
                        record["feature"] = [float(v) for v in p.feature]
                    else:
                        record["feature_offset"] = sidecar.tell()
                        record["feature_len"] = int(p.feature.shape[0])
                        sidecar.write(p.feature.astype("<f8").tobytes())
                    handle.write(_dump(record) + "\n")
    finally:
        if sidecar is not None:
            sidecar.close()


def read_proposals(path: str | Path,
                   feature_file: str | Path | None = None) -> list[list[Proposal]]:
    """Per-frame proposal lists covering frames 0..max; absent frames stay empty."""
    path = Path(path)
    features_blob = Path(feature_file).read_bytes() if feature_file is not None else None
    by_frame: dict[int, list[Proposal]] = {}
    seen_ids: dict[int, int] = {}
    for lineno, record in _iter_records(path):
        _require(record, ("frame", "id", "box", "objectness"), path, lineno)
        frame = record["frame"]
        if not isinstance(frame, int) or frame < 0:
            raise FileFormatError(f"{path}:{lineno}: frame must be an integer >= 0")
        pid = record["id"]
        if pid in seen_ids:
            raise FileFormatError(
                f"{path}:{lineno}: duplicate proposal id {pid} (first on line {seen_ids[pid]})"
            )
        seen_ids[pid] = lineno
        if "feature" in record:
            feature = np.asarray(record["feature"], dtype=np.float64)
        elif "feature_offset" in record:
            if features_blob is None:
                raise FileFormatError(
                    f"{path}:{lineno}: record references a feature side-car, "
                    "but no feature file was provided"
                )
            _require(record, ("feature_len",), path, lineno)
            offset = record["feature_offset"]
            length = record["feature_len"]
            end = offset + 8 * length
            if end > len(features_blob):
                raise FileFormatError(
                    f"{path}:{lineno}: feature offset {offset} out of range"
                )
            feature = np.frombuffer(features_blob[offset:end], dtype="<f8")
        else:
            raise FileFormatError(
                f"{path}:{lineno}: record needs 'feature' or 'feature_offset'"
            )
        try:
            proposal = Proposal(
                id=int(pid),
                frame_index=frame,
                box=_box_from(record["box"], path, lineno),
                feature=feature,
                objectness=float(record["objectness"]),
            )
        except ValidationError as exc:
            raise FileFormatError(f"{path}:{lineno}: {exc}") from exc
        by_frame.setdefault(frame, []).append(proposal)
    if not by_frame:
        return []
    return [by_frame.get(t, []) for t in range(max(by_frame) + 1)]


def write_detections(path: str | Path, dets_by_frame: Sequence[Sequence[Detection]],
                     header: dict | None = None) -> None:
    with _open_out(path, header) as handle:
        for dets in dets_by_frame:
            for d in dets:
                handle.write(_dump({
                    "frame": int(d.frame_index),
                    "class": int(d.class_id),
                    "score": float(d.score),
                    "box": _box_list(d.box),
                    "source_proposal_id": int(d.source_proposal_id),
                }) + "\n")


def read_detections(path: str | Path) -> dict[int, list[Detection]]:
    path = Path(path)
    by_frame: dict[int, list[Detection]] = {}
    for lineno, record in _iter_records(path):
        _require(record, ("frame", "class", "score", "box", "source_proposal_id"),
                 path, lineno)
        try:
            det = Detection(
                frame_index=int(record["frame"]),
                class_id=int(record["class"]),
                score=float(record["score"]),
                box=_box_from(record["box"], path, lineno),
                source_proposal_id=int(record["source_proposal_id"]),
            )
        except ValidationError as exc:
            raise FileFormatError(f"{path}:{lineno}: {exc}") from exc
        by_frame.setdefault(det.frame_index, []).append(det)
    return by_frame


def write_weights(path: str | Path, retained: Iterable[RetainedWeights | None],
                  header: dict | None = None) -> None:
    """Head-averaged relation weights, one record per labeled (ref, support) pair."""
    with _open_out(path, header) as handle:
        for frame_weights in retained:
            if frame_weights is None:
                continue
            mean = frame_weights.mean_matrix()
            for i, ref_id in enumerate(frame_weights.ref_ids):
                for j, support_id in enumerate(frame_weights.support_ids):
                    handle.write(_dump({
                        "frame": int(frame_weights.frame_index),
                        "ref_id": int(ref_id),
                        "support_id": int(support_id),
                        "w_bar": float(mean[i, j]),
                    }) + "\n")


def read_weights(path: str | Path) -> dict[int, dict[tuple[int, int], float]]:
    path = Path(path)
    by_frame: dict[int, dict[tuple[int, int], float]] = {}
    for lineno, record in _iter_records(path):
        _require(record, ("frame", "ref_id", "support_id", "w_bar"), path, lineno)
        frame = int(record["frame"])
        pair = (int(record["ref_id"]), int(record["support_id"]))
        by_frame.setdefault(frame, {})[pair] = float(record["w_bar"])
    return by_frame


def write_tubes(path: str | Path, tubes: Sequence[Tube],
                header: dict | None = None) -> None:
    with _open_out(path, header) as handle:
        for tube_id, tube in enumerate(tubes):
            before = tube.scores_before if tube.scores_before is not None else tube.scores
            handle.write(_dump({
                "class": int(tube.class_id),
                "tube_id": tube_id,
                "frames": [int(f) for f in tube.frames],
                "boxes": [_box_list(d.box) for d in tube.detections],
                "scores_before": [float(s) for s in before],
                "scores_after": [float(s) for s in tube.scores],
                "path_score": float(tube.path_score),
            }) + "\n")


def read_tubes(path: str | Path) -> list[dict]:
    path = Path(path)
    tubes = []
    for lineno, record in _iter_records(path):
        _require(record, ("class", "tube_id", "frames", "boxes",
                          "scores_before", "scores_after", "path_score"), path, lineno)
        tubes.append(record)
    return tubes


def write_tracks(path: str | Path, tracks: Sequence[TrackTruth],
                 header: dict | None = None) -> None:
    with _open_out(path, header) as handle:
        for track in tracks:
            handle.write(_dump({
                "track_id": int(track.track_id),
                "class": int(track.class_id),
                "frames": [int(f) for f in track.frames],
                "boxes": [_box_list(b) for b in track.boxes],
            }) + "\n")


def read_tracks(path: str | Path) -> list[TrackTruth]:
    path = Path(path)
    tracks = []
    for lineno, record in _iter_records(path):
        _require(record, ("track_id", "class", "frames", "boxes"), path, lineno)
        frames = record["frames"]
        boxes = record["boxes"]
        if len(frames) != len(boxes):
            raise FileFormatError(f"{path}:{lineno}: frames and boxes differ in length")
        tracks.append(TrackTruth(
            track_id=int(record["track_id"]),
            class_id=int(record["class"]),
            frames=tuple(int(f) for f in frames),
            boxes=tuple(_box_from(b, path, lineno) for b in boxes),
        ))
    return tracks
