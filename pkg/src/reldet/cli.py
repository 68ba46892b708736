"""Command-line entry point: synth | infer | link | eval | gradcheck.

The config is one JSON file with optional sections (dims, pipeline, scenario,
link) whose resolved values, defaults included, are echoed into the header
line of every output file. Exit codes: 0 success, 1 validation error, 2 I/O
error. Every command is deterministic given config plus seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .core import ValidationError
from .evaluate import evaluate_detections, tracks_to_ground_truth
from .gradcheck import PASS_THRESHOLD, finite_difference_check
from .io import (
    FileFormatError,
    read_detections,
    read_proposals,
    read_tracks,
    read_weights,
    write_detections,
    write_proposals,
    write_tracks,
    write_tubes,
    write_weights,
)
from .linking import link_and_rescore
from .model import ModelParams, init_model_params
from .pipeline import PipelineConfig, run_video
from .relation import Dims
from .report import render_ap_bars, render_pr_curves
from .serialize import load_model_params
from .synth import ObjectMotion, ScenarioSpec, generate_scenario

__all__ = ["RunConfig", "LinkOptions", "load_run_config", "main", "entrypoint"]

DEFAULT_FILES = {
    "proposals": "proposals.jsonl",
    "tracks": "tracks.jsonl",
    "detections": "detections.jsonl",
    "weights": "weights.jsonl",
    "tubes": "tubes.jsonl",
    "rescored": "rescored_detections.jsonl",
    "eval_summary": "eval_summary.csv",
}


@dataclass(frozen=True)
class LinkOptions:
    max_tubes: int = 100
    min_path_score: float = 0.0
    relation_free: bool = False
    emit_weights: bool = True

    def __post_init__(self) -> None:
        if self.max_tubes < 0:
            raise ValidationError(f"max_tubes must be >= 0, got {self.max_tubes}")


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs; defaults are the full-scale values."""

    seed: int = 0
    mode: str = "full"
    num_basic_modules: int = 2
    dims: Dims = field(default_factory=Dims)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    link: LinkOptions = field(default_factory=LinkOptions)
    params_file: str | None = None
    paths: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in ("basic_only", "full"):
            raise ValidationError(f"mode must be basic_only or full, got {self.mode!r}")
        if self.num_basic_modules < 1:
            raise ValidationError("num_basic_modules must be >= 1")
        unknown = set(self.paths) - set(DEFAULT_FILES)
        if unknown:
            raise ValidationError(f"unknown path keys: {sorted(unknown)}")

    def artifact_path(self, name: str, out_dir: Path) -> Path:
        override = self.paths.get(name)
        if override is None:
            return out_dir / DEFAULT_FILES[name]
        override = Path(override)
        return override if override.is_absolute() else out_dir / override


def _build_section(section: dict, cls, name: str, **extra):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{**section, **extra})
    except TypeError as exc:
        raise ValidationError(f"config section {name!r}: {exc}") from exc


def _parse_scenario(section: dict, run_seed: int) -> ScenarioSpec:
    section = dict(section)
    if "objects" in section:
        objects = []
        for index, entry in enumerate(section["objects"]):
            unknown = set(entry) - {"class_id", "start_box", "velocity"}
            if unknown:
                raise ValidationError(
                    f"scenario object {index}: unknown keys {sorted(unknown)}"
                )
            try:
                objects.append(ObjectMotion(
                    class_id=int(entry["class_id"]),
                    start_box=tuple(float(v) for v in entry["start_box"]),
                    velocity=tuple(float(v) for v in entry["velocity"]),
                ))
            except (KeyError, TypeError) as exc:
                raise ValidationError(f"scenario object {index}: {exc}") from exc
        section["objects"] = tuple(objects)
    section.setdefault("seed", run_seed)
    return _build_section(section, ScenarioSpec, "scenario")


def load_run_config(path: str | Path | None, seed_override: int | None = None,
                    mode_override: str | None = None) -> RunConfig:
    """Parse the JSON config; CLI overrides beat file values beat defaults."""
    raw: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as handle:
            try:
                raw = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
    known = {"seed", "mode", "num_basic_modules", "dims", "pipeline", "scenario",
             "link", "params_file", "paths"}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"config: unknown top-level keys {sorted(unknown)}")

    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    mode = mode_override if mode_override is not None else raw.get("mode", "full")
    scenario_section = dict(raw.get("scenario", {}))
    if seed_override is not None:
        scenario_section["seed"] = seed_override
    return RunConfig(
        seed=seed,
        mode=mode,
        num_basic_modules=int(raw.get("num_basic_modules", 2)),
        dims=_build_section(raw.get("dims", {}), Dims, "dims"),
        pipeline=_build_section(raw.get("pipeline", {}), PipelineConfig, "pipeline"),
        scenario=_parse_scenario(scenario_section, seed),
        link=_build_section(raw.get("link", {}), LinkOptions, "link"),
        params_file=raw.get("params_file"),
        paths=dict(raw.get("paths", {})),
    )


def config_echo(config: RunConfig, command: str) -> dict:
    """The provenance header written into every output file."""
    return {
        "command": command,
        "seed": config.seed,
        "mode": config.mode,
        "num_basic_modules": config.num_basic_modules,
        "dims": asdict(config.dims),
        "pipeline": asdict(config.pipeline),
        "scenario": asdict(config.scenario),
        "link": asdict(config.link),
    }


def _model_for(config: RunConfig) -> ModelParams:
    if config.params_file is not None:
        params = load_model_params(config.params_file)
        if params.dims != config.dims:
            raise ValidationError(
                f"parameter file dims {params.dims} do not match config dims {config.dims}"
            )
        if params.num_classes != config.pipeline.num_classes:
            raise ValidationError(
                f"parameter file covers {params.num_classes} classes, "
                f"config expects {config.pipeline.num_classes}"
            )
        return params
    return init_model_params(
        config.seed, config.dims, config.pipeline.num_classes,
        num_basic_modules=config.num_basic_modules,
        advanced_ratio=config.pipeline.advanced_ratio,
    )


def cmd_synth(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenario = generate_scenario(config.scenario)
    header = config_echo(config, "synth")
    proposals_path = config.artifact_path("proposals", out_dir)
    tracks_path = config.artifact_path("tracks", out_dir)
    write_proposals(proposals_path, scenario.support_frames(), header=header)
    write_tracks(tracks_path, scenario.tracks, header=header)
    total = sum(len(f.proposals) for f in scenario.frames)
    print(f"synth: {len(scenario.frames)} frames, {total} proposals, "
          f"{len(scenario.tracks)} tracks -> {proposals_path}, {tracks_path}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.seed, args.mode)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = config_echo(config, "infer")
    proposals_path = config.artifact_path("proposals", out_dir)
    detections_path = config.artifact_path("detections", out_dir)
    weights_path = config.artifact_path("weights", out_dir)

    frames = read_proposals(proposals_path)
    if not frames:
        write_detections(detections_path, [], header=header)
        if config.link.emit_weights:
            write_weights(weights_path, [], header=header)
        print(f"infer: empty proposal file, wrote empty {detections_path}")
        return 0

    model = _model_for(config)
    started = time.perf_counter()

    def report(t, detections, seconds):
        count = len(frames[t])
        print(f"frame {t}: {count} proposals, {len(detections)} detections, "
              f"{seconds * 1000.0:.2f} ms")

    detections, retained = run_video(
        frames, model.basic, model.advanced, model.head, config.pipeline,
        mode=config.mode, on_frame=report,
    )
    elapsed = time.perf_counter() - started
    write_detections(detections_path, detections, header=header)
    if config.link.emit_weights:
        write_weights(weights_path, retained, header=header)
    total = sum(len(d) for d in detections)
    print(f"infer: {len(frames)} frames, {total} detections in {elapsed:.3f} s "
          f"({elapsed / len(frames) * 1000.0:.2f} ms/frame) -> {detections_path}")
    return 0


def cmd_link(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.seed)
    if args.relation_free:
        config = replace(config, link=replace(config.link, relation_free=True))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = config_echo(config, "link")

    dets_by_frame = read_detections(config.artifact_path("detections", out_dir))
    if config.link.relation_free:
        weights_by_frame = None
    else:
        weights_path = config.artifact_path("weights", out_dir)
        if not weights_path.exists():
            raise FileNotFoundError(
                f"weights file {weights_path} is required unless --relation-free is set"
            )
        weights_by_frame = read_weights(weights_path)

    tubes, rescored = link_and_rescore(
        dets_by_frame, weights_by_frame, config.pipeline.num_classes,
        max_tubes=config.link.max_tubes, min_path_score=config.link.min_path_score,
    )
    tubes_path = config.artifact_path("tubes", out_dir)
    rescored_path = config.artifact_path("rescored", out_dir)
    write_tubes(tubes_path, tubes, header=header)
    ordered = [rescored[t] for t in sorted(rescored)]
    write_detections(rescored_path, ordered, header=header)
    print(f"link: {len(tubes)} tubes over {len(dets_by_frame)} frames "
          f"-> {tubes_path}, {rescored_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    detections_path = Path(args.detections) if args.detections \
        else config.artifact_path("detections", out_dir)
    tracks_path = Path(args.tracks) if args.tracks \
        else config.artifact_path("tracks", out_dir)
    dets_by_frame = read_detections(detections_path)
    tracks = read_tracks(tracks_path)
    flat = [d for dets in dets_by_frame.values() for d in dets]
    ground_truth = tracks_to_ground_truth(tracks)
    result = evaluate_detections(flat, ground_truth,
                                 iou_threshold=args.iou_thresh,
                                 num_classes=config.pipeline.num_classes)
    without_gt = sorted({d.class_id for d in flat} - set(result.per_class))
    if without_gt:
        print(f"note: ignoring detections for classes without ground truth: {without_gt}")

    summary_path = config.artifact_path("eval_summary", out_dir)
    with open(summary_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["class", "ap", "num_ground_truth", "num_detections"])
        for class_id, entry in sorted(result.per_class.items()):
            writer.writerow([class_id, f"{entry.ap:.12g}",
                             entry.num_ground_truth, entry.num_detections])
        writer.writerow(["mean", f"{result.mean_ap:.12g}", "", ""])

    for class_id, entry in sorted(result.per_class.items()):
        print(f"class {class_id}: AP = {entry.ap:.4f} "
              f"({entry.num_detections} detections, {entry.num_ground_truth} gt)")
    print(f"mAP = {result.mean_ap:.6f} (IoU >= {args.iou_thresh})")

    if not args.no_figures:
        figure_paths = render_pr_curves(result, out_dir)
        figure_paths.append(render_ap_bars(result, out_dir / "ap_per_class.png"))
        print(f"eval: wrote {summary_path} and {len(figure_paths)} figures to {out_dir}")
    else:
        print(f"eval: wrote {summary_path}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    dims = Dims(d_model=args.d_model, d_k=args.d_k, d_rel=args.d_rel,
                d_geo=args.d_geo, num_heads=args.heads)
    worst = 0.0
    for trial in range(args.trials):
        report = finite_difference_check(args.seed + trial, dims,
                                         n_refs=args.refs, n_pool=args.pool,
                                         step=args.step)
        worst = max(worst, report.max_rel_error)
        print(f"seed {report.seed}: max relative error {report.max_rel_error:.3e}")
    status = "PASS" if worst < PASS_THRESHOLD else "FAIL"
    print(f"gradcheck: {args.trials} trials, worst relative error {worst:.3e} "
          f"(threshold {PASS_THRESHOLD:.0e}) -> {status}")
    return 0 if worst < PASS_THRESHOLD else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reldet",
        description="Streaming relation-reasoning detector on proposal features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out-dir", default=".", help="artifact directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the run (and scenario) seed")

    p_synth = sub.add_parser("synth", help="generate a synthetic scenario")
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_infer = sub.add_parser("infer", help="run streaming inference on a proposal file")
    common(p_infer)
    p_infer.add_argument("--mode", choices=("basic_only", "full"), default=None,
                         help="override the distillation mode")
    p_infer.set_defaults(func=cmd_infer)

    p_link = sub.add_parser("link", help="link detections into tubes and rescore")
    common(p_link)
    p_link.add_argument("--relation-free", action="store_true",
                        help="ignore relation weights (exp factor becomes 1)")
    p_link.set_defaults(func=cmd_link)

    p_eval = sub.add_parser("eval", help="score detections against ground-truth tracks")
    common(p_eval)
    p_eval.add_argument("--iou-thresh", type=float, default=0.5)
    p_eval.add_argument("--detections", default=None, help="detections file to score")
    p_eval.add_argument("--tracks", default=None, help="ground-truth track file")
    p_eval.add_argument("--no-figures", action="store_true",
                        help="skip the PR and AP figures")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--trials", type=int, default=20)
    p_grad.add_argument("--d-model", type=int, default=16)
    p_grad.add_argument("--d-k", type=int, default=8)
    p_grad.add_argument("--d-rel", type=int, default=8)
    p_grad.add_argument("--d-geo", type=int, default=16)
    p_grad.add_argument("--heads", type=int, default=2)
    p_grad.add_argument("--refs", type=int, default=3)
    p_grad.add_argument("--pool", type=int, default=5)
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
