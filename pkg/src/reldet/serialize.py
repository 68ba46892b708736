"""Flat binary parameter container plus a JSON manifest.

Layout (all integers little-endian):

    magic   8 bytes  b"RELDETPB"
    u32     version (currently 1)
    u32 x7  d_model, d_k, d_rel, d_geo, num_heads, num_basic_modules, num_classes
    i64     seed
    f64     advanced-stage sampling ratio (percent)
    arrays  raw row-major little-endian float64, in this order:
            basic module 0..N_b-1: per head (w_query, w_key, w_value, w_geo);
            transform 0..N_b-2: (weight, bias);
            advanced pool module heads; advanced distill module heads;
            detection head (class_weight, class_bias, reg_weight, reg_bias)

The manifest lists every array with its name, shape, and byte offset; the
loader works from the binary alone and uses the manifest, when given, as a
cross-check. All relation modules of a container share one dimension bundle.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import ValidationError
from .distill import AdvancedStageParams, BasicStageParams, FeatureTransform
from .model import ModelParams
from .pipeline import DetectionHeadParams
from .relation import Dims, RelationHeadParams, RelationModuleParams

__all__ = ["save_model_params", "load_model_params", "CONTAINER_MAGIC", "CONTAINER_VERSION"]

CONTAINER_MAGIC = b"RELDETPB"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<8sI7Iqd")


def _array_plan(dims: Dims, num_basic: int, num_classes: int) -> list[tuple[str, tuple[int, ...]]]:
    head_shapes = [
        ("w_query", (dims.d_model, dims.d_k)),
        ("w_key", (dims.d_model, dims.d_k)),
        ("w_value", (dims.d_model, dims.d_rel)),
        ("w_geo", (dims.d_geo,)),
    ]
    plan: list[tuple[str, tuple[int, ...]]] = []
    for b in range(num_basic):
        for m in range(dims.num_heads):
            plan.extend((f"basic.{b}.head.{m}.{name}", shape) for name, shape in head_shapes)
    for t in range(num_basic - 1):
        plan.append((f"transform.{t}.weight", (dims.d_model, dims.d_model)))
        plan.append((f"transform.{t}.bias", (dims.d_model,)))
    for stage in ("advanced.pool", "advanced.distill"):
        for m in range(dims.num_heads):
            plan.extend((f"{stage}.head.{m}.{name}", shape) for name, shape in head_shapes)
    plan.append(("head.class_weight", (dims.d_model, num_classes + 1)))
    plan.append(("head.class_bias", (num_classes + 1,)))
    plan.append(("head.reg_weight", (dims.d_model, 4 * num_classes)))
    plan.append(("head.reg_bias", (4 * num_classes,)))
    return plan


def _collect_arrays(params: ModelParams) -> list[np.ndarray]:
    arrays: list[np.ndarray] = []
    for module in params.basic.modules:
        if module.dims != params.dims:
            raise ValidationError(
                "container requires every relation module to share one dimension bundle"
            )
        for head in module.heads:
            arrays.extend([head.w_query, head.w_key, head.w_value, head.w_geo])
    for transform in params.basic.transforms:
        arrays.extend([transform.weight, transform.bias])
    for module in (params.advanced.pool_module, params.advanced.distill_module):
        if module.dims != params.dims:
            raise ValidationError(
                "container requires every relation module to share one dimension bundle"
            )
        for head in module.heads:
            arrays.extend([head.w_query, head.w_key, head.w_value, head.w_geo])
    arrays.extend([params.head.class_weight, params.head.class_bias,
                   params.head.reg_weight, params.head.reg_bias])
    return arrays


def save_model_params(params: ModelParams, bin_path: str | Path,
                      manifest_path: str | Path | None = None) -> None:
    """Write the container and its manifest (default: bin path + '.json')."""
    bin_path = Path(bin_path)
    manifest_path = Path(manifest_path) if manifest_path is not None \
        else bin_path.with_suffix(bin_path.suffix + ".json")
    dims = params.dims
    num_basic = params.basic.num_modules
    plan = _array_plan(dims, num_basic, params.num_classes)
    arrays = _collect_arrays(params)
    assert len(plan) == len(arrays)

    header = _HEADER.pack(
        CONTAINER_MAGIC, CONTAINER_VERSION,
        dims.d_model, dims.d_k, dims.d_rel, dims.d_geo, dims.num_heads,
        num_basic, params.num_classes, params.seed, params.advanced.r_percent,
    )
    manifest_arrays = []
    offset = len(header)
    with open(bin_path, "wb") as handle:
        handle.write(header)
        for (name, shape), array in zip(plan, arrays):
            if array.shape != shape:
                raise ValidationError(f"{name}: expected shape {shape}, got {array.shape}")
            blob = np.ascontiguousarray(array, dtype="<f8").tobytes()
            manifest_arrays.append({
                "name": name,
                "shape": list(shape),
                "offset_bytes": offset,
                "num_bytes": len(blob),
            })
            handle.write(blob)
            offset += len(blob)

    manifest = {
        "format": "reldet-params",
        "version": CONTAINER_VERSION,
        "dims": {
            "d_model": dims.d_model, "d_k": dims.d_k, "d_rel": dims.d_rel,
            "d_geo": dims.d_geo, "num_heads": dims.num_heads,
        },
        "num_basic_modules": num_basic,
        "num_classes": params.num_classes,
        "advanced_ratio": params.advanced.r_percent,
        "seed": params.seed,
        "dtype": "<f8",
        "arrays": manifest_arrays,
    }
    with open(manifest_path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_model_params(bin_path: str | Path,
                      manifest_path: str | Path | None = None) -> ModelParams:
    """Rebuild a parameter bundle from the binary container."""
    bin_path = Path(bin_path)
    blob = bin_path.read_bytes()
    if len(blob) < _HEADER.size:
        raise ValidationError(f"{bin_path}: truncated container header")
    (magic, version, d_model, d_k, d_rel, d_geo, num_heads,
     num_basic, num_classes, seed, ratio) = _HEADER.unpack_from(blob, 0)
    if magic != CONTAINER_MAGIC:
        raise ValidationError(f"{bin_path}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise ValidationError(f"{bin_path}: unsupported container version {version}")
    dims = Dims(d_model=d_model, d_k=d_k, d_rel=d_rel, d_geo=d_geo, num_heads=num_heads)
    plan = _array_plan(dims, num_basic, num_classes)

    offset = _HEADER.size
    arrays: dict[str, np.ndarray] = {}
    for name, shape in plan:
        size = 8 * int(np.prod(shape))
        if offset + size > len(blob):
            raise ValidationError(f"{bin_path}: container truncated at array {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size // 8,
                                     offset=offset).reshape(shape)
        offset += size
    if offset != len(blob):
        raise ValidationError(f"{bin_path}: {len(blob) - offset} trailing bytes")

    if manifest_path is not None:
        with open(manifest_path, "r", encoding="utf-8") as handle:
            manifest = json.load(handle)
        expected = {entry["name"]: tuple(entry["shape"]) for entry in manifest["arrays"]}
        actual = {name: shape for name, shape in plan}
        if expected != actual:
            raise ValidationError(f"{manifest_path}: manifest does not match container")

    def module(prefix: str) -> RelationModuleParams:
        heads = tuple(
            RelationHeadParams(
                w_query=arrays[f"{prefix}.head.{m}.w_query"],
                w_key=arrays[f"{prefix}.head.{m}.w_key"],
                w_value=arrays[f"{prefix}.head.{m}.w_value"],
                w_geo=arrays[f"{prefix}.head.{m}.w_geo"],
            )
            for m in range(dims.num_heads)
        )
        return RelationModuleParams(heads=heads, dims=dims)

    basic = BasicStageParams(
        modules=tuple(module(f"basic.{b}") for b in range(num_basic)),
        transforms=tuple(
            FeatureTransform(weight=arrays[f"transform.{t}.weight"],
                             bias=arrays[f"transform.{t}.bias"])
            for t in range(num_basic - 1)
        ),
    )
    advanced = AdvancedStageParams(
        pool_module=module("advanced.pool"),
        distill_module=module("advanced.distill"),
        r_percent=ratio,
    )
    head = DetectionHeadParams(
        class_weight=arrays["head.class_weight"],
        class_bias=arrays["head.class_bias"],
        reg_weight=arrays["head.reg_weight"],
        reg_bias=arrays["head.reg_bias"],
    )
    return ModelParams(dims=dims, num_classes=num_classes, basic=basic,
                       advanced=advanced, head=head, seed=seed)
