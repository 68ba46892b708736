"""Whole-model parameter bundle and its deterministic initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ValidationError
from .distill import AdvancedStageParams, BasicStageParams, FeatureTransform
from .pipeline import DetectionHeadParams
from .relation import Dims, _init_params_from_rng

__all__ = ["ModelParams", "init_model_params"]


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Everything a run needs: both distillation stages plus the detection head."""

    dims: Dims
    num_classes: int
    basic: BasicStageParams
    advanced: AdvancedStageParams
    head: DetectionHeadParams
    seed: int

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.head.num_classes != self.num_classes:
            raise ValidationError(
                f"head covers {self.head.num_classes} classes, expected {self.num_classes}"
            )
        if self.head.d_model != self.dims.d_model:
            raise ValidationError("head width does not match d_model")


def _init_head(rng: np.random.Generator, dims: Dims, num_classes: int) -> DetectionHeadParams:
    scale = 1.0 / np.sqrt(dims.d_model)
    return DetectionHeadParams(
        class_weight=rng.uniform(-scale, scale, (dims.d_model, num_classes + 1)),
        class_bias=np.zeros(num_classes + 1),
        # small regression init keeps decoded boxes near their proposals
        reg_weight=0.01 * rng.uniform(-scale, scale, (dims.d_model, 4 * num_classes)),
        reg_bias=np.zeros(4 * num_classes),
    )


def init_model_params(seed: int, dims: Dims, num_classes: int,
                      num_basic_modules: int = 2,
                      advanced_ratio: float = 20.0) -> ModelParams:
    """Deterministic bundle init; the draw order below is part of the format.

    Order: basic modules, inter-module transforms, advanced pool module,
    advanced distill module, detection head. Same seed, same bytes.
    """
    if num_basic_modules < 1:
        raise ValidationError(f"num_basic_modules must be >= 1, got {num_basic_modules}")
    rng = np.random.default_rng(seed)
    modules = tuple(_init_params_from_rng(rng, dims) for _ in range(num_basic_modules))
    transforms = tuple(
        FeatureTransform.near_identity(dims.d_model, rng)
        for _ in range(num_basic_modules - 1)
    )
    basic = BasicStageParams(modules=modules, transforms=transforms)
    advanced = AdvancedStageParams(
        pool_module=_init_params_from_rng(rng, dims),
        distill_module=_init_params_from_rng(rng, dims),
        r_percent=advanced_ratio,
    )
    head = _init_head(rng, dims, num_classes)
    return ModelParams(dims=dims, num_classes=num_classes, basic=basic,
                       advanced=advanced, head=head, seed=seed)
