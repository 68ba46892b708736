"""Two-stage relation distillation: a stacked basic stage and a cascaded advanced stage.

The basic stage runs N_b relation modules over the full supportive pool, with
a rectified affine transform between consecutive modules. The advanced stage
first refines a high-objectness subset of the pool against the whole pool,
then lets the refined subset re-augment the reference proposals. Only
features change; proposal geometry, ids, and objectness pass through.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import Proposal, ValidationError, sample_top_ratio
from .relation import RelationModuleParams, RelationWeights, relation_module_forward

__all__ = [
    "FeatureTransform",
    "BasicStageParams",
    "AdvancedStageParams",
    "basic_stage",
    "advanced_stage",
    "distillation_forward",
]

MODES = ("basic_only", "full")


@dataclass(frozen=True, eq=False)
class FeatureTransform:
    """Affine map with rectification, applied between stacked relation modules."""

    weight: np.ndarray  # (d_model, d_model)
    bias: np.ndarray    # (d_model,)

    def __post_init__(self) -> None:
        weight = np.array(self.weight, dtype=np.float64, copy=True)
        bias = np.array(self.bias, dtype=np.float64, copy=True)
        if weight.ndim != 2 or weight.shape[0] != weight.shape[1]:
            raise ValidationError(f"transform weight must be square, got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ValidationError(
                f"transform bias shape {bias.shape} does not match weight {weight.shape}"
            )
        if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
            raise ValidationError("transform parameters must be finite")
        weight.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return np.maximum(features @ self.weight + self.bias, 0.0)

    @classmethod
    def identity(cls, d_model: int) -> "FeatureTransform":
        return cls(weight=np.eye(d_model), bias=np.zeros(d_model))

    @classmethod
    def near_identity(cls, d_model: int, rng: np.random.Generator,
                      noise_scale: float = 1e-2) -> "FeatureTransform":
        """Identity plus small seeded noise, zero offset; keeps untrained stacks stable."""
        weight = np.eye(d_model) + rng.uniform(-noise_scale, noise_scale, (d_model, d_model))
        return cls(weight=weight, bias=np.zeros(d_model))


@dataclass(frozen=True, eq=False)
class BasicStageParams:
    """N_b relation modules plus the N_b - 1 transforms between them."""

    modules: tuple[RelationModuleParams, ...]
    transforms: tuple[FeatureTransform, ...]

    def __post_init__(self) -> None:
        if not self.modules:
            raise ValidationError("basic stage needs at least one relation module")
        if len(self.transforms) != len(self.modules) - 1:
            raise ValidationError(
                f"expected {len(self.modules) - 1} transforms for "
                f"{len(self.modules)} modules, got {len(self.transforms)}"
            )
        d_model = self.modules[0].dims.d_model
        for module in self.modules:
            if module.dims.d_model != d_model:
                raise ValidationError("all basic-stage modules must share d_model")
        for transform in self.transforms:
            if transform.weight.shape[0] != d_model:
                raise ValidationError("transform width does not match module d_model")
        object.__setattr__(self, "modules", tuple(self.modules))
        object.__setattr__(self, "transforms", tuple(self.transforms))

    @property
    def num_modules(self) -> int:
        return len(self.modules)


@dataclass(frozen=True, eq=False)
class AdvancedStageParams:
    """Modules of the cascade: pool refinement, then reference distillation."""

    pool_module: RelationModuleParams
    distill_module: RelationModuleParams
    r_percent: float = 20.0

    def __post_init__(self) -> None:
        if not (0.0 < self.r_percent <= 100.0):
            raise ValidationError(f"r_percent {self.r_percent} outside (0, 100]")
        if self.pool_module.dims.d_model != self.distill_module.dims.d_model:
            raise ValidationError("advanced-stage modules must share d_model")


def _with_features(proposals: list[Proposal], features: np.ndarray) -> list[Proposal]:
    return [replace(p, feature=features[i]) for i, p in enumerate(proposals)]


def basic_stage(refs: list[Proposal], pool: list[Proposal],
                params: BasicStageParams) -> tuple[list[Proposal], RelationWeights]:
    """Stacked relation reasoning of the references against the full pool.

    Module 1 sees the raw reference features; each later module sees the
    transformed output of its predecessor. Returns the refined references and
    the weight matrices of the last module, which box linking consumes.
    """
    current = list(refs)
    last_weights: RelationWeights | None = None
    for k, module in enumerate(params.modules):
        if k > 0:
            transformed = params.transforms[k - 1].apply(
                np.stack([p.feature for p in current]) if current
                else np.zeros((0, module.dims.d_model))
            )
            current = _with_features(current, transformed)
        features, last_weights = relation_module_forward(current, pool, module)
        current = _with_features(current, features)
    assert last_weights is not None
    return current, last_weights


def advanced_stage(refined_refs: list[Proposal], pool: list[Proposal],
                   advanced_pool: list[Proposal],
                   params: AdvancedStageParams) -> list[Proposal]:
    """Cascaded distillation: refine the advanced pool, then re-augment the references.

    Features are replaced throughout; geometry is never touched, so the
    distill module's geometry bias still sees the original boxes.
    """
    if not pool or not advanced_pool:
        raise ValidationError("advanced stage requires non-empty pools")
    pool_ids = {p.id for p in pool}
    missing = [p.id for p in advanced_pool if p.id not in pool_ids]
    if missing:
        raise ValidationError(
            f"advanced pool contains ids not in the supportive pool: {missing}"
        )
    refined_features, _ = relation_module_forward(advanced_pool, pool, params.pool_module)
    refined_advanced = _with_features(advanced_pool, refined_features)
    out_features, _ = relation_module_forward(refined_refs, refined_advanced,
                                              params.distill_module)
    return _with_features(refined_refs, out_features)


def distillation_forward(refs: list[Proposal], pool: list[Proposal],
                         basic: BasicStageParams, advanced: AdvancedStageParams,
                         mode: str = "full") -> tuple[list[Proposal], RelationWeights]:
    """Run the configured cascade; the returned weights are always the last basic module's."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    refined, last_weights = basic_stage(refs, pool, basic)
    if mode == "basic_only":
        return refined, last_weights
    advanced_pool = sample_top_ratio(pool, advanced.r_percent)
    upgraded = advanced_stage(refined, pool, advanced_pool, advanced)
    return upgraded, last_weights
