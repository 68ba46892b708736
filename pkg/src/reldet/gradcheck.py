"""Finite-difference verification of the relation module's analytic backward pass.

Central differences perturb every parameter entry and every input feature of
a seeded random instance; per-block relative errors compare infinity norms.
The forward pass is the only machinery shared with the analytic side, so the
numerical gradient stays an independent reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BoxGeometry, Proposal, ValidationError
from .relation import (
    Dims,
    RelationHeadParams,
    RelationModuleParams,
    relation_module_backward,
    relation_module_forward,
)

__all__ = ["GradCheckReport", "random_instance", "finite_difference_check"]

DEFAULT_STEP = 1e-5
PASS_THRESHOLD = 1e-4


@dataclass(frozen=True)
class GradCheckReport:
    seed: int
    max_rel_error: float
    per_block: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < PASS_THRESHOLD


def _random_proposals(rng: np.random.Generator, count: int, frame: int,
                      d_model: int, id_offset: int) -> list[Proposal]:
    proposals = []
    for i in range(count):
        cx = rng.uniform(50.0, 500.0)
        cy = rng.uniform(50.0, 400.0)
        w = rng.uniform(20.0, 100.0)
        h = rng.uniform(20.0, 100.0)
        proposals.append(Proposal(
            id=id_offset + i,
            frame_index=frame,
            box=BoxGeometry(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2),
            feature=rng.standard_normal(d_model),
            objectness=float(rng.uniform(0.1, 1.0)),
        ))
    return proposals


def random_instance(seed: int, dims: Dims, n_refs: int = 3, n_pool: int = 5):
    """A seeded (refs, pool, params, upstream) quadruple for checking gradients."""
    if n_refs < 1 or n_pool < 1:
        raise ValidationError("need at least one reference and one pool proposal")
    rng = np.random.default_rng(seed)
    refs = _random_proposals(rng, n_refs, frame=0, d_model=dims.d_model, id_offset=0)
    pool = _random_proposals(rng, n_pool, frame=0, d_model=dims.d_model, id_offset=n_refs)
    params = _random_params(rng, dims)
    upstream = rng.standard_normal((n_refs, dims.d_model))
    return refs, pool, params, upstream


def _random_params(rng: np.random.Generator, dims: Dims) -> RelationModuleParams:
    heads = tuple(
        RelationHeadParams(
            w_query=rng.standard_normal((dims.d_model, dims.d_k)) / np.sqrt(dims.d_model),
            w_key=rng.standard_normal((dims.d_model, dims.d_k)) / np.sqrt(dims.d_model),
            w_value=rng.standard_normal((dims.d_model, dims.d_rel)) / np.sqrt(dims.d_model),
            w_geo=rng.standard_normal(dims.d_geo) / np.sqrt(dims.d_geo),
        )
        for _ in range(dims.num_heads)
    )
    return RelationModuleParams(heads=heads, dims=dims)


def _rebuild(refs, pool, dims, blocks: dict[str, np.ndarray]):
    heads = tuple(
        RelationHeadParams(
            w_query=blocks[f"head{m}.w_query"],
            w_key=blocks[f"head{m}.w_key"],
            w_value=blocks[f"head{m}.w_value"],
            w_geo=blocks[f"head{m}.w_geo"],
        )
        for m in range(dims.num_heads)
    )
    params = RelationModuleParams(heads=heads, dims=dims)
    from dataclasses import replace
    new_refs = [replace(p, feature=blocks["ref_features"][i]) for i, p in enumerate(refs)]
    new_pool = [replace(p, feature=blocks["pool_features"][j]) for j, p in enumerate(pool)]
    return new_refs, new_pool, params


def finite_difference_check(seed: int, dims: Dims, n_refs: int = 3, n_pool: int = 5,
                            step: float = DEFAULT_STEP) -> GradCheckReport:
    """Compare the analytic backward against central differences on one instance."""
    refs, pool, params, upstream = random_instance(seed, dims, n_refs, n_pool)

    blocks: dict[str, np.ndarray] = {}
    for m, head in enumerate(params.heads):
        blocks[f"head{m}.w_query"] = np.array(head.w_query)
        blocks[f"head{m}.w_key"] = np.array(head.w_key)
        blocks[f"head{m}.w_value"] = np.array(head.w_value)
        blocks[f"head{m}.w_geo"] = np.array(head.w_geo)
    blocks["ref_features"] = np.stack([p.feature for p in refs])
    blocks["pool_features"] = np.stack([p.feature for p in pool])

    def loss() -> float:
        new_refs, new_pool, new_params = _rebuild(refs, pool, dims, blocks)
        out, _ = relation_module_forward(new_refs, new_pool, new_params)
        return float(np.sum(upstream * out))

    _, _, cache = relation_module_forward(refs, pool, params, with_cache=True)
    grads = relation_module_backward(upstream, cache)
    analytic: dict[str, np.ndarray] = {}
    for m, head_grads in enumerate(grads.heads):
        analytic[f"head{m}.w_query"] = head_grads.w_query
        analytic[f"head{m}.w_key"] = head_grads.w_key
        analytic[f"head{m}.w_value"] = head_grads.w_value
        analytic[f"head{m}.w_geo"] = head_grads.w_geo
    analytic["ref_features"] = grads.ref_features
    analytic["pool_features"] = grads.pool_features

    per_block: dict[str, float] = {}
    for name, array in blocks.items():
        numeric = np.zeros_like(array)
        flat = array.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + step
            plus = loss()
            flat[index] = original - step
            minus = loss()
            flat[index] = original
            numeric_flat[index] = (plus - minus) / (2.0 * step)
        scale = max(
            float(np.abs(analytic[name]).max(initial=0.0)),
            float(np.abs(numeric).max(initial=0.0)),
            1e-8,
        )
        per_block[name] = float(np.abs(analytic[name] - numeric).max(initial=0.0)) / scale

    return GradCheckReport(
        seed=seed,
        max_rel_error=max(per_block.values()),
        per_block=per_block,
    )
