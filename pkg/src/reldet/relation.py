"""Geometry-biased multi-head attention over proposal sets.

Each head scores reference/support proposal pairs with a scaled dot product
of projected appearance features, multiplies the exponentiated logits by a
rectified geometry bias, and normalizes per reference row. The attended value
projections of all heads concatenate back to the model width and are added
residually to the reference features. An analytic backward pass mirrors the
forward for verification against finite differences.

Numerical contract: float64 throughout, softmax with row-max subtraction,
summation order fixed by ascending pool index, so reruns are bit-identical
and pool permutations move outputs by no more than rounding noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import BoxGeometry, Proposal, ValidationError

__all__ = [
    "Dims",
    "RelationHeadParams",
    "RelationModuleParams",
    "RelationWeights",
    "RelationForwardCache",
    "RelationHeadGrads",
    "RelationModuleGrads",
    "geometry_embedding",
    "geometry_embeddings",
    "relation_weights",
    "relation_module_forward",
    "relation_module_backward",
    "init_params",
]

# Floor applied after rectifying the geometry-bias dot product, so a row whose
# biases all clip to zero still normalizes.
GEOMETRY_BIAS_FLOOR = 1e-6

# Center offsets below this fraction of the reference extent are clamped
# before the log, so co-centered boxes stay finite.
RELATIVE_OFFSET_FLOOR = 1e-3

# Base wavelength of the sinusoidal encoding of relative geometry.
SINUSOID_WAVELENGTH = 1000.0


@dataclass(frozen=True)
class Dims:
    """Dimension bundle shared by every relation module of a run."""

    d_model: int = 1024
    d_k: int = 64
    d_rel: int = 64
    d_geo: int = 64
    num_heads: int = 16

    def __post_init__(self) -> None:
        for name in ("d_model", "d_k", "d_rel", "d_geo", "num_heads"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_rel * self.num_heads != self.d_model:
            raise ValidationError(
                "d_rel * num_heads must equal d_model "
                f"({self.d_rel} * {self.num_heads} != {self.d_model})"
            )
        if self.d_geo % 8 != 0:
            raise ValidationError(f"d_geo must be divisible by 8, got {self.d_geo}")


def _readonly_f64(value, name: str, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    if arr.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RelationHeadParams:
    """Projection matrices and geometry-bias vector for one attention head."""

    w_query: np.ndarray  # (d_model, d_k)
    w_key: np.ndarray    # (d_model, d_k)
    w_value: np.ndarray  # (d_model, d_rel)
    w_geo: np.ndarray    # (d_geo,)


@dataclass(frozen=True, eq=False)
class RelationModuleParams:
    """All heads of one relation module plus the dimension bundle they obey."""

    heads: tuple[RelationHeadParams, ...]
    dims: Dims

    def __post_init__(self) -> None:
        d = self.dims
        if len(self.heads) != d.num_heads:
            raise ValidationError(
                f"expected {d.num_heads} heads, got {len(self.heads)}"
            )
        checked = []
        for m, head in enumerate(self.heads):
            checked.append(
                RelationHeadParams(
                    w_query=_readonly_f64(head.w_query, f"head {m} w_query", (d.d_model, d.d_k)),
                    w_key=_readonly_f64(head.w_key, f"head {m} w_key", (d.d_model, d.d_k)),
                    w_value=_readonly_f64(head.w_value, f"head {m} w_value", (d.d_model, d.d_rel)),
                    w_geo=_readonly_f64(head.w_geo, f"head {m} w_geo", (d.d_geo,)),
                )
            )
        object.__setattr__(self, "heads", tuple(checked))


@dataclass(frozen=True, eq=False)
class RelationWeights:
    """Per-head relation weight matrices, one row per reference proposal.

    Every row of every head sums to 1 within 1e-6.
    """

    per_head: np.ndarray  # (num_heads, n_refs, n_pool)

    def __post_init__(self) -> None:
        arr = np.asarray(self.per_head, dtype=np.float64)
        if arr.ndim != 3:
            raise ValidationError("per_head must be (num_heads, n_refs, n_pool)")
        object.__setattr__(self, "per_head", arr)

    @property
    def num_heads(self) -> int:
        return self.per_head.shape[0]

    def row_sums(self) -> np.ndarray:
        return self.per_head.sum(axis=2)

    def head_mean(self) -> np.ndarray:
        """Average over heads, the quantity consumed by box linking."""
        return self.per_head.mean(axis=0)


def _box_array(boxes) -> np.ndarray:
    return np.array([(b.x1, b.y1, b.x2, b.y2) for b in boxes], dtype=np.float64).reshape(-1, 4)


def _relative_geometry(ref_boxes: np.ndarray, pool_boxes: np.ndarray) -> np.ndarray:
    """The 4 log-relative components for every (reference, support) pair.

    Offsets and sizes are normalized by the reference box (the query side).
    Returns (n_refs, n_pool, 4).
    """
    rcx = 0.5 * (ref_boxes[:, 0] + ref_boxes[:, 2])
    rcy = 0.5 * (ref_boxes[:, 1] + ref_boxes[:, 3])
    rw = ref_boxes[:, 2] - ref_boxes[:, 0]
    rh = ref_boxes[:, 3] - ref_boxes[:, 1]
    pcx = 0.5 * (pool_boxes[:, 0] + pool_boxes[:, 2])
    pcy = 0.5 * (pool_boxes[:, 1] + pool_boxes[:, 3])
    pw = pool_boxes[:, 2] - pool_boxes[:, 0]
    ph = pool_boxes[:, 3] - pool_boxes[:, 1]

    dx = np.abs(rcx[:, None] - pcx[None, :])
    dy = np.abs(rcy[:, None] - pcy[None, :])
    rw_col = rw[:, None]
    rh_col = rh[:, None]
    out = np.empty((ref_boxes.shape[0], pool_boxes.shape[0], 4), dtype=np.float64)
    out[:, :, 0] = np.log(np.maximum(dx, RELATIVE_OFFSET_FLOOR * rw_col) / rw_col)
    out[:, :, 1] = np.log(np.maximum(dy, RELATIVE_OFFSET_FLOOR * rh_col) / rh_col)
    out[:, :, 2] = np.log(pw[None, :] / rw_col)
    out[:, :, 3] = np.log(ph[None, :] / rh_col)
    return out


def _sinusoid_encode(components: np.ndarray, d_geo: int) -> np.ndarray:
    """Sinusoidal expansion of the 4 relative components into d_geo channels.

    Layout: component-major, then frequency, then (sin, cos); wavelengths run
    SINUSOID_WAVELENGTH**(k/F) for k in 0..F-1 with F = d_geo/8.
    """
    freqs = d_geo // 8
    wavelengths = SINUSOID_WAVELENGTH ** (np.arange(freqs) / freqs)
    scaled = components[..., :, None] / wavelengths  # (..., 4, F)
    encoded = np.stack([np.sin(scaled), np.cos(scaled)], axis=-1)  # (..., 4, F, 2)
    return encoded.reshape(*components.shape[:-1], d_geo)


def geometry_embeddings(ref_boxes, pool_boxes, d_geo: int) -> np.ndarray:
    """Pairwise geometry embeddings, shape (n_refs, n_pool, d_geo)."""
    if d_geo < 8 or d_geo % 8 != 0:
        raise ValidationError(f"d_geo must be a positive multiple of 8, got {d_geo}")
    rel = _relative_geometry(_box_array(ref_boxes), _box_array(pool_boxes))
    return _sinusoid_encode(rel, d_geo)


def geometry_embedding(g_i: BoxGeometry, g_j: BoxGeometry, d_geo: int) -> np.ndarray:
    """Embedding of the relative geometry of one (reference, support) box pair."""
    return geometry_embeddings([g_i], [g_j], d_geo)[0, 0]


def _feature_matrix(proposals, d_model: int, role: str) -> np.ndarray:
    if not proposals:
        return np.zeros((0, d_model), dtype=np.float64)
    for p in proposals:
        if p.feature.shape[0] != d_model:
            raise ValidationError(
                f"{role} proposal {p.id}: feature dimension "
                f"{p.feature.shape[0]} != d_model {d_model}"
            )
        if not np.isfinite(p.feature).all():
            raise ValidationError(f"{role} proposal {p.id}: feature has NaN/Inf entries")
    return np.stack([p.feature for p in proposals]).astype(np.float64, copy=False)


def _stabilized_parts(appearance_logits: np.ndarray, geometry_bias: np.ndarray):
    """Shifted exponentials, row norms, and weights of the biased softmax."""
    if appearance_logits.size:
        shifted = appearance_logits - appearance_logits.max(axis=1, keepdims=True)
    else:
        shifted = appearance_logits
    exp_shifted = np.exp(shifted)
    unnorm = geometry_bias * exp_shifted
    row_norms = unnorm.sum(axis=1, keepdims=True)
    weights = unnorm / row_norms if appearance_logits.size else unnorm
    return exp_shifted, row_norms, weights


def _normalized_rows(appearance_logits: np.ndarray, geometry_bias: np.ndarray) -> np.ndarray:
    """Bias-weighted softmax rows: b * exp(a - rowmax) normalized over the pool.

    Invariant under adding a constant to a whole row of logits.
    """
    return _stabilized_parts(appearance_logits, geometry_bias)[2]


@dataclass(eq=False)
class _HeadState:
    """Forward intermediates of one head, kept for the backward pass."""

    queries: np.ndarray        # (n_refs, d_k)
    keys: np.ndarray           # (n_pool, d_k)
    values: np.ndarray         # (n_pool, d_rel)
    exp_shifted: np.ndarray    # (n_refs, n_pool) exp(logits - rowmax)
    row_norms: np.ndarray      # (n_refs, 1)
    bias: np.ndarray           # (n_refs, n_pool) after rectify + floor
    bias_dot: np.ndarray       # (n_refs, n_pool) pre-rectification dot products
    weights: np.ndarray        # (n_refs, n_pool)


@dataclass(eq=False)
class RelationForwardCache:
    """Everything the analytic backward pass needs from one forward call."""

    params: RelationModuleParams
    ref_features: np.ndarray
    pool_features: np.ndarray
    embeddings: np.ndarray  # (n_refs, n_pool, d_geo)
    heads: list[_HeadState] = field(default_factory=list)


@dataclass(eq=False)
class RelationHeadGrads:
    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray
    w_geo: np.ndarray


@dataclass(eq=False)
class RelationModuleGrads:
    heads: list[RelationHeadGrads]
    ref_features: np.ndarray
    pool_features: np.ndarray


def _run_heads(refs, pool, params: RelationModuleParams):
    """Shared forward machinery for weights-only and full forward calls."""
    if not pool:
        raise ValidationError("supportive pool must be non-empty")
    d = params.dims
    ref_feats = _feature_matrix(refs, d.d_model, "reference")
    pool_feats = _feature_matrix(pool, d.d_model, "supportive")
    embeddings = geometry_embeddings([p.box for p in refs], [p.box for p in pool], d.d_geo)
    scale = 1.0 / math.sqrt(d.d_k)

    states: list[_HeadState] = []
    for head in params.heads:
        queries = ref_feats @ head.w_query
        keys = pool_feats @ head.w_key
        logits = (queries @ keys.T) * scale
        bias_dot = embeddings @ head.w_geo
        # rectify then floor; the floor dominates, so one maximum suffices
        bias = np.maximum(bias_dot, GEOMETRY_BIAS_FLOOR)
        exp_shifted, row_norms, weights = _stabilized_parts(logits, bias)
        states.append(
            _HeadState(
                queries=queries,
                keys=keys,
                values=pool_feats @ head.w_value,
                exp_shifted=exp_shifted,
                row_norms=row_norms,
                bias=bias,
                bias_dot=bias_dot,
                weights=weights,
            )
        )
    return ref_feats, pool_feats, embeddings, states


def relation_weights(refs: list[Proposal], pool: list[Proposal],
                     params: RelationModuleParams) -> RelationWeights:
    """Per-head relation weight matrices between references and the pool."""
    _, _, _, states = _run_heads(refs, pool, params)
    return RelationWeights(per_head=np.stack([s.weights for s in states]))


def relation_module_forward(refs: list[Proposal], pool: list[Proposal],
                            params: RelationModuleParams, with_cache: bool = False):
    """Relation-augmented reference features plus the weights that produced them.

    Returns (features, weights) of shapes (n_refs, d_model) and
    (num_heads, n_refs, n_pool); with ``with_cache=True`` a third element
    carries the state consumed by :func:`relation_module_backward`.
    """
    ref_feats, pool_feats, embeddings, states = _run_heads(refs, pool, params)
    blocks = [state.weights @ state.values for state in states]
    out = ref_feats + np.concatenate(blocks, axis=1)
    weights = RelationWeights(per_head=np.stack([s.weights for s in states]))
    if not with_cache:
        return out, weights
    cache = RelationForwardCache(
        params=params,
        ref_features=ref_feats,
        pool_features=pool_feats,
        embeddings=embeddings,
        heads=states,
    )
    return out, weights, cache


def relation_module_backward(upstream_grad: np.ndarray,
                             cache: RelationForwardCache) -> RelationModuleGrads:
    """Gradients of a scalar loss with the given upstream gradient on the output.

    Covers every head's projections, the geometry-bias vectors, and both
    feature inputs (reference and pool gradients are reported separately even
    when the same proposals appear in both sets).
    """
    if cache is None:
        raise ValidationError("relation_module_backward requires the forward cache")
    d = cache.params.dims
    n_refs = cache.ref_features.shape[0]
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if upstream.shape != (n_refs, d.d_model):
        raise ValidationError(
            f"upstream_grad must have shape {(n_refs, d.d_model)}, got {upstream.shape}"
        )

    d_ref = upstream.copy()
    d_pool = np.zeros_like(cache.pool_features)
    scale = 1.0 / math.sqrt(d.d_k)
    head_grads: list[RelationHeadGrads] = []

    for m, (head, state) in enumerate(zip(cache.params.heads, cache.heads)):
        d_block = upstream[:, m * d.d_rel:(m + 1) * d.d_rel]
        d_weights = d_block @ state.values.T
        d_values = state.weights.T @ d_block
        g_w_value = cache.pool_features.T @ d_values
        d_pool += d_values @ head.w_value.T

        # normalized-row backward: w = u / sum(u) with u = bias * exp_shifted
        row_dot = (d_weights * state.weights).sum(axis=1, keepdims=True)
        d_unnorm = (d_weights - row_dot) / state.row_norms
        d_logits = d_unnorm * state.bias * state.exp_shifted
        d_bias = d_unnorm * state.exp_shifted

        d_queries = (d_logits @ state.keys) * scale
        d_keys = (d_logits.T @ state.queries) * scale
        g_w_query = cache.ref_features.T @ d_queries
        g_w_key = cache.pool_features.T @ d_keys
        d_ref += d_queries @ head.w_query.T
        d_pool += d_keys @ head.w_key.T

        # bias = max(dot, floor): gradient passes only where the dot exceeds it
        d_bias_dot = d_bias * (state.bias_dot > GEOMETRY_BIAS_FLOOR)
        g_w_geo = np.einsum("ij,ijg->g", d_bias_dot, cache.embeddings)

        head_grads.append(
            RelationHeadGrads(
                w_query=g_w_query, w_key=g_w_key, w_value=g_w_value, w_geo=g_w_geo
            )
        )

    return RelationModuleGrads(heads=head_grads, ref_features=d_ref, pool_features=d_pool)


def _init_params_from_rng(rng: np.random.Generator, dims: Dims) -> RelationModuleParams:
    """Scaled-uniform head initialization; draw order is part of the format."""
    q_scale = 1.0 / math.sqrt(dims.d_model)
    g_scale = 1.0 / math.sqrt(dims.d_geo)
    heads = []
    for _ in range(dims.num_heads):
        heads.append(
            RelationHeadParams(
                w_query=rng.uniform(-q_scale, q_scale, (dims.d_model, dims.d_k)),
                w_key=rng.uniform(-q_scale, q_scale, (dims.d_model, dims.d_k)),
                w_value=rng.uniform(-q_scale, q_scale, (dims.d_model, dims.d_rel)),
                w_geo=rng.uniform(-g_scale, g_scale, dims.d_geo),
            )
        )
    return RelationModuleParams(heads=tuple(heads), dims=dims)


def init_params(seed: int, dims: Dims) -> RelationModuleParams:
    """Deterministic pseudo-random module parameters; same seed, same bytes."""
    return _init_params_from_rng(np.random.default_rng(seed), dims)
