"""Streaming relation-reasoning engine for video object detection on proposal features.

A library plus CLI: geometry-biased multi-head relation modules, a two-stage
relation distillation cascade, sliding-buffer streaming inference, and
relation-weighted box linking with tube rescoring, verified end to end on
deterministic synthetic scenarios.
"""

from .core import (
    BoxGeometry,
    Detection,
    Proposal,
    ValidationError,
    iou,
    nms,
    sample_top_k,
    sample_top_ratio,
)
from .distill import (
    AdvancedStageParams,
    BasicStageParams,
    FeatureTransform,
    advanced_stage,
    basic_stage,
    distillation_forward,
)
from .linking import (
    Tube,
    extract_tubes,
    linking_score,
    mean_relation_weight,
    optimal_path,
    rescore_tube,
)
from .model import ModelParams, init_model_params
from .pipeline import (
    DetectionHeadParams,
    FrameBuffer,
    PipelineConfig,
    RetainedWeights,
    assemble_pools,
    detect_frame,
    run_video,
)
from .relation import (
    Dims,
    RelationHeadParams,
    RelationModuleParams,
    RelationWeights,
    geometry_embedding,
    init_params,
    relation_module_backward,
    relation_module_forward,
    relation_weights,
)
from .synth import (
    ObjectMotion,
    Scenario,
    ScenarioSpec,
    averaging_attention_params,
    generate_scenario,
    oracle_head,
)

__version__ = "0.1.0"
