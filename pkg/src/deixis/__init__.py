"""Grounding engine and benchmark harness for egocentric pointing-based referring."""

from .geometry import (
    BBox2D,
    CoordinateMode,
    Ray2D,
    SpatialAnchor,
    anchor_tokens,
    centroid,
    convert_mode,
    iou,
    quantize_coord,
    ray_box_intersect,
    sanitize,
)
from .parsing import ParseOutcome, extract_bbox, normalize_answer
from .pipeline import (
    GroundingOutcome,
    PrunedCandidate,
    ReasoningTrace,
    prune_candidates,
    resolve,
    run_direct,
    run_language_only,
    run_svcot,
)
from .schema import Annotation, Sample, Task, TestCase, expand_cases, load_dataset, split_dataset
from .scorers import (
    ChatClient,
    DirectionEstimate,
    EndpointConfig,
    PromptTemplate,
    SemanticScore,
    estimate_direction,
    mock_verify,
    remote_verify,
    render_prompt,
)
from .synth import SceneConfig, generate_fixture_set, generate_scene

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "BBox2D",
    "ChatClient",
    "CoordinateMode",
    "DirectionEstimate",
    "EndpointConfig",
    "GroundingOutcome",
    "ParseOutcome",
    "PromptTemplate",
    "PrunedCandidate",
    "Ray2D",
    "ReasoningTrace",
    "Sample",
    "SceneConfig",
    "SemanticScore",
    "SpatialAnchor",
    "Task",
    "TestCase",
    "anchor_tokens",
    "centroid",
    "convert_mode",
    "estimate_direction",
    "expand_cases",
    "extract_bbox",
    "generate_fixture_set",
    "generate_scene",
    "iou",
    "load_dataset",
    "mock_verify",
    "normalize_answer",
    "prune_candidates",
    "quantize_coord",
    "ray_box_intersect",
    "remote_verify",
    "render_prompt",
    "resolve",
    "run_direct",
    "run_language_only",
    "run_svcot",
    "sanitize",
    "split_dataset",
]
