"""Services package."""
from src.services.attention_hooks import BackendError, PromptTooLong, UnsupportedBackend, install_processor
from src.services.judge import ParseError, VlmJudge, aggregate, build_judge_prompt, parse_verdict
from src.services.llm_client import ClientError, FixtureChatClient, HttpChatClient, ScriptedChatClient
from src.services.metrics import MockMetricAdapter, classic_metrics
from src.services.pipeline import ConfigError, PhaseError, compare, load_manifest, load_run_config, run
from src.services.planner import (
    MalformedResponse,
    PlanValidationError,
    SchemaViolation,
    build_planner_prompt,
    generate_dataset,
    parse_plan,
    validate_plan,
)
from src.services.recaption import compose_prompts
from src.services.region_masks import AdapterError, ImageFormatError, downsample, segment, select_shared_objects
from src.services.response_cache import ResponseCache
from src.services.shared_attention import (
    IndexOutOfRange,
    ShapeMismatch,
    attention_router,
    concat_kv,
    inflate_masks,
    inflate_similarity,
    shared_attention,
)
from src.services.toy_backend import generate_sequence, toy_denoiser

__all__ = [
    "BackendError",
    "PromptTooLong",
    "UnsupportedBackend",
    "install_processor",
    "ParseError",
    "VlmJudge",
    "aggregate",
    "build_judge_prompt",
    "parse_verdict",
    "ClientError",
    "FixtureChatClient",
    "HttpChatClient",
    "ScriptedChatClient",
    "MockMetricAdapter",
    "classic_metrics",
    "ConfigError",
    "PhaseError",
    "compare",
    "load_manifest",
    "load_run_config",
    "run",
    "MalformedResponse",
    "PlanValidationError",
    "SchemaViolation",
    "build_planner_prompt",
    "generate_dataset",
    "parse_plan",
    "validate_plan",
    "compose_prompts",
    "AdapterError",
    "ImageFormatError",
    "downsample",
    "segment",
    "select_shared_objects",
    "ResponseCache",
    "IndexOutOfRange",
    "ShapeMismatch",
    "attention_router",
    "concat_kv",
    "inflate_masks",
    "inflate_similarity",
    "shared_attention",
    "generate_sequence",
    "toy_denoiser",
]
