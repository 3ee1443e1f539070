"""Domain models package."""
from src.models.plan import (
    Continuity,
    InstructionTask,
    ObjectTag,
    Plan,
    PlanStep,
    RawPlan,
    RawPlanStep,
    SimilarityMatrix,
)
from src.models.generation import (
    AttentionSchedule,
    BackendConfig,
    FeatureBlock,
    GenerationResult,
    ObjectMask,
    PromptMode,
    RegionMaskSet,
    StepPrompt,
    ToyDenoiserSpec,
    TraceEntry,
)
from src.models.evaluation import ASPECTS, Decision, JudgeCase, JudgeVerdict, MetricRecord
from src.models.run import GenerationManifest, RunConfig, SharingMode

__all__ = [
    "Continuity",
    "InstructionTask",
    "ObjectTag",
    "Plan",
    "PlanStep",
    "RawPlan",
    "RawPlanStep",
    "SimilarityMatrix",
    "AttentionSchedule",
    "BackendConfig",
    "FeatureBlock",
    "GenerationResult",
    "ObjectMask",
    "PromptMode",
    "RegionMaskSet",
    "StepPrompt",
    "ToyDenoiserSpec",
    "TraceEntry",
    "ASPECTS",
    "Decision",
    "JudgeCase",
    "JudgeVerdict",
    "MetricRecord",
    "GenerationManifest",
    "RunConfig",
    "SharingMode",
]
