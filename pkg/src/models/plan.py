"""Plan models -- planner tasks, steps, object tags and the state similarity matrix."""
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class Continuity(str, Enum):
    """How an object in one step relates to an object in an earlier step."""

    NEW = "new"
    SIMILAR = "similar"
    SHAPE_SIMILAR = "shape_similar"
    TEXTURE_SIMILAR = "texture_similar"


@dataclass(frozen=True)
class InstructionTask:
    goal: str
    requested_step_count: int = 3
    task_id: str = ""
    category: str = ""

    def __post_init__(self):
        if not self.goal or not self.goal.strip():
            raise ValueError("InstructionTask.goal must be non-empty")
        if self.requested_step_count < 1:
            raise ValueError("InstructionTask.requested_step_count must be >= 1")


@dataclass(frozen=True)
class ObjectTag:
    label: str
    continuity: Continuity
    reference_step: Optional[int] = None  # 0-based, absent iff continuity is NEW


@dataclass(frozen=True)
class PlanStep:
    index: int
    title: str
    action: str
    state: str
    objects: tuple[ObjectTag, ...] = ()


@dataclass(frozen=True)
class SimilarityMatrix:
    """Row i scales how much image i borrows from every other image."""

    values: tuple[tuple[float, ...], ...]

    @classmethod
    def from_array(cls, array) -> "SimilarityMatrix":
        rows = np.asarray(array, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError(f"similarity matrix must be 2-D, got shape {rows.shape}")
        return cls(tuple(tuple(float(v) for v in row) for row in rows))

    @classmethod
    def identity(cls, n: int) -> "SimilarityMatrix":
        return cls.from_array(np.eye(n))

    @classmethod
    def ones(cls, n: int) -> "SimilarityMatrix":
        return cls.from_array(np.ones((n, n)))

    @property
    def size(self) -> int:
        return len(self.values)

    def to_numpy(self) -> np.ndarray:
        if not self.values:
            return np.zeros((0, 0))
        return np.array(self.values, dtype=np.float64)


@dataclass(frozen=True)
class Plan:
    goal: str
    steps: tuple[PlanStep, ...]
    similarity: SimilarityMatrix

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> list[str]:
        return [s.action for s in self.steps]

    @property
    def states(self) -> list[str]:
        return [s.state for s in self.steps]


# ---------------------------------------------------------------------------
# Wire schema of the planner's JSON answer. Key names follow the in-context
# exemplar exactly; conversion to the dataclasses above happens in
# src.services.planner.
# ---------------------------------------------------------------------------

class RawPlanStep(BaseModel):
    model_config = ConfigDict(extra="ignore")

    step: str = ""
    object: list[list[str | int | float]] = Field(default_factory=list)
    action: str
    state_of_main_object: str


class RawPlan(BaseModel):
    model_config = ConfigDict(extra="ignore")

    goal: str
    steps: list[RawPlanStep]
    relation: list[list[float]]
