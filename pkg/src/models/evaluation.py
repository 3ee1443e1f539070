"""Evaluation models -- judge cases, verdicts and classic metric records."""
from dataclasses import dataclass
from enum import Enum

from PIL import Image

ASPECTS = ("text_alignment", "continuity", "consistency", "relevance")


class Decision(str, Enum):
    FIRST = "FIRST"
    SECOND = "SECOND"
    UNDECIDED = "UNDECIDED"

    def swapped(self) -> "Decision":
        if self is Decision.FIRST:
            return Decision.SECOND
        if self is Decision.SECOND:
            return Decision.FIRST
        return self


@dataclass
class JudgeCase:
    case_id: str
    instruction: str
    sequence_a: list[Image.Image]
    sequence_b: list[Image.Image]
    shuffle: bool = False

    def __post_init__(self):
        if len(self.sequence_a) != len(self.sequence_b):
            raise ValueError(
                f"sequence lengths differ: {len(self.sequence_a)} vs {len(self.sequence_b)}"
            )
        if not self.sequence_a:
            raise ValueError("judge sequences must not be empty")


@dataclass(frozen=True)
class JudgeVerdict:
    """Four aspect decisions in canonical A/B orientation."""

    decisions: tuple[Decision, Decision, Decision, Decision]
    raw: str = ""
    case_id: str = ""
    shuffle: bool = False

    def __post_init__(self):
        if len(self.decisions) != len(ASPECTS):
            raise ValueError(f"expected {len(ASPECTS)} decisions, got {len(self.decisions)}")

    def to_record(self) -> dict:
        return {
            "case_id": self.case_id,
            "shuffle": self.shuffle,
            "raw": self.raw,
            "decisions": [d.value for d in self.decisions],
        }

    @classmethod
    def from_record(cls, record: dict) -> "JudgeVerdict":
        return cls(
            decisions=tuple(Decision(d) for d in record["decisions"]),
            raw=record.get("raw", ""),
            case_id=record.get("case_id", ""),
            shuffle=bool(record.get("shuffle", False)),
        )


METRIC_DIRECTIONS = {
    "clip_score": "higher",
    "dreamsim": "lower",
    "l2_dino": "lower",
}


@dataclass(frozen=True)
class MetricRecord:
    name: str
    value: float

    def __post_init__(self):
        if self.name not in METRIC_DIRECTIONS:
            raise ValueError(f"unknown metric {self.name!r}")

    @property
    def direction(self) -> str:
        return METRIC_DIRECTIONS[self.name]

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "direction": self.direction}
