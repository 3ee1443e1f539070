"""In-context planner: prompt assembly, plan parsing/validation and dataset generation."""
import hashlib
import json
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from pydantic import ValidationError
from tqdm import tqdm

import config
from src.models.plan import (
    Continuity,
    InstructionTask,
    ObjectTag,
    Plan,
    PlanStep,
    RawPlan,
    SimilarityMatrix,
)
from src.services.llm_client import ChatClient, ClientError, cached_complete
from src.services.response_cache import CorruptCacheEntry, ResponseCache

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = "planner-v1"

SYSTEM_PROMPT = (
    "You are ChatGPT-4, act like visual and instructional experts, generate step-by-step how to "
    "do something. each step include the action to indicate how people interact with objecs, and "
    "state to show state of objects after finish this action. And relation matrix is the "
    "correlation of one step with others in visual. object field indicate the objects in each "
    "step similar with privious step in some extends: similar(total similar), shape similar(only "
    "similar shape), texture similar( transform shape, only same texture)"
)

EXEMPLAR_USER = "The instruction on decorating a cake in 2 steps."

# The exemplar as taught to the planner. Its relation matrix is N x N for the
# two steps shown.
EXEMPLAR_PLAN = {
    "goal": "Decorating a Cake",
    "steps": [
        {
            "step": "Setting the Cake on a Platter",
            "object": [["cake", "new"], ["platter", "new"]],
            "action": "Set the baked cake on a platter.",
            "state_of_main_object": "A baked cake on the platter.",
        },
        {
            "step": "Applying Icing",
            "object": [["cake", "similar shape", 1], ["spoon", "new"]],
            "action": "Person using a spoon to place some icing on the top of the cake.",
            "state_of_main_object": "The cake covered by icing.",
        },
    ],
    "relation": [
        [1.0, 0.5],
        [0.9, 1.0],
    ],
}

DIAGONAL_TOLERANCE = 1e-6

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)\n\s*```", re.DOTALL)
_STEPS_RE = re.compile(r"\b\d+\s+steps?\b", re.IGNORECASE)


class MalformedResponse(Exception):
    """Raised when a response holds no JSON object or lacks a required key."""


class SchemaViolation(Exception):
    """Raised when a response's JSON has wrong types or out-of-range values."""


class PlanValidationError(Exception):
    """Raised when a plan breaks one or more plan invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# ---------------------------------------------------------------------------
# Prompt
# ---------------------------------------------------------------------------

def build_planner_prompt(task: InstructionTask) -> list[dict]:
    """Return the system / exemplar / user message sequence for *task*.

    The user turn is ``"The instruction on " + goal``; the requested step
    count is appended when the goal does not already state a step count.
    """
    goal = task.goal.strip()
    if not goal:
        raise ValueError("task goal must be non-empty")
    if not _STEPS_RE.search(goal):
        goal = f"{goal} in {task.requested_step_count} steps"
    if not goal.endswith((".", "!", "?")):
        goal += "."
    return [
        {"role": "system", "content": SYSTEM_PROMPT},
        {"role": "user", "content": EXEMPLAR_USER},
        {"role": "assistant", "content": json.dumps(EXEMPLAR_PLAN, indent=4)},
        {"role": "user", "content": "The instruction on " + goal},
    ]


def template_hash() -> str:
    """Content hash of the fixed part of the planner prompt."""
    payload = json.dumps(
        [TEMPLATE_VERSION, SYSTEM_PROMPT, EXEMPLAR_USER, EXEMPLAR_PLAN],
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def extract_json(raw: str, opener: str = "{"):
    """Return the first complete JSON value starting with *opener* in *raw*.

    Markdown fences are unwrapped first.
    """
    text = raw
    fence = _FENCE_RE.search(raw)
    if fence:
        text = fence.group(1)
    decoder = json.JSONDecoder()
    for match in re.finditer(re.escape(opener), text):
        try:
            value, _ = decoder.raw_decode(text, match.start())
        except json.JSONDecodeError:
            continue
        return value
    raise MalformedResponse("no JSON object found in response")


def _normalize_continuity(tag) -> Continuity:
    if not isinstance(tag, str):
        raise SchemaViolation(f"continuity tag must be text, got {tag!r}")
    words = sorted(tag.strip().lower().replace("_", " ").replace("-", " ").split())
    mapping = {
        ("new",): Continuity.NEW,
        ("similar",): Continuity.SIMILAR,
        ("shape", "similar"): Continuity.SHAPE_SIMILAR,
        ("similar", "texture"): Continuity.TEXTURE_SIMILAR,
    }
    try:
        return mapping[tuple(words)]
    except KeyError:
        raise SchemaViolation(f"unknown continuity tag {tag!r}") from None


def _parse_reference(value) -> int:
    """Convert a 1-based step reference to a 0-based index."""
    if isinstance(value, bool):
        raise SchemaViolation(f"step reference must be an integer, got {value!r}")
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if isinstance(value, str) and value.strip().isdigit():
        value = int(value.strip())
    if not isinstance(value, int):
        raise SchemaViolation(f"step reference must be an integer, got {value!r}")
    if value < 1:
        raise SchemaViolation(f"step references are 1-based, got {value}")
    return value - 1


def _parse_object(entry: list, step_index: int) -> ObjectTag:
    if len(entry) not in (2, 3):
        raise SchemaViolation(f"step {step_index}: object entry {entry!r} must have 2 or 3 elements")
    label = entry[0]
    if not isinstance(label, str) or not label.strip():
        raise SchemaViolation(f"step {step_index}: object label must be non-empty text, got {label!r}")
    continuity = _normalize_continuity(entry[1])
    if len(entry) == 2:
        if continuity is not Continuity.NEW:
            raise SchemaViolation(
                f"step {step_index}: object {label!r} is tagged {continuity.value} without a reference step"
            )
        return ObjectTag(label=label.strip(), continuity=continuity)
    if continuity is Continuity.NEW:
        raise SchemaViolation(f"step {step_index}: new object {label!r} must not reference a step")
    return ObjectTag(label=label.strip(), continuity=continuity, reference_step=_parse_reference(entry[2]))


def _parse_relation(rows: list[list[float]]) -> SimilarityMatrix:
    cleaned = []
    for i, row in enumerate(rows):
        out_row = []
        for j, value in enumerate(row):
            if math.isnan(value) or not 0.0 <= value <= 1.0:
                raise SchemaViolation(f"relation[{i}][{j}] = {value} is outside [0, 1]")
            if i == j and abs(value - 1.0) <= DIAGONAL_TOLERANCE:
                value = 1.0
            out_row.append(float(value))
        cleaned.append(tuple(out_row))
    return SimilarityMatrix(tuple(cleaned))


def parse_plan(raw: str) -> Plan:
    """Parse a planner response into a Plan.

    Raises
    ------
    MalformedResponse
        No JSON object in *raw*, or a required key is missing.
    SchemaViolation
        Wrong value types, unknown continuity tags or similarity values
        outside [0, 1].
    """
    data = extract_json(raw, "{")
    if not isinstance(data, dict):
        raise MalformedResponse("response JSON is not an object")
    try:
        parsed = RawPlan.model_validate(data)
    except ValidationError as exc:
        errors = exc.errors()
        missing = [e for e in errors if e["type"] == "missing"]
        if missing:
            loc = ".".join(str(p) for p in missing[0]["loc"])
            raise MalformedResponse(f"missing required key {loc!r}") from exc
        first = errors[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise SchemaViolation(f"{loc}: {first['msg']}") from exc

    steps = []
    for index, raw_step in enumerate(parsed.steps):
        steps.append(
            PlanStep(
                index=index,
                title=raw_step.step,
                action=raw_step.action,
                state=raw_step.state_of_main_object,
                objects=tuple(_parse_object(entry, index) for entry in raw_step.object),
            )
        )
    return Plan(goal=parsed.goal, steps=tuple(steps), similarity=_parse_relation(parsed.relation))


def serialize_plan(plan: Plan) -> str:
    """Canonical JSON writer using the planner's key names (1-based references)."""
    steps = []
    for step in plan.steps:
        objects = []
        for tag in step.objects:
            if tag.reference_step is None:
                objects.append([tag.label, tag.continuity.value])
            else:
                objects.append([tag.label, tag.continuity.value, tag.reference_step + 1])
        steps.append({
            "step": step.title,
            "object": objects,
            "action": step.action,
            "state_of_main_object": step.state,
        })
    payload = {
        "goal": plan.goal,
        "steps": steps,
        "relation": [list(row) for row in plan.similarity.values],
    }
    return json.dumps(payload, indent=4, ensure_ascii=False)


def plan_to_dict(plan: Plan) -> dict:
    return json.loads(serialize_plan(plan))


def load_plan(path: Path) -> Plan:
    return parse_plan(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_plan(plan: Plan) -> list[str]:
    """Return every invariant violation of *plan*; an empty list means valid."""
    violations: list[str] = []
    if not plan.goal.strip():
        violations.append("goal is empty")
    if not plan.steps:
        violations.append("plan has no steps")

    for position, step in enumerate(plan.steps):
        if step.index != position:
            violations.append(f"step at position {position} has index {step.index}")
        if not step.action.strip():
            violations.append(f"step {position} has an empty action")
        if not step.state.strip():
            violations.append(f"step {position} has an empty state")
        for tag in step.objects:
            if (tag.reference_step is None) != (tag.continuity is Continuity.NEW):
                violations.append(
                    f"step {position} object '{tag.label}' ({tag.continuity.value}) "
                    f"has inconsistent reference {tag.reference_step}"
                )
            elif tag.reference_step is not None and not 0 <= tag.reference_step < position:
                violations.append(
                    f"step {position} object '{tag.label}' references step "
                    f"{tag.reference_step}, which is not an earlier step"
                )

    rows = plan.similarity.values
    n = len(rows)
    if any(len(row) != n for row in rows):
        violations.append("similarity matrix is not square")
        return violations
    if n != len(plan.steps):
        violations.append(f"matrix dimension {n} ≠ step count {len(plan.steps)}")
    for i, row in enumerate(rows):
        for j, value in enumerate(row):
            if math.isnan(value) or not 0.0 <= value <= 1.0:
                violations.append(f"similarity[{i}][{j}] = {value} is outside [0, 1]")
        if abs(row[i] - 1.0) > DIAGONAL_TOLERANCE:
            violations.append(f"diagonal entry {i} is {row[i]}, expected 1.0")
    return violations


def require_valid(plan: Plan) -> Plan:
    violations = validate_plan(plan)
    if violations:
        raise PlanValidationError(violations)
    return plan


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def plan_task(task: InstructionTask, llm_client: ChatClient, cache: ResponseCache | None) -> Plan:
    """Plan one task through the response cache."""
    messages = build_planner_prompt(task)
    try:
        text, entry = cached_complete(llm_client, cache, messages)
    except ClientError as exc:
        raise ClientError(f"task {task.task_id or task.goal!r}: {exc}") from exc
    except CorruptCacheEntry as exc:
        raise MalformedResponse(f"{exc} (cache entry {exc.path})") from exc
    try:
        return parse_plan(text)
    except (MalformedResponse, SchemaViolation) as exc:
        if entry is not None:
            raise type(exc)(f"{exc} (cache entry {entry})") from exc
        raise


def propose_goals(
    category: str,
    count: int,
    llm_client: ChatClient,
    cache: ResponseCache | None,
) -> list[str]:
    """Ask the LLM for *count* everyday goals in *category*."""
    messages = [
        {"role": "system", "content": "You propose everyday how-to tasks that can be shown in a few pictures."},
        {
            "role": "user",
            "content": (
                f"List {count} distinct everyday {category} tasks. Answer with a JSON array "
                'of short goal phrases only, e.g. ["decorating a cake"].'
            ),
        },
    ]
    text, entry = cached_complete(llm_client, cache, messages)
    goals = extract_json(text, "[")
    if not isinstance(goals, list) or not all(isinstance(g, str) and g.strip() for g in goals):
        raise SchemaViolation(f"goal list for {category!r} is not a list of text (cache entry {entry})")
    return [g.strip() for g in goals[:count]]


def build_task_specs(
    goals_by_category: dict[str, list[str]],
    *,
    min_steps: int = config.DATASET_MIN_STEPS,
    max_steps: int = config.DATASET_MAX_STEPS,
    seed: int = 0,
) -> list[InstructionTask]:
    """Turn goal lists into tasks with step counts drawn from [min_steps, max_steps]."""
    rng = random.Random(seed)
    tasks = []
    for category in sorted(goals_by_category):
        for k, goal in enumerate(goals_by_category[category]):
            tasks.append(
                InstructionTask(
                    goal=goal,
                    requested_step_count=rng.randint(min_steps, max_steps),
                    task_id=f"{category}-{k:03d}",
                    category=category,
                )
            )
    return tasks


def generate_dataset(
    task_specs: list[InstructionTask],
    llm_client: ChatClient,
    cache: ResponseCache | None,
    *,
    max_workers: int = config.MAX_CONCURRENT_REQUESTS,
    min_steps: int = config.DATASET_MIN_STEPS,
    max_steps: int = config.DATASET_MAX_STEPS,
    progress: bool = False,
) -> list[tuple[InstructionTask, Plan]]:
    """Plan every task, at most *max_workers* requests in flight.

    Plans that fail validation or fall outside [min_steps, max_steps] are
    dropped with a warning. Client errors propagate with the task id.
    """
    def _plan(task: InstructionTask) -> Plan:
        return plan_task(task, llm_client, cache)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        plans = list(tqdm(
            pool.map(_plan, task_specs),
            total=len(task_specs),
            desc="Planning",
            disable=not progress,
        ))

    dataset = []
    for task, plan in zip(task_specs, plans):
        violations = validate_plan(plan)
        if not min_steps <= len(plan) <= max_steps:
            violations.append(f"{len(plan)} steps outside [{min_steps}, {max_steps}]")
        if violations:
            logger.warning("Dropping plan for task %s: %s", task.task_id, "; ".join(violations))
            continue
        dataset.append((task, plan))
    logger.info("Generated %d/%d valid plans", len(dataset), len(task_specs))
    return dataset


def make_dataset(
    llm_client: ChatClient,
    cache: ResponseCache | None,
    *,
    size: int = config.DATASET_SIZE,
    categories: tuple[str, ...] = config.DATASET_CATEGORIES,
    seed: int = 0,
    max_workers: int = config.MAX_CONCURRENT_REQUESTS,
    progress: bool = False,
) -> list[tuple[InstructionTask, Plan]]:
    """Propose goals per category, then plan them."""
    per_category = math.ceil(size / len(categories))
    goals = {c: propose_goals(c, per_category, llm_client, cache) for c in categories}
    tasks = build_task_specs(goals, seed=seed)[:size]
    return generate_dataset(tasks, llm_client, cache, max_workers=max_workers, progress=progress)
