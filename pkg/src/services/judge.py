"""Pairwise VLM judge: prompt assembly, verdict parsing, aggregation and reports."""
import base64
import io
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from PIL import Image

import config
from src.models.evaluation import ASPECTS, Decision, JudgeCase, JudgeVerdict
from src.services.llm_client import ChatClient, cached_complete
from src.services.response_cache import CorruptCacheEntry, ResponseCache

logger = logging.getLogger(__name__)

JUDGE_INSTRUCTION = """Our task here is to compare visual step-by-step instructions, generated from the same step-by-step textual instruction. We want to decide which one is better according to the provided criteria.
# Instruction
1. Text prompt and Asset Alignment: Focus on whether the key elements mentioned in the text are clearly visible and identifiable in the image. The visual is good if all key elements are clearly depicted and easily identifiable.
2. Continuity: This measures how well the image captures the progression from the previous step(s), maintaining context and demonstrating the changes or actions described in the current step. The visual is good if the image effectively shows the progression from previous steps and integrates new elements/actions as described in the current step.
3. Consistency: Evaluates whether the same objects are used consistently across all images in a way that reflects their continued presence and role as described in the text. This is particularly important for objects that are central to the action or instructions. For example, a pot in first step should look like the pot mentioned other step, even it can be in different views.
4. Relevance: Assesses whether the visual focuses on the most critical aspect of the step as described in the text. The visual is good if the visual focuses precisely on the primary action or element described in the step.
Take a really close look at each of the multi-image instructions for the corresponding textual instruction before providing your answer.
When evaluating these aspects, focus on one of them at a time.
Try to make independent decisions between these criteria.
# Output format
To provide an answer, please provide a short analysis for each of the abovementioned evaluation criteria. The analysis should be very concise and accurate.
For each of the criteria, you need to make a decision using these options:
1. The first row visual is better;
2. The second row visual is better;
... or Cannot decide.
IMPORTANT: PLEASE USE THE 'Cannot decide' OPTION SPARSELY.
Then, in the last row, summarize your final decision by <option for criterion 1> <option for criterion 2> <option for criterion 3> <option for criterion 4>.
# Example

Analysis:
1. Text prompt and Asset Alignment: The first one ...; The second one ...; The first/second/third/... one is better or cannot decide.
2. Continuity: The first one ...; The second one ...; The first/second/third/... one is better or cannot decide.
3. Consistency: The first one ...; The second one ...; The first/second/third/... one is better or cannot decide.
4. Relevance: The first one ...; The second one ...; The first/second/third/... one is better or cannot decide.
Final answer:
x, x, x ,x (e.g., 1, Cannot decide, 3, 1/ 2, Cannot decide,5, 1 / 1, 3, 2,4)"""

_FINAL_ANSWER = re.compile(r"final answer\s*:(.*)$", re.IGNORECASE)
_TOKENS = {"1": Decision.FIRST, "2": Decision.SECOND, "cannot decide": Decision.UNDECIDED}

VERDICTS_FILE = "verdicts.jsonl"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"


class ParseError(Exception):
    """Raised when a judge response has no usable final-answer line."""


# ---------------------------------------------------------------------------
# Prompt
# ---------------------------------------------------------------------------

def image_strip(images: list[Image.Image]) -> Image.Image:
    """Lay a sequence out as a single row, scaled to the first image's height."""
    height = images[0].height
    scaled = [
        img.convert("RGB") if img.height == height
        else img.convert("RGB").resize((max(1, round(img.width * height / img.height)), height))
        for img in images
    ]
    strip = Image.new("RGB", (sum(img.width for img in scaled), height), "white")
    x = 0
    for img in scaled:
        strip.paste(img, (x, 0))
        x += img.width
    return strip


def _data_url(image: Image.Image) -> str:
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buffer.getvalue()).decode("ascii")


def build_judge_prompt(case: JudgeCase) -> list[dict]:
    """One user turn: instruction text, the textual steps, then the two image rows.

    With ``case.shuffle`` the B sequence is shown as the first row.
    """
    first, second = (case.sequence_b, case.sequence_a) if case.shuffle else (case.sequence_a, case.sequence_b)
    content = [
        {"type": "text", "text": JUDGE_INSTRUCTION},
        {"type": "text", "text": f"# Textual instruction\n{case.instruction}"},
        {"type": "text", "text": "First row:"},
        {"type": "image_url", "image_url": {"url": _data_url(image_strip(first))}},
        {"type": "text", "text": "Second row:"},
        {"type": "image_url", "image_url": {"url": _data_url(image_strip(second))}},
    ]
    return [{"role": "user", "content": content}]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _final_answer_line(raw: str) -> str:
    lines = raw.splitlines()
    for idx in range(len(lines) - 1, -1, -1):
        match = _FINAL_ANSWER.search(lines[idx])
        if not match:
            continue
        answer = match.group(1).strip()
        if answer:
            return answer
        for following in lines[idx + 1:]:
            if following.strip():
                return following.strip()
        break
    raise ParseError("response has no 'Final answer:' line")


def _decision(token: str) -> Decision:
    normalized = re.sub(r"\s+", " ", token.strip().strip(".*").strip()).lower()
    try:
        return _TOKENS[normalized]
    except KeyError:
        raise ParseError(f"unknown decision token {token.strip()!r}") from None


def parse_verdict(raw: str, shuffle: bool = False, case_id: str = "") -> JudgeVerdict:
    """Parse the final answer and map it back to the canonical A/B orientation."""
    tokens = _final_answer_line(raw).split(",")
    if len(tokens) != len(ASPECTS):
        raise ParseError(f"expected {len(ASPECTS)} decisions, got {len(tokens)}")
    decisions = [_decision(t) for t in tokens]
    if shuffle:
        decisions = [d.swapped() for d in decisions]
    return JudgeVerdict(decisions=tuple(decisions), raw=raw, case_id=case_id, shuffle=shuffle)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(verdicts: list[JudgeVerdict]) -> dict:
    """Per-aspect win/lose/undecided rates for sequence A, with counts.

    Undecided answers are reported on their own, never folded into wins.
    """
    if not verdicts:
        raise ValueError("at least one verdict is required")
    total = len(verdicts)
    aspects = {}
    for k, aspect in enumerate(ASPECTS):
        counts = {"win": 0, "lose": 0, "undecided": 0}
        for verdict in verdicts:
            decision = verdict.decisions[k]
            if decision is Decision.FIRST:
                counts["win"] += 1
            elif decision is Decision.SECOND:
                counts["lose"] += 1
            else:
                counts["undecided"] += 1
        aspects[aspect] = {
            "win": counts["win"] / total,
            "lose": counts["lose"] / total,
            "undecided": counts["undecided"] / total,
            "counts": counts,
        }
    return {"total": total, "aspects": aspects}


def format_report_table(report: dict) -> str:
    """Plain-text table of a ``build_report`` result."""
    header = f"{'judge':<16}{'aspect':<16}{'win':>8}{'lose':>8}{'undecided':>11}{'n':>6}"
    lines = [header, "-" * len(header)]
    for judge_name, summary in report["judges"].items():
        for aspect, row in summary["aspects"].items():
            lines.append(
                f"{judge_name:<16}{aspect:<16}{row['win']:>8.1%}{row['lose']:>8.1%}"
                f"{row['undecided']:>11.1%}{summary['total']:>6d}"
            )
    return "\n".join(lines)


def build_report(verdicts_by_judge: dict[str, list[JudgeVerdict]], label_a: str = "A", label_b: str = "B") -> dict:
    return {
        "a": label_a,
        "b": label_b,
        "judges": {name: aggregate(verdicts) for name, verdicts in verdicts_by_judge.items()},
    }


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_verdicts(path: Path, verdicts: list[JudgeVerdict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for verdict in verdicts:
            fh.write(json.dumps(verdict.to_record(), ensure_ascii=False) + "\n")
    return path


def read_verdicts(path: Path) -> list[JudgeVerdict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [JudgeVerdict.from_record(json.loads(line)) for line in fh if line.strip()]


def write_report(directory: Path, report: dict) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / REPORT_JSON
    text_path = directory / REPORT_TEXT
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    text_path.write_text(format_report_table(report) + "\n", encoding="utf-8")
    return json_path, text_path


# ---------------------------------------------------------------------------
# Judge
# ---------------------------------------------------------------------------

class VlmJudge:
    """A named VLM judge with response caching and bounded concurrency."""

    def __init__(
        self,
        client: ChatClient,
        cache: ResponseCache | None = None,
        name: str | None = None,
        max_concurrent: int = config.MAX_CONCURRENT_REQUESTS,
    ):
        self.client = client
        self.cache = cache
        self.name = name or getattr(client, "model", "judge")
        self.max_concurrent = max(1, max_concurrent)

    def judge(self, case: JudgeCase) -> JudgeVerdict:
        try:
            text, entry = cached_complete(self.client, self.cache, build_judge_prompt(case))
        except CorruptCacheEntry as exc:
            raise ParseError(f"{self.name} on case {case.case_id}: {exc} (cache entry {exc.path})") from exc
        try:
            return parse_verdict(text, case.shuffle, case.case_id)
        except ParseError as exc:
            where = f" (cache entry {entry})" if entry is not None else ""
            raise ParseError(f"{self.name} on case {case.case_id}: {exc}{where}") from exc

    def judge_many(self, cases: list[JudgeCase]) -> list[JudgeVerdict]:
        """Judge cases concurrently; results keep case order."""
        with ThreadPoolExecutor(max_workers=self.max_concurrent) as pool:
            verdicts = list(pool.map(self.judge, cases))
        logger.info("Judge %s produced %d verdicts", self.name, len(verdicts))
        return verdicts
