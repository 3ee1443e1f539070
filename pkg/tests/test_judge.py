"""Tests for judge prompt assembly, verdict parsing and aggregation."""
import json

import pytest
from PIL import Image

from src.models.evaluation import ASPECTS, Decision, JudgeCase, JudgeVerdict
from src.services.judge import (
    ParseError,
    VlmJudge,
    aggregate,
    build_judge_prompt,
    build_report,
    format_report_table,
    image_strip,
    parse_verdict,
    read_verdicts,
    write_report,
    write_verdicts,
)
from src.services.llm_client import ScriptedChatClient
from src.services.response_cache import ResponseCache

F, S, U = Decision.FIRST, Decision.SECOND, Decision.UNDECIDED

GOLDEN = """Analysis:
1. Text prompt and Asset Alignment: The first one shows the pot; The second one misses it. The first one is better.
2. Continuity: Both progress well. Cannot decide.
3. Consistency: The second one keeps the same pot. The second one is better.
4. Relevance: The first one focuses on the action. The first one is better.
Final answer:
1, Cannot decide, 2, 1"""


def _sequence(color, n=3):
    return [Image.new("RGB", (16, 16), color) for _ in range(n)]


def _case(case_id="c0", shuffle=False):
    return JudgeCase(
        case_id=case_id,
        instruction="1. Fill the pot.\n2. Boil the water.\n3. Add pasta.",
        sequence_a=_sequence("red"),
        sequence_b=_sequence("blue"),
        shuffle=shuffle,
    )


def _verdict(*decisions):
    return JudgeVerdict(decisions=tuple(decisions))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def test_parse_golden_response():
    verdict = parse_verdict(GOLDEN)
    assert verdict.decisions == (F, U, S, F)
    assert verdict.raw == GOLDEN


@pytest.mark.parametrize("raw, expected", [
    ("Final answer: 2, 2, cannot decide., 1", (S, S, U, F)),
    ("**Final answer:** 1, 1, 1, 1", (F, F, F, F)),
    ("final answer:  Cannot  decide,2 ,1,  2", (U, S, F, S)),
    ("Final answer: 1, 1, 1, 1\nreconsidering...\nFinal answer: 2, 2, 2, 2", (S, S, S, S)),
])
def test_parse_variants(raw, expected):
    assert parse_verdict(raw).decisions == expected


def test_shuffle_swaps_first_and_second():
    verdict = parse_verdict(GOLDEN, shuffle=True, case_id="x")
    assert verdict.decisions == (S, U, F, S)
    assert verdict.shuffle is True
    assert verdict.case_id == "x"


def test_shuffle_is_an_involution():
    for decision in Decision:
        assert decision.swapped().swapped() is decision


@pytest.mark.parametrize("raw", [
    "Final answer: 1, 5, 2, 1",
    "Final answer: 1, 2",
    "Final answer: 1, 2, 1, 2, 1",
    "The first one is better overall.",
    "Final answer:",
])
def test_unparseable_responses(raw):
    with pytest.raises(ParseError):
        parse_verdict(raw)


# ---------------------------------------------------------------------------
# Prompt
# ---------------------------------------------------------------------------

def test_prompt_carries_criteria_and_instruction():
    messages = build_judge_prompt(_case())
    assert len(messages) == 1 and messages[0]["role"] == "user"
    content = messages[0]["content"]
    assert "a pot in first step should look like the pot mentioned other step" in content[0]["text"]
    assert "IMPORTANT: PLEASE USE THE 'Cannot decide' OPTION SPARSELY." in content[0]["text"]
    assert content[1]["text"].endswith("3. Add pasta.")
    assert [part["type"] for part in content] == ["text", "text", "text", "image_url", "text", "image_url"]
    assert content[3]["image_url"]["url"].startswith("data:image/png;base64,")


def test_shuffled_prompt_swaps_rows():
    plain = build_judge_prompt(_case())[0]["content"]
    shuffled = build_judge_prompt(_case(shuffle=True))[0]["content"]
    assert shuffled[3] == plain[5]
    assert shuffled[5] == plain[3]


def test_mismatched_sequences_rejected():
    with pytest.raises(ValueError):
        JudgeCase("c", "steps", _sequence("red", 3), _sequence("blue", 2))


def test_image_strip_lays_out_one_row():
    images = [Image.new("RGB", (10, 20), "red"), Image.new("RGB", (20, 40), "blue")]
    strip = image_strip(images)
    assert strip.size == (20, 20)
    assert strip.getpixel((15, 5)) == (0, 0, 255)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def test_aggregate_single_verdict():
    report = aggregate([_verdict(F, S, U, F)])
    assert report["total"] == 1
    assert report["aspects"]["text_alignment"]["win"] == 1.0
    assert report["aspects"]["continuity"]["lose"] == 1.0
    assert report["aspects"]["consistency"]["undecided"] == 1.0


def test_aggregate_even_split():
    report = aggregate([_verdict(F, F, F, F), _verdict(S, S, S, S)])
    for aspect in ASPECTS:
        row = report["aspects"][aspect]
        assert (row["win"], row["lose"], row["undecided"]) == (0.5, 0.5, 0.0)


def test_aggregate_hand_tally():
    rows = [
        (F, F, S, U), (F, S, S, U), (F, U, F, U), (S, F, F, F),
        (S, F, U, F), (U, F, U, S), (F, S, F, F), (F, F, F, F),
        (U, U, S, S), (F, F, F, U), (S, S, S, S), (F, F, U, F),
    ]
    report = aggregate([_verdict(*r) for r in rows])
    assert report["total"] == 12
    assert report["aspects"]["text_alignment"]["counts"] == {"win": 7, "lose": 3, "undecided": 2}
    assert report["aspects"]["continuity"]["counts"] == {"win": 7, "lose": 3, "undecided": 2}
    assert report["aspects"]["consistency"]["counts"] == {"win": 5, "lose": 4, "undecided": 3}
    assert report["aspects"]["relevance"]["counts"] == {"win": 5, "lose": 3, "undecided": 4}
    for row in report["aspects"].values():
        assert row["win"] + row["lose"] + row["undecided"] == pytest.approx(1.0)


def test_aggregate_requires_verdicts():
    with pytest.raises(ValueError):
        aggregate([])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def test_verdicts_jsonl_round_trip(tmp_path):
    verdicts = [parse_verdict(GOLDEN, case_id="a"), parse_verdict(GOLDEN, shuffle=True, case_id="b")]
    path = write_verdicts(tmp_path / "v.jsonl", verdicts)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    assert json.loads(lines[1])["decisions"] == ["SECOND", "UNDECIDED", "FIRST", "SECOND"]
    assert read_verdicts(path) == verdicts


def test_report_files(tmp_path):
    report = build_report({"judge-x": [_verdict(F, F, S, U)]}, "ours", "baseline")
    json_path, text_path = write_report(tmp_path / "report", report)
    assert json.loads(json_path.read_text())["a"] == "ours"
    text = text_path.read_text()
    assert "judge-x" in text and "consistency" in text
    assert format_report_table(report).splitlines()[0].startswith("judge")


# ---------------------------------------------------------------------------
# Judge
# ---------------------------------------------------------------------------

def test_judge_uses_cache(tmp_path):
    client = ScriptedChatClient([GOLDEN], model="vlm-a")
    judge = VlmJudge(client, cache=ResponseCache(tmp_path))
    first = judge.judge(_case())
    second = judge.judge(_case())
    assert first == second
    assert len(client.calls) == 1
    assert judge.name == "vlm-a"


def test_judge_many_keeps_case_order():
    responses = [f"Final answer: {d}, {d}, {d}, {d}" for d in ("1", "2", "Cannot decide")]
    judge = VlmJudge(ScriptedChatClient(responses), max_concurrent=1)
    cases = [_case(f"c{i}") for i in range(3)]
    verdicts = judge.judge_many(cases)
    assert [v.case_id for v in verdicts] == ["c0", "c1", "c2"]
    assert [v.decisions[0] for v in verdicts] == [F, S, U]


def test_parse_error_names_judge_and_cache_entry(tmp_path):
    judge = VlmJudge(ScriptedChatClient(["no verdict here"]), cache=ResponseCache(tmp_path), name="flaky")
    with pytest.raises(ParseError, match="flaky on case c0.*cache entry"):
        judge.judge(_case())


def test_undecodable_cache_entry_is_parse_error(tmp_path):
    judge = VlmJudge(ScriptedChatClient([GOLDEN]), cache=ResponseCache(tmp_path), name="vlm-a")
    judge.judge(_case())
    entry = next(p for p in tmp_path.iterdir() if not p.name.startswith("."))
    raw = bytearray(entry.read_bytes())
    raw[0] = 0xFF
    entry.write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="vlm-a on case c0.*cache entry"):
        judge.judge(_case())
