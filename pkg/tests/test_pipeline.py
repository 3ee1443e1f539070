"""Tests for run configuration, end-to-end runs and paired comparison."""
import json

import numpy as np
import pytest

from src.models.evaluation import ASPECTS
from src.models.generation import PromptMode
from src.models.run import RunConfig, SharingMode
from src.services.judge import VlmJudge, read_verdicts
from src.services.llm_client import ScriptedChatClient
from src.services.pipeline import (
    MANIFEST_FILE,
    ConfigError,
    PhaseError,
    compare,
    evaluate,
    load_manifest,
    load_run_config,
    resolve_plan,
    run,
    shuffle_bit,
)
from src.services.metrics import build_adapters
from src.services.region_masks import AdapterError, FixtureSegmenter, bitmap_to_image
from src.services.toy_backend import read_latent
from tests.conftest import make_plan_json

UNDECIDED = "Final answer: Cannot decide, Cannot decide, Cannot decide, Cannot decide"


@pytest.fixture
def plan_file(tmp_path):
    path = tmp_path / "plan.json"
    path.write_text(make_plan_json(3, relation=np.ones((3, 3)).tolist()), encoding="utf-8")
    return path


@pytest.fixture
def make_config(tmp_path, plan_file, short_backend):
    def _make(sharing: SharingMode, out: str = "out", **kwargs) -> RunConfig:
        return RunConfig(
            plan_file=plan_file,
            sharing=sharing,
            backend=short_backend,
            output_dir=tmp_path / out,
            cache_dir=tmp_path / "cache",
            **kwargs,
        )
    return _make


@pytest.fixture
def open_mask_dir(tmp_path):
    """Masks covering the whole frame for every step."""
    directory = tmp_path / "open_masks"
    directory.mkdir()
    index = {}
    for step in range(3):
        name = f"step{step}_pot.png"
        bitmap_to_image(np.ones((64, 64), dtype=np.uint8)).save(directory / name)
        index[str(step)] = {"pot": name}
    (directory / "index.json").write_text(json.dumps(index), encoding="utf-8")
    return directory


class BrokenSegmenter:
    def segment(self, image, label, step):
        raise AdapterError("segmentation service unavailable")


def _latents(manifest):
    return [read_latent(manifest.root / p) for p in manifest.latents]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.env"
    path.write_text(
        "SHARING=kv\nTOTAL_STEPS=6\nSHARED_STEPS=4\nSEEDS=1,2,3\nIMAGE_SIZE=32x48\nPROMPT_MODE=concatenation\n",
        encoding="utf-8",
    )
    cfg = load_run_config(path, {"SHARING": "kv_local", "SEED": None})
    assert cfg.sharing is SharingMode.KV_LOCAL
    assert cfg.prompt_mode is PromptMode.CONCATENATION
    assert cfg.backend.total_steps == 6
    assert cfg.backend.schedule.shared_steps == 4
    assert cfg.backend.image_size == (32, 48)
    assert cfg.seeds_for(3) == [1, 2, 3]


def test_config_expands_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("VI_TEST_GOAL", "boiling pasta")
    path = tmp_path / "run.env"
    path.write_text("GOAL=${VI_TEST_GOAL}\nSTEPS=4\n", encoding="utf-8")
    cfg = load_run_config(path)
    assert cfg.goal == "boiling pasta"
    assert cfg.steps == 4


def test_config_defaults():
    cfg = load_run_config()
    assert cfg.sharing is SharingMode.FULL
    assert cfg.prompt_mode is PromptMode.RECAPTION
    assert cfg.backend.schedule.shared_steps == 15
    assert cfg.seeds_for(3) == [0, 1, 2]


@pytest.mark.parametrize("overrides", [
    {"BOGUS_KEY": "1"},
    {"TOTAL_STEPS": "many"},
    {"SHARING": "sometimes"},
    {"TOTAL_STEPS": "6", "SHARED_STEPS": "9"},
    {"IMAGE_SIZE": "big"},
    {"SEEDS": "1,two"},
])
def test_invalid_config(overrides):
    with pytest.raises(ConfigError):
        load_run_config(None, overrides)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.env")


def test_plan_needs_goal_or_file(tmp_path):
    with pytest.raises(ConfigError):
        resolve_plan(RunConfig(cache_dir=tmp_path))


def test_plan_from_goal_through_client(tmp_path):
    client = ScriptedChatClient([make_plan_json(3)])
    plan = resolve_plan(RunConfig(goal="boiling pasta", steps=3, cache_dir=tmp_path), client)
    assert len(plan) == 3
    assert (tmp_path / "llm").is_dir()


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def test_run_without_sharing(make_config):
    manifest = run(make_config(SharingMode.NONE))
    assert [p["name"] for p in manifest.passes] == ["final"]
    assert manifest.passes[0]["shared_steps"] == []
    assert manifest.mask_index == {}
    assert manifest.images == ["images/step0.png", "images/step1.png", "images/step2.png"]
    assert (manifest.root / MANIFEST_FILE).is_file()


def test_run_kv(make_config):
    manifest = run(make_config(SharingMode.KV))
    final = manifest.passes[-1]
    assert final["shared_steps"] == [0, 1, 2, 3]
    assert final["uses_similarity"] is False and final["uses_masks"] is False
    assert final["trace"]["0"] == ["layers.0.attn1", "layers.1.attn1"]
    assert final["trace"]["5"] == []
    assert len(manifest.latents) == 3
    assert _latents(manifest)[0].shape == (4, 8, 8)


def test_run_full_writes_both_passes_and_masks(make_config, mask_dir):
    manifest = run(make_config(SharingMode.FULL), segmenter=FixtureSegmenter(mask_dir))
    assert [p["name"] for p in manifest.passes] == ["pass1", "final"]
    assert manifest.passes[0]["uses_masks"] is False
    assert manifest.passes[1]["uses_masks"] is True
    assert manifest.passes[1]["uses_similarity"] is True
    assert manifest.mask_index == {str(s): {"pot": f"masks/step{s}_pot.png"} for s in range(3)}
    for rel in manifest.passes[0]["images"] + list(manifest.mask_index["1"].values()):
        assert (manifest.root / rel).is_file()
    metrics = json.loads((manifest.root / "eval" / "metrics.json").read_text())
    assert {m["name"] for m in metrics} == {"clip_score", "dreamsim", "l2_dino"}

    reloaded = load_manifest(manifest.root)
    assert reloaded.to_dict() == manifest.to_dict()


def test_plan_without_shared_objects_skips_segmentation(tmp_path, short_backend):
    data = json.loads(make_plan_json(3))
    for step in data["steps"]:
        step["object"] = [[f"thing{step['step'][-1]}", "new"]]
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    cfg = RunConfig(plan_file=path, sharing=SharingMode.KV_LOCAL, backend=short_backend,
                    output_dir=tmp_path / "out", cache_dir=tmp_path / "cache")
    manifest = run(cfg, segmenter=BrokenSegmenter())
    assert [p["name"] for p in manifest.passes] == ["final"]
    assert manifest.passes[0]["uses_masks"] is False
    assert manifest.mask_index == {}


def test_run_is_reproducible(make_config, mask_dir):
    first = run(make_config(SharingMode.FULL, out="a"), segmenter=FixtureSegmenter(mask_dir))
    second = run(make_config(SharingMode.FULL, out="b"), segmenter=FixtureSegmenter(mask_dir))
    a, b = first.to_dict(), second.to_dict()
    a.pop("created_at")
    b.pop("created_at")
    assert a == b
    for rel in first.images + first.latents:
        assert (first.root / rel).read_bytes() == (second.root / rel).read_bytes()


def test_open_masks_and_unit_similarity_equal_plain_sharing(make_config, open_mask_dir):
    full = run(make_config(SharingMode.FULL), segmenter=FixtureSegmenter(open_mask_dir))
    kv = run(make_config(SharingMode.KV))
    assert full.run_id != kv.run_id
    assert all(np.array_equal(a, b) for a, b in zip(_latents(full), _latents(kv)))


def test_failures_name_their_phase(make_config):
    with pytest.raises(PhaseError) as excinfo:
        run(make_config(SharingMode.KV_LOCAL), segmenter=BrokenSegmenter())
    assert excinfo.value.phase == "segment"
    assert isinstance(excinfo.value.cause, AdapterError)


def test_metrics_can_be_disabled(make_config):
    manifest = run(make_config(SharingMode.KV, metrics="none"))
    assert manifest.metrics == []
    assert not (manifest.root / "eval").exists()


def test_evaluate_stored_run(make_config):
    manifest = run(make_config(SharingMode.KV))
    records = evaluate(load_manifest(manifest.root / MANIFEST_FILE), build_adapters("mock"))
    assert [r.to_dict() for r in records] == manifest.metrics


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

def test_compare_against_itself_is_undecided(make_config, tmp_path):
    manifest = run(make_config(SharingMode.KV))
    judge = VlmJudge(ScriptedChatClient([UNDECIDED]), name="undecided")
    report = compare(manifest, manifest, judge, out_dir=tmp_path / "report")
    for aspect in ASPECTS:
        assert report["judges"]["undecided"]["aspects"][aspect]["undecided"] == 1.0
    assert (tmp_path / "report" / "undecided_verdicts.jsonl").is_file()
    assert (tmp_path / "report" / "report.json").is_file()


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_compare_maps_rows_back_to_runs(make_config, seed):
    a = run(make_config(SharingMode.KV))
    b = run(make_config(SharingMode.NONE))
    client = ScriptedChatClient(["Final answer: 1, 1, 2, Cannot decide"])
    report = compare(a, b, VlmJudge(client, name="first-row"), seed=seed)
    aspects = report["judges"]["first-row"]["aspects"]
    a_first = not shuffle_bit(f"{a.run_id}-vs-{b.run_id}", seed)
    assert aspects["text_alignment"]["win"] == (1.0 if a_first else 0.0)
    assert aspects["consistency"]["lose"] == (1.0 if a_first else 0.0)
    assert aspects["relevance"]["undecided"] == 1.0


def test_compare_requires_paired_runs(make_config):
    manifest = run(make_config(SharingMode.KV))
    judge = VlmJudge(ScriptedChatClient([UNDECIDED]))
    with pytest.raises(ValueError):
        compare([manifest, manifest], [manifest], judge)


def test_compare_records_verdicts_in_both_manifests(make_config):
    a = run(make_config(SharingMode.KV))
    b = run(make_config(SharingMode.NONE))
    compare(a, b, VlmJudge(ScriptedChatClient([UNDECIDED]), name="undecided"))
    case_id = f"{a.run_id}-vs-{b.run_id}"
    for manifest in (a, b):
        stored = load_manifest(manifest.root)
        assert stored.verdicts == [f"eval/verdicts/undecided_{case_id}.jsonl"]
        [verdict] = read_verdicts(stored.root / stored.verdicts[0])
        assert verdict.case_id == case_id


def test_compare_rejects_runs_of_different_lengths(make_config, tmp_path, short_backend):
    path = tmp_path / "two_steps.json"
    path.write_text(make_plan_json(2, relation=np.ones((2, 2)).tolist()), encoding="utf-8")
    two = run(RunConfig(plan_file=path, sharing=SharingMode.KV, backend=short_backend,
                        output_dir=tmp_path / "short", cache_dir=tmp_path / "cache"))
    three = run(make_config(SharingMode.KV))
    judge = VlmJudge(ScriptedChatClient([UNDECIDED]))
    with pytest.raises(ValueError, match="2 and 3 images"):
        compare(two, three, judge)
    assert judge.client.calls == []


def test_shuffle_bit_is_deterministic():
    bits = [shuffle_bit(f"case{i}", 7) for i in range(64)]
    assert bits == [shuffle_bit(f"case{i}", 7) for i in range(64)]
    assert any(bits) and not all(bits)
