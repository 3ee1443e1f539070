"""End-to-end orchestration: plan, recaption, generate, segment, regenerate, evaluate.

Each run lives in ``<output_dir>/<run-id>/`` where the run id is a content
hash of the job's configuration and plan. The manifest is written last.
"""
import hashlib
import json
import logging
import os
import re
from contextlib import contextmanager
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from dotenv import dotenv_values
from PIL import Image

import config
from src.models.evaluation import JudgeCase
from src.models.generation import AttentionSchedule, BackendConfig, GenerationResult, PromptMode, ToyDenoiserSpec
from src.models.plan import InstructionTask, Plan
from src.models.run import GenerationManifest, RunConfig, SharingMode
from src.services.judge import JUDGE_INSTRUCTION, VlmJudge, build_report, write_report, write_verdicts
from src.services.llm_client import FixtureChatClient, HttpChatClient
from src.services.metrics import build_adapters, classic_metrics
from src.services.planner import (
    TEMPLATE_VERSION,
    load_plan,
    make_dataset,
    plan_task,
    plan_to_dict,
    require_valid,
    serialize_plan,
    template_hash,
)
from src.services.recaption import compose_prompts
from src.services.region_masks import (
    FixtureSegmenter,
    HttpSegmenter,
    build_region_masks,
    save_masks,
    segment_steps,
    select_shared_objects,
)
from src.services.response_cache import ResponseCache
from src.services.toy_backend import generate_sequence, write_latent

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"

# Keys accepted in a run configuration file.
CONFIG_KEYS = {
    "GOAL", "STEPS", "PLAN_FILE", "PROMPT_MODE", "SHARING", "BACKEND",
    "TOTAL_STEPS", "SHARED_STEPS", "LAYER_PATTERN", "GUIDANCE_SCALE", "IMAGE_SIZE",
    "LLM_BASE_URL", "LLM_MODEL", "LLM_FIXTURES", "SEGMENTER_URL", "SEGMENTER_FIXTURES",
    "METRICS", "OUTPUT_DIR", "CACHE_DIR", "SEEDS", "SEED", "WEIGHT_SEED",
}


class ConfigError(Exception):
    """Raised for unreadable or invalid run configuration."""


class PhaseError(Exception):
    """Wraps any failure with the name of the pipeline phase it occurred in."""

    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        self.cause = cause
        super().__init__(f"{phase} phase failed: {type(cause).__name__}: {cause}")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _int(values: dict, key: str, default: int) -> int:
    raw = values.get(key)
    if raw in (None, ""):
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{key} must be an integer, got {raw!r}") from exc


def _float(values: dict, key: str, default: float) -> float:
    raw = values.get(key)
    if raw in (None, ""):
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key} must be a number, got {raw!r}") from exc


def _path(values: dict, key: str, default: Path | None = None) -> Path | None:
    raw = values.get(key)
    return Path(raw) if raw else default


def _size(raw: str | None, default: tuple[int, int]) -> tuple[int, int]:
    if not raw:
        return default
    match = re.fullmatch(r"\s*(\d+)\s*[x,]\s*(\d+)\s*", raw)
    if not match:
        raise ConfigError(f"IMAGE_SIZE must look like 64x64, got {raw!r}")
    return int(match.group(1)), int(match.group(2))


def load_run_config(path: Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a KEY=VALUE file and command-line overrides.

    The file is read with python-dotenv, so ``${VAR}`` references expand
    from the environment. Overrides win over file values; None is ignored.
    """
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update({k.upper(): v for k, v in dotenv_values(path).items() if v is not None})
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key.upper()] = str(value)

    unknown = sorted(set(values) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    try:
        prompt_mode = PromptMode(values.get("PROMPT_MODE", PromptMode.RECAPTION.value))
        sharing = SharingMode(values.get("SHARING", SharingMode.FULL.value))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    total_steps = _int(values, "TOTAL_STEPS", config.TOTAL_STEPS)
    try:
        schedule = AttentionSchedule(
            total_steps=total_steps,
            shared_steps=_int(values, "SHARED_STEPS", min(config.SHARED_STEPS, total_steps)),
            layer_pattern=values.get("LAYER_PATTERN") or "*",
        )
        backend = BackendConfig(
            backend=values.get("BACKEND") or "toy",
            image_size=_size(values.get("IMAGE_SIZE"), config.IMAGE_SIZE),
            total_steps=total_steps,
            guidance_scale=_float(values, "GUIDANCE_SCALE", config.GUIDANCE_SCALE),
            schedule=schedule,
            toy=ToyDenoiserSpec(weight_seed=_int(values, "WEIGHT_SEED", 0)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    seeds_raw = values.get("SEEDS", "")
    try:
        seeds = [int(s) for s in seeds_raw.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"SEEDS must be comma-separated integers, got {seeds_raw!r}") from exc

    return RunConfig(
        goal=values.get("GOAL", ""),
        steps=_int(values, "STEPS", 3),
        plan_file=_path(values, "PLAN_FILE"),
        prompt_mode=prompt_mode,
        sharing=sharing,
        backend=backend,
        llm_base_url=values.get("LLM_BASE_URL") or config.LLM_BASE_URL,
        llm_model=values.get("LLM_MODEL") or config.LLM_MODEL,
        llm_fixtures=_path(values, "LLM_FIXTURES"),
        segmenter_url=values.get("SEGMENTER_URL") or config.SEGMENTER_URL,
        segmenter_fixtures=_path(values, "SEGMENTER_FIXTURES"),
        metrics=values.get("METRICS") or "mock",
        output_dir=_path(values, "OUTPUT_DIR", config.OUTPUT_DIR),
        cache_dir=_path(values, "CACHE_DIR", config.CACHE_DIR),
        seeds=seeds,
        base_seed=_int(values, "SEED", 0),
    )


def make_llm_client(run_config: RunConfig):
    if run_config.llm_fixtures:
        return FixtureChatClient(run_config.llm_fixtures, model=run_config.llm_model)
    return HttpChatClient(
        run_config.llm_base_url,
        config.LLM_API_KEY,
        run_config.llm_model,
        max_concurrent=config.MAX_CONCURRENT_REQUESTS,
    )


def make_segmenter(run_config: RunConfig):
    if run_config.segmenter_fixtures:
        return FixtureSegmenter(run_config.segmenter_fixtures)
    return HttpSegmenter(run_config.segmenter_url, config.SEGMENTER_API_KEY)


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------

@contextmanager
def _phase(name: str):
    logger.info("Phase %s started", name)
    try:
        yield
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(name, exc) from exc
    logger.info("Phase %s finished", name)


def compute_run_id(snapshot: dict, plan: Plan) -> str:
    payload = json.dumps({"config": snapshot, "plan": serialize_plan(plan)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _write_json_atomic(path: Path, data) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
    os.replace(tmp, path)


def _save_images(result: GenerationResult, root: Path, subdir: str) -> list[str]:
    directory = root / subdir
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, image in enumerate(result.images):
        image.save(directory / f"step{i}.png", format="PNG")
        paths.append(f"{subdir}/step{i}.png")
    return paths


def _pass_record(name: str, result: GenerationResult, uses_similarity: bool, uses_masks: bool, images: list[str]) -> dict:
    return {
        "name": name,
        "uses_similarity": uses_similarity,
        "uses_masks": uses_masks,
        "images": images,
        "shared_steps": result.shared_steps(),
        "trace": {str(step): layers for step, layers in sorted(result.trace_by_step().items())},
    }


def resolve_plan(run_config: RunConfig, llm_client=None) -> Plan:
    """Load the plan file or ask the planner, then require a valid plan."""
    if run_config.plan_file:
        plan = load_plan(run_config.plan_file)
    else:
        if not run_config.goal.strip():
            raise ConfigError("either GOAL or PLAN_FILE is required")
        client = llm_client or make_llm_client(run_config)
        cache = ResponseCache(run_config.cache_dir / "llm")
        task = InstructionTask(goal=run_config.goal, requested_step_count=run_config.steps)
        plan = plan_task(task, client, cache)
    return require_valid(plan)


def run(
    run_config: RunConfig,
    *,
    llm_client=None,
    segmenter=None,
    denoiser=None,
    metric_adapters: dict | None = None,
) -> GenerationManifest:
    """Execute one job and return its manifest.

    Passes by sharing mode:
      none       one pass, sharing disabled
      kv         one pass, S = 1, M = 1
      kv_global  one pass, S = W, M = 1
      kv_local   pass 1 as kv, segment, pass 2 with S = 1 and M from masks
      full       pass 1 as kv_global, segment, pass 2 with S = W and M from masks

    Both passes use the same seeds. Failures surface as PhaseError.
    """
    with _phase("plan"):
        plan = resolve_plan(run_config, llm_client)
    with _phase("recaption"):
        prompts = [p.text for p in compose_prompts(plan, run_config.prompt_mode)]

    sharing = run_config.sharing
    n = len(plan)
    seeds = run_config.seeds_for(n)
    backend = run_config.backend
    if sharing is SharingMode.NONE:
        backend = replace(backend, schedule=replace(backend.schedule, shared_steps=0))
    similarity = plan.similarity if sharing.uses_similarity else None

    run_id = compute_run_id(run_config.snapshot(), plan)
    root = Path(run_config.output_dir) / run_id
    root.mkdir(parents=True, exist_ok=True)
    logger.info("Run %s: %d steps, sharing=%s, backend=%s", run_id, n, sharing.value, backend.backend)

    passes = []
    mask_index: dict = {}
    masks_used = False
    with _phase("generate"):
        result = generate_sequence(prompts, seeds, None, similarity, backend, denoiser=denoiser)

    if sharing.uses_masks:
        shared_labels = select_shared_objects(plan)
        if not any(shared_labels):
            logger.info("No shared objects in plan; skipping segmentation")
        else:
            with _phase("segment"):
                pass1_images = _save_images(result, root, "images/pass1")
                passes.append(_pass_record("pass1", result, similarity is not None, False, pass1_images))
                adapter = segmenter or make_segmenter(run_config)
                object_masks = segment_steps(
                    result.images, shared_labels, adapter, latent_size=backend.toy.latent_size,
                )
                mask_set = build_region_masks(
                    object_masks, n,
                    image_size=(result.images[0].height, result.images[0].width),
                    latent_size=backend.toy.latent_size,
                )
                index = save_masks(object_masks, root / "masks")
                mask_index = {
                    step: {label: f"masks/{name}" for label, name in labels.items()}
                    for step, labels in index.items()
                }
            with _phase("regenerate"):
                result = generate_sequence(prompts, seeds, mask_set.bitmaps, similarity, backend, denoiser=denoiser)
            masks_used = True

    with _phase("write"):
        images = _save_images(result, root, "images")
        latents = []
        for i, latent in enumerate(result.latents):
            blob, _ = write_latent(root / "latents" / f"step{i}.f32", latent)
            latents.append(str(blob.relative_to(root)))
        passes.append(_pass_record("final", result, similarity is not None, masks_used, images))

    metrics: list[dict] = []
    if run_config.metrics != "none":
        with _phase("evaluate"):
            adapters = metric_adapters if metric_adapters is not None else build_adapters(run_config.metrics)
            metrics = [m.to_dict() for m in classic_metrics(result.images, prompts, adapters)]
            (root / "eval").mkdir(exist_ok=True)
            _write_json_atomic(root / "eval" / "metrics.json", metrics)

    manifest = GenerationManifest(
        run_id=run_id,
        config=run_config.snapshot(),
        plan=plan_to_dict(plan),
        prompts=prompts,
        seeds=seeds,
        mask_index=mask_index,
        images=images,
        passes=passes,
        metrics=metrics,
        verdicts=[],
        template_hashes={
            "planner_version": TEMPLATE_VERSION,
            "planner": template_hash(),
            "judge": hashlib.sha256(JUDGE_INSTRUCTION.encode("utf-8")).hexdigest(),
        },
        created_at=datetime.now(timezone.utc).isoformat(),
        latents=latents,
        root=root,
    )
    with _phase("manifest"):
        write_manifest(manifest)
    return manifest


def write_manifest(manifest: GenerationManifest) -> Path:
    """Atomically write ``manifest.json`` after checking every referenced file exists."""
    root = Path(manifest.root)
    referenced = list(manifest.images) + list(manifest.latents)
    referenced += [p for record in manifest.passes for p in record.get("images", [])]
    referenced += [f for labels in manifest.mask_index.values() for f in labels.values()]
    referenced += list(manifest.verdicts)
    missing = [p for p in referenced if not (root / p).is_file()]
    if missing:
        raise FileNotFoundError(f"manifest references missing files: {', '.join(missing)}")
    path = root / MANIFEST_FILE
    _write_json_atomic(path, manifest.to_dict())
    logger.info("Manifest written to %s", path)
    return path


def load_manifest(path: Path) -> GenerationManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    data = json.loads(path.read_text(encoding="utf-8"))
    return GenerationManifest.from_dict(data, root=path.parent)


def load_images(manifest: GenerationManifest) -> list[Image.Image]:
    images = []
    for p in manifest.image_paths():
        with Image.open(p) as img:
            images.append(img.convert("RGB"))
    return images


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(manifest: GenerationManifest, adapters: dict) -> list:
    """Classic metrics for a stored run."""
    return classic_metrics(load_images(manifest), manifest.prompts, adapters)


def shuffle_bit(case_id: str, seed: int = 0) -> bool:
    """Deterministic A/B presentation order for a judge case."""
    digest = hashlib.sha256(f"{seed}:{case_id}".encode("utf-8")).digest()
    return bool(digest[0] & 1)


def _instruction_text(manifest: GenerationManifest) -> str:
    plan = manifest.plan
    lines = [f"Goal: {plan.get('goal', '')}"]
    lines += [f"Step {i + 1}: {step.get('action', '')}" for i, step in enumerate(plan.get("steps", []))]
    return "\n".join(lines)


def build_cases(pairs: list[tuple[GenerationManifest, GenerationManifest]], seed: int = 0) -> list[JudgeCase]:
    cases = []
    for a, b in pairs:
        if len(a.images) != len(b.images):
            raise ValueError(f"runs {a.run_id} and {b.run_id} have {len(a.images)} and {len(b.images)} images")
        case_id = f"{a.run_id}-vs-{b.run_id}"
        cases.append(JudgeCase(
            case_id=case_id,
            instruction=_instruction_text(a),
            sequence_a=load_images(a),
            sequence_b=load_images(b),
            shuffle=shuffle_bit(case_id, seed),
        ))
    return cases


def _attach_verdicts(pairs: list, cases: list[JudgeCase], verdicts_by_judge: dict) -> None:
    """Store each verdict under ``eval/verdicts/`` of both runs and rewrite their manifests."""
    by_root: dict[Path, GenerationManifest] = {}
    for i, ((a, b), case) in enumerate(zip(pairs, cases)):
        for manifest in (a, b):
            if manifest.root is None:
                continue
            target = by_root.setdefault(Path(manifest.root).resolve(), manifest)
            for name, verdicts in verdicts_by_judge.items():
                safe = re.sub(r"[^A-Za-z0-9._-]+", "_", f"{name}_{case.case_id}")
                rel = f"eval/verdicts/{safe}.jsonl"
                write_verdicts(Path(target.root) / rel, [verdicts[i]])
                if rel not in target.verdicts:
                    target.verdicts.append(rel)
    for manifest in by_root.values():
        write_manifest(manifest)


def compare(
    manifest_a,
    manifest_b,
    judges,
    *,
    seed: int = 0,
    out_dir: Path | None = None,
    labels: tuple[str, str] = ("A", "B"),
) -> dict:
    """Judge A against B and return the per-aspect win-rate report.

    ``manifest_a``/``manifest_b`` are single manifests or equal-length lists
    of paired runs; ``judges`` is one VlmJudge or several.
    Each verdict is also stored in both runs and listed in their manifests.
    """
    runs_a = manifest_a if isinstance(manifest_a, list) else [manifest_a]
    runs_b = manifest_b if isinstance(manifest_b, list) else [manifest_b]
    if len(runs_a) != len(runs_b):
        raise ValueError(f"{len(runs_a)} A runs paired with {len(runs_b)} B runs")
    judges = judges if isinstance(judges, list) else [judges]

    pairs = list(zip(runs_a, runs_b))
    cases = build_cases(pairs, seed=seed)
    verdicts_by_judge = {}
    for judge in judges:
        verdicts = judge.judge_many(cases)
        verdicts_by_judge[judge.name] = verdicts
        if out_dir is not None:
            safe = re.sub(r"[^A-Za-z0-9._-]+", "_", judge.name)
            write_verdicts(Path(out_dir) / f"{safe}_verdicts.jsonl", verdicts)

    _attach_verdicts(pairs, cases, verdicts_by_judge)
    report = build_report(verdicts_by_judge, *labels)
    if out_dir is not None:
        write_report(Path(out_dir), report)
    return report


def make_judge(model: str, fixtures: Path | None = None, cache_dir: Path = config.CACHE_DIR) -> VlmJudge:
    if fixtures:
        client = FixtureChatClient(fixtures, model=model)
    else:
        client = HttpChatClient(config.JUDGE_BASE_URL, config.LLM_API_KEY, model,
                                max_concurrent=config.MAX_CONCURRENT_REQUESTS)
    return VlmJudge(client, ResponseCache(Path(cache_dir) / "judge"), name=model)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def build_dataset(
    run_config: RunConfig,
    out_path: Path,
    *,
    size: int = config.DATASET_SIZE,
    seed: int = 0,
    llm_client=None,
) -> int:
    """Generate instruction plans and write them as JSON lines; returns the count."""
    client = llm_client or make_llm_client(run_config)
    cache = ResponseCache(run_config.cache_dir / "llm")
    dataset = make_dataset(client, cache, size=size, seed=seed, progress=True)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8") as fh:
        for task, plan in dataset:
            record = {
                "task_id": task.task_id,
                "category": task.category,
                "requested_steps": task.requested_step_count,
                "plan": plan_to_dict(plan),
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    logger.info("Wrote %d plans to %s", len(dataset), out_path)
    return len(dataset)
