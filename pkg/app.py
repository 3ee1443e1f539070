"""Visual instruction generator - command-line entry point."""
import functools
import json
import logging
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

import config
from src.models.generation import PromptMode
from src.models.plan import InstructionTask
from src.models.run import SharingMode
from src.services.attention_hooks import BackendError
from src.services.judge import ParseError, format_report_table
from src.services.llm_client import ClientError
from src.services.metrics import build_adapters
from src.services.pipeline import (
    ConfigError,
    PhaseError,
    build_dataset,
    compare as compare_runs,
    evaluate as evaluate_run,
    load_manifest,
    load_run_config,
    make_judge,
    make_llm_client,
    run,
)
from src.services.planner import (
    MalformedResponse,
    PlanValidationError,
    SchemaViolation,
    plan_task,
    serialize_plan,
    validate_plan,
)
from src.services.region_masks import AdapterError, ImageFormatError
from src.services.response_cache import ResponseCache

logger = logging.getLogger(__name__)
console = Console()

app = typer.Typer(help="Turn step-by-step instructions into coherent image sequences.", no_args_is_help=True)

EXIT_VALIDATION = 2
EXIT_ADAPTER = 3
EXIT_BACKEND = 4

_VALIDATION_ERRORS = (PlanValidationError, MalformedResponse, SchemaViolation, ParseError, ConfigError, ValueError)
_ADAPTER_ERRORS = (ClientError, AdapterError, ImageFormatError)


def exit_code_for(exc: BaseException) -> int:
    """0 ok, 2 validation, 3 adapter, 4 backend; PhaseError maps through its cause."""
    if isinstance(exc, PhaseError):
        exc = exc.cause
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    if isinstance(exc, _ADAPTER_ERRORS):
        return EXIT_ADAPTER
    if isinstance(exc, _VALIDATION_ERRORS):
        return EXIT_VALIDATION
    return 1


def _handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except typer.Exit:
            raise
        except Exception as exc:
            code = exit_code_for(exc)
            if code == 1:
                logger.exception("Unexpected failure")
            else:
                logger.error("%s", exc)
            raise typer.Exit(code) from exc
    return wrapper


@app.callback()
def main(
    ctx: typer.Context,
    config_file: Optional[Path] = typer.Option(None, "--config", help="KEY=VALUE run configuration file."),
    mode: Optional[PromptMode] = typer.Option(None, "--mode", help="Prompt composition mode."),
    sharing: Optional[SharingMode] = typer.Option(None, "--sharing", help="Key/value sharing mode."),
    backend: Optional[str] = typer.Option(None, "--backend", help="Diffusion backend id (toy, stable_cascade)."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Base seed; image i uses seed + i."),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory."),
):
    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=config.LOG_LEVEL,
            format="%(message)s",
            datefmt="[%X]",
            handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        )
    ctx.obj = {
        "config_file": config_file,
        "overrides": {
            "PROMPT_MODE": mode.value if mode else None,
            "SHARING": sharing.value if sharing else None,
            "BACKEND": backend,
            "SEED": seed,
            "OUTPUT_DIR": out,
        },
    }


def _run_config(ctx: typer.Context, **extra):
    overrides = dict(ctx.obj["overrides"])
    overrides.update({k.upper(): v for k, v in extra.items()})
    return load_run_config(ctx.obj["config_file"], overrides)


@app.command()
@_handle_errors
def plan(
    ctx: typer.Context,
    goal: str = typer.Argument(..., help="Task goal, e.g. 'decorating a cake'."),
    steps: int = typer.Option(3, "--steps", min=1),
    llm_fixtures: Optional[Path] = typer.Option(None, "--llm-fixtures", help="Directory of recorded responses."),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Write the plan JSON here."),
):
    """Ask the planner for a plan and print it."""
    run_config = _run_config(ctx, goal=goal, steps=steps, llm_fixtures=llm_fixtures)
    client = make_llm_client(run_config)
    result = plan_task(InstructionTask(goal=goal, requested_step_count=steps), client,
                       ResponseCache(run_config.cache_dir / "llm"))
    text = serialize_plan(result)
    violations = validate_plan(result)
    if output:
        output.write_text(text, encoding="utf-8")
    else:
        console.print_json(text)
    if violations:
        raise PlanValidationError(violations)


@app.command()
@_handle_errors
def generate(
    ctx: typer.Context,
    goal: Optional[str] = typer.Argument(None, help="Task goal; omit when using --plan-file."),
    steps: Optional[int] = typer.Option(None, "--steps", min=1),
    plan_file: Optional[Path] = typer.Option(None, "--plan-file", exists=True, dir_okay=False),
    llm_fixtures: Optional[Path] = typer.Option(None, "--llm-fixtures"),
    segmenter_fixtures: Optional[Path] = typer.Option(None, "--segmenter-fixtures"),
    metrics: Optional[str] = typer.Option(None, "--metrics", help="mock, models or none."),
):
    """Plan, recaption, generate and write a run directory."""
    run_config = _run_config(
        ctx, goal=goal, steps=steps, plan_file=plan_file, llm_fixtures=llm_fixtures,
        segmenter_fixtures=segmenter_fixtures, metrics=metrics,
    )
    manifest = run(run_config)
    console.print(f"[green]Run {manifest.run_id}[/green] written to {manifest.root}")


@app.command()
@_handle_errors
def evaluate(
    manifest_path: Path = typer.Argument(..., exists=True, help="Run directory or manifest.json."),
    metrics: str = typer.Option("mock", "--metrics", help="mock or models."),
):
    """Compute classic metrics for a stored run."""
    manifest = load_manifest(manifest_path)
    records = evaluate_run(manifest, build_adapters(metrics))
    table = Table(title=f"Run {manifest.run_id}")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    table.add_column("Better")
    for record in records:
        table.add_row(record.name, f"{record.value:.4f}", record.direction)
    console.print(table)


@app.command()
@_handle_errors
def compare(
    ctx: typer.Context,
    manifests: list[Path] = typer.Argument(..., help="Run pairs: A1 B1 [A2 B2 ...]."),
    judge_model: list[str] = typer.Option([config.JUDGE_MODEL], "--judge-model", help="Repeat for several judges."),
    judge_fixtures: Optional[Path] = typer.Option(None, "--judge-fixtures"),
    report_dir: Optional[Path] = typer.Option(None, "--report-dir"),
):
    """Judge paired runs on the four aspects and print win rates."""
    if len(manifests) % 2:
        raise ValueError("compare expects run directories in A/B pairs")
    runs = [load_manifest(p) for p in manifests]
    seed = ctx.obj["overrides"]["SEED"] or 0
    judges = [make_judge(model, judge_fixtures) for model in judge_model]
    report = compare_runs(runs[0::2], runs[1::2], judges, seed=seed, out_dir=report_dir)
    console.print(format_report_table(report))


@app.command()
@_handle_errors
def dataset(
    ctx: typer.Context,
    size: int = typer.Option(config.DATASET_SIZE, "--size", min=1),
    output: Path = typer.Option(Path("dataset.jsonl"), "--output", "-o"),
    llm_fixtures: Optional[Path] = typer.Option(None, "--llm-fixtures"),
):
    """Propose goals per category and plan them into a JSON-lines dataset."""
    run_config = _run_config(ctx, llm_fixtures=llm_fixtures)
    count = build_dataset(run_config, output, size=size, seed=ctx.obj["overrides"]["SEED"] or 0)
    console.print(json.dumps({"plans": count, "output": str(output)}))


if __name__ == "__main__":
    app()
