"""Run models -- run configuration and the persisted generation manifest."""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import config
from src.models.generation import BackendConfig, PromptMode


class SharingMode(str, Enum):
    """How key/value sharing is biased.

    none: router off; kv: S=1, M=1; kv_local: S=1, M from masks;
    kv_global: S from W, M=1; full: both.
    """

    NONE = "none"
    KV = "kv"
    KV_LOCAL = "kv_local"
    KV_GLOBAL = "kv_global"
    FULL = "full"

    @property
    def uses_masks(self) -> bool:
        return self in (SharingMode.KV_LOCAL, SharingMode.FULL)

    @property
    def uses_similarity(self) -> bool:
        return self in (SharingMode.KV_GLOBAL, SharingMode.FULL)


@dataclass
class RunConfig:
    goal: str = ""
    steps: int = 3
    plan_file: Optional[Path] = None
    prompt_mode: PromptMode = PromptMode.RECAPTION
    sharing: SharingMode = SharingMode.FULL
    backend: BackendConfig = field(default_factory=BackendConfig)
    llm_base_url: str = config.LLM_BASE_URL
    llm_model: str = config.LLM_MODEL
    llm_fixtures: Optional[Path] = None
    segmenter_url: str = config.SEGMENTER_URL
    segmenter_fixtures: Optional[Path] = None
    metrics: str = "mock"
    output_dir: Path = config.OUTPUT_DIR
    cache_dir: Path = config.CACHE_DIR
    seeds: list[int] = field(default_factory=list)
    base_seed: int = 0

    def seeds_for(self, n: int) -> list[int]:
        """One seed per image; explicit seeds win, otherwise base_seed + i."""
        if self.seeds:
            if len(self.seeds) < n:
                raise ValueError(f"need {n} seeds, got {len(self.seeds)}")
            return list(self.seeds[:n])
        return [self.base_seed + i for i in range(n)]

    def snapshot(self) -> dict:
        """Job-defining settings; excludes output location and secrets."""
        return {
            "goal": self.goal,
            "steps": self.steps,
            "plan_file": str(self.plan_file) if self.plan_file else None,
            "prompt_mode": self.prompt_mode.value,
            "sharing": self.sharing.value,
            "backend": self.backend.to_dict(),
            "llm_base_url": self.llm_base_url,
            "llm_model": self.llm_model,
            "llm_fixtures": str(self.llm_fixtures) if self.llm_fixtures else None,
            "segmenter_url": self.segmenter_url,
            "segmenter_fixtures": str(self.segmenter_fixtures) if self.segmenter_fixtures else None,
            "metrics": self.metrics,
            "seeds": list(self.seeds),
            "base_seed": self.base_seed,
        }


@dataclass
class GenerationManifest:
    run_id: str
    config: dict
    plan: dict
    prompts: list[str]
    seeds: list[int]
    mask_index: dict
    images: list[str]
    passes: list[dict]
    metrics: list[dict]
    verdicts: list[str]
    template_hashes: dict
    created_at: str = ""
    latents: list[str] = field(default_factory=list)
    root: Optional[Path] = None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "created_at": self.created_at,
            "config": self.config,
            "plan": self.plan,
            "prompts": self.prompts,
            "seeds": self.seeds,
            "mask_index": self.mask_index,
            "images": self.images,
            "latents": self.latents,
            "passes": self.passes,
            "metrics": self.metrics,
            "verdicts": self.verdicts,
            "template_hashes": self.template_hashes,
        }

    @classmethod
    def from_dict(cls, data: dict, root: Optional[Path] = None) -> "GenerationManifest":
        return cls(
            run_id=data["run_id"],
            config=data.get("config", {}),
            plan=data["plan"],
            prompts=list(data["prompts"]),
            seeds=list(data["seeds"]),
            mask_index=data.get("mask_index", {}),
            images=list(data["images"]),
            passes=list(data.get("passes", [])),
            metrics=list(data.get("metrics", [])),
            verdicts=list(data.get("verdicts", [])),
            template_hashes=data.get("template_hashes", {}),
            created_at=data.get("created_at", ""),
            latents=list(data.get("latents", [])),
            root=root,
        )

    def image_paths(self) -> list[Path]:
        base = self.root or Path(".")
        return [base / p for p in self.images]
