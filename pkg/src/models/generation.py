"""Generation models -- prompts, attention schedule, region masks and backend I/O."""
from dataclasses import dataclass, field
from enum import Enum
from fnmatch import fnmatchcase
from typing import Callable

import numpy as np
import torch
from PIL import Image

import config


class PromptMode(str, Enum):
    INSTRUCTION_ONLY = "instruction_only"
    CONCATENATION = "concatenation"
    RECAPTION = "recaption"


@dataclass(frozen=True)
class StepPrompt:
    index: int
    text: str
    mode: PromptMode


@dataclass(frozen=True)
class AttentionSchedule:
    """Which denoising steps and layers use shared attention.

    Steps are counted 0-based from the first (noisiest) iteration.
    ``layer_pattern`` is a glob matched against layer identifiers; the
    default matches every self-attention layer the backend exposes.
    """

    total_steps: int = config.TOTAL_STEPS
    shared_steps: int = config.SHARED_STEPS
    layer_pattern: str = "*"

    def __post_init__(self):
        if not 0 <= self.shared_steps <= self.total_steps:
            raise ValueError(
                f"shared_steps must lie in [0, {self.total_steps}], got {self.shared_steps}"
            )

    @property
    def layer_filter(self) -> Callable[[str], bool]:
        pattern = self.layer_pattern
        return lambda layer_id: fnmatchcase(str(layer_id), pattern)

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "shared_steps": self.shared_steps,
            "layer_pattern": self.layer_pattern,
        }


@dataclass
class FeatureBlock:
    """Per-image queries, keys and values stacked on a leading image axis.

    Shapes are ``(N, ..., P, d)``; any axes between the image axis and the
    position axis (attention heads) are carried through unchanged.
    """

    queries: torch.Tensor
    keys: torch.Tensor
    values: torch.Tensor

    @property
    def num_images(self) -> int:
        return self.keys.shape[0]

    @property
    def positions(self) -> int:
        return self.keys.shape[-2]


@dataclass
class ObjectMask:
    step: int
    label: str
    bitmap: np.ndarray   # (H, W) uint8 in {0, 1}
    latent: np.ndarray   # (P,) uint8 in {0, 1}


@dataclass
class RegionMaskSet:
    """Per-step union of the shared-object masks at both resolutions."""

    bitmaps: list[np.ndarray]
    latents: list[np.ndarray]
    labels: list[list[str]] = field(default_factory=list)
    image_size: tuple[int, int] = config.IMAGE_SIZE
    latent_size: tuple[int, int] = config.LATENT_SIZE

    def __len__(self) -> int:
        return len(self.latents)


@dataclass(frozen=True)
class ToyDenoiserSpec:
    latent_channels: int = config.LATENT_CHANNELS
    latent_size: tuple[int, int] = config.LATENT_SIZE
    hidden_dim: int = 16
    heads: int = 2
    num_layers: int = 2
    weight_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "latent_size": list(self.latent_size),
            "hidden_dim": self.hidden_dim,
            "heads": self.heads,
            "num_layers": self.num_layers,
            "weight_seed": self.weight_seed,
        }


@dataclass(frozen=True)
class BackendConfig:
    backend: str = "toy"
    image_size: tuple[int, int] = config.IMAGE_SIZE
    total_steps: int = config.TOTAL_STEPS
    guidance_scale: float = config.GUIDANCE_SCALE
    schedule: AttentionSchedule = field(default_factory=AttentionSchedule)
    max_prompt_tokens: int = config.MAX_PROMPT_TOKENS
    toy: ToyDenoiserSpec = field(default_factory=ToyDenoiserSpec)

    def __post_init__(self):
        if self.total_steps != self.schedule.total_steps:
            raise ValueError(
                f"total_steps ({self.total_steps}) must match "
                f"schedule.total_steps ({self.schedule.total_steps})"
            )

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "image_size": list(self.image_size),
            "total_steps": self.total_steps,
            "guidance_scale": self.guidance_scale,
            "schedule": self.schedule.to_dict(),
            "max_prompt_tokens": self.max_prompt_tokens,
            "toy": self.toy.to_dict(),
        }


@dataclass(frozen=True)
class TraceEntry:
    step: int
    layer_id: str
    shared: bool


@dataclass
class GenerationResult:
    images: list[Image.Image]
    latents: list[np.ndarray]
    prompts: list[str]
    seeds: list[int]
    trace: list[TraceEntry]

    def shared_steps(self) -> list[int]:
        """Sorted denoising steps at which at least one layer shared."""
        return sorted({e.step for e in self.trace if e.shared})

    def trace_by_step(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for entry in self.trace:
            layers = out.setdefault(entry.step, [])
            if entry.shared and entry.layer_id not in layers:
                layers.append(entry.layer_id)
        return out


Router = Callable[[int, str], bool]
