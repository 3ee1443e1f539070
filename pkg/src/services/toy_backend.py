"""Deterministic toy diffusion backend and the multi-image sampling loop.

The toy denoiser is a tiny x0-predicting network with genuine softmax
self-attention layers. Every dense operation runs one image at a time, so
an image's result never depends on how many images share the batch.
"""
import hashlib
import json
import logging
import math
from functools import partial
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from src.models.generation import BackendConfig, GenerationResult, ToyDenoiserSpec
from src.services.attention_hooks import (
    AttnProcessor,
    BackendError,
    PromptTooLong,
    SimilarityBias,
    UnsupportedBackend,
    install_processor,
)
from src.services.shared_attention import attention_router

logger = logging.getLogger(__name__)


class ToySelfAttention(nn.Module):
    """Multi-head self-attention with a swappable processor."""

    def __init__(self, dim: int, heads: int, layer_id: str):
        super().__init__()
        if dim % heads:
            raise ValueError(f"hidden_dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.layer_id = layer_id
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        self.processor = AttnProcessor()

    def set_processor(self, processor) -> None:
        self.processor = processor

    def _split(self, tokens: torch.Tensor) -> torch.Tensor:
        # Contiguous, so plain and shared attention feed matmul identical layouts.
        return tokens.reshape(tokens.shape[0], self.heads, self.head_dim).transpose(0, 1).contiguous()

    def project(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(P, C) tokens of one image -> per-head Q, K, V shaped (heads, P, d)."""
        return self._split(self.to_q(tokens)), self._split(self.to_k(tokens)), self._split(self.to_v(tokens))

    def merge(self, heads_out: torch.Tensor) -> torch.Tensor:
        """(heads, P, d) -> (P, C) through the output projection."""
        positions = heads_out.shape[-2]
        return self.to_out(heads_out.transpose(0, 1).reshape(positions, self.heads * self.head_dim))

    def forward(self, hidden_states: torch.Tensor) -> torch.Tensor:
        return self.processor(self, hidden_states)


class ToyDenoiser(nn.Module):
    """in_proj -> (self-attention, tanh) x L -> out_proj, conditioned on prompt and timestep."""

    def __init__(self, spec: ToyDenoiserSpec):
        super().__init__()
        self.spec = spec
        dim = spec.hidden_dim
        self.in_proj = nn.Linear(spec.latent_channels, dim)
        self.layers = nn.ModuleList(
            ToySelfAttention(dim, spec.heads, f"layers.{k}.attn1") for k in range(spec.num_layers)
        )
        self.out_proj = nn.Linear(dim, spec.latent_channels)
        self._init_weights(spec.weight_seed)

    @torch.no_grad()
    def _init_weights(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        for name, param in self.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                param.copy_(torch.randn(param.shape, generator=generator) / math.sqrt(param.shape[1]))

    def attention_layers(self) -> list[tuple[str, ToySelfAttention]]:
        return [(layer.layer_id, layer) for layer in self.layers]

    def embed_prompt(self, prompt: str) -> torch.Tensor:
        """Seeded embedding of the prompt's sha256; distinct prompts get distinct vectors."""
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        generator = torch.Generator().manual_seed(int(digest[:15], 16))
        return torch.randn(self.spec.hidden_dim, generator=generator)

    def timestep_embedding(self, t: float) -> torch.Tensor:
        half = self.spec.hidden_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
        angles = t * freqs
        emb = torch.cat([torch.sin(angles), torch.cos(angles)])
        if emb.shape[0] < self.spec.hidden_dim:
            emb = torch.cat([emb, torch.zeros(self.spec.hidden_dim - emb.shape[0])])
        return emb

    def forward(self, latents: torch.Tensor, t: float, cond: torch.Tensor) -> torch.Tensor:
        """Predict x0 for a batch of latents (B, C, H, W) given per-image conditioning (B, D)."""
        batch, channels, height, width = latents.shape
        temb = self.timestep_embedding(t)
        hidden = torch.stack([
            self.in_proj(latents[b].reshape(channels, height * width).T) + cond[b] + temb
            for b in range(batch)
        ])
        for layer in self.layers:
            attended = layer(hidden)
            hidden = torch.stack([torch.tanh(attended[b]) for b in range(batch)])
        return torch.stack([
            self.out_proj(hidden[b]).T.reshape(channels, height, width) for b in range(batch)
        ])


def toy_denoiser(spec: ToyDenoiserSpec | None = None) -> ToyDenoiser:
    """Build the toy denoiser; equal specs give identical weights."""
    model = ToyDenoiser(spec or ToyDenoiserSpec())
    model.eval()
    return model


def count_tokens(prompt: str) -> int:
    return len(prompt.split())


def check_prompts(prompts: list[str], max_tokens: int) -> None:
    for index, prompt in enumerate(prompts):
        tokens = count_tokens(prompt)
        if tokens > max_tokens:
            raise PromptTooLong(f"prompt {index} has {tokens} tokens, limit is {max_tokens}")


def decode_latent(latent: torch.Tensor, image_size: tuple[int, int]) -> Image.Image:
    """Map the first three latent channels to RGB and upsample to *image_size* (height, width)."""
    array = latent.detach().cpu().numpy()
    if array.shape[0] < 3:
        array = np.concatenate([array] * 3)[:3]
    rgb = np.clip(np.round((np.tanh(array[:3]) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    image = Image.fromarray(np.ascontiguousarray(rgb.transpose(1, 2, 0)))
    height, width = image_size
    return image.resize((width, height), Image.Resampling.NEAREST)


def initial_latents(seeds: list[int], spec: ToyDenoiserSpec) -> torch.Tensor:
    """One generator per image, so each image's noise depends only on its seed."""
    shape = (spec.latent_channels, *spec.latent_size)
    return torch.stack([
        torch.randn(shape, generator=torch.Generator().manual_seed(int(seed))) for seed in seeds
    ])


def generate_sequence(
    prompts: list[str],
    seeds: list[int],
    masks=None,
    similarity=None,
    config: BackendConfig | None = None,
    *,
    denoiser=None,
) -> GenerationResult:
    """Generate one image per prompt with shared attention across the sequence.

    Parameters
    ----------
    prompts, seeds:
        One entry per image.
    masks:
        Per-image latent vectors or bitmaps; None leaves every region open.
    similarity:
        N x N matrix W; None means all ones.
    config:
        Backend settings, including the sharing schedule.
    denoiser:
        Pre-built denoiser to reuse; built from ``config.toy`` when omitted.

    Raises
    ------
    PromptTooLong, BackendError, UnsupportedBackend
    """
    config = config or BackendConfig()
    if config.backend == "stable_cascade":
        from src.services.diffusers_backend import generate_sequence_diffusers
        return generate_sequence_diffusers(prompts, seeds, masks, similarity, config)
    if config.backend != "toy":
        raise UnsupportedBackend(f"unknown backend {config.backend!r}")

    n = len(prompts)
    if n == 0:
        raise ValueError("at least one prompt is required")
    if len(seeds) != n:
        raise ValueError(f"{len(seeds)} seeds for {n} prompts")
    if similarity is not None and np.shape(getattr(similarity, "values", similarity)) != (n, n):
        raise ValueError(f"similarity matrix must be {n}x{n}")
    check_prompts(prompts, config.max_prompt_tokens)

    model = denoiser if denoiser is not None else toy_denoiser(config.toy)
    router = partial(attention_router, config.schedule)
    hooked = install_processor(model, router, SimilarityBias(similarity, masks), group_size=n)

    try:
        with torch.no_grad():
            latents = initial_latents(seeds, config.toy)
            cond = torch.stack([model.embed_prompt(p) for p in prompts])
            uncond = torch.stack([model.embed_prompt("") for _ in prompts])
            for step in range(config.total_steps):
                hooked.set_step(step)
                t = 1.0 - step / config.total_steps
                x0 = hooked(latents, t, cond)
                if config.guidance_scale != 1.0:
                    x0_uncond = hooked(latents, t, uncond)
                    x0 = x0_uncond + config.guidance_scale * (x0 - x0_uncond)
                # Running mean of the x0 predictions, seeded with the initial noise.
                latents = latents + (x0 - latents) / (step + 2)
    except RuntimeError as exc:
        raise BackendError(f"toy sampling failed: {exc}") from exc
    finally:
        hooked.remove()

    trace = hooked.trace
    logger.debug("Sampled %d images; shared steps %s", n, sorted({e.step for e in trace if e.shared}))
    return GenerationResult(
        images=[decode_latent(latents[b], config.image_size) for b in range(n)],
        latents=[latents[b].numpy().astype(np.float32) for b in range(n)],
        prompts=list(prompts),
        seeds=[int(s) for s in seeds],
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Latent files
# ---------------------------------------------------------------------------

def write_latent(path: Path, latent: np.ndarray) -> tuple[Path, Path]:
    """Write a little-endian float32 blob plus a ``.json`` shape header beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(latent, dtype="<f4")
    path.write_bytes(array.tobytes())
    header = path.with_suffix(".json")
    header.write_text(
        json.dumps({"shape": list(array.shape), "dtype": "float32", "byteorder": "little"}),
        encoding="utf-8",
    )
    return path, header


def read_latent(path: Path) -> np.ndarray:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(header["shape"])
