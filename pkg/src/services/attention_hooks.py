"""Attention processors and the sharing controller installed into a denoiser.

A denoiser is hookable when it exposes ``attention_layers()`` returning
``(layer_id, layer)`` pairs whose layers accept ``set_processor``. Each
layer calls ``processor(layer, hidden_states)`` with hidden states shaped
``(B, P, C)``; layers provide ``project`` (one image's tokens to per-head
Q, K, V) and ``merge`` (per-head output back to tokens).
"""
import logging
import math
from typing import Sequence

import numpy as np
import torch

from src.models.generation import FeatureBlock, Router, TraceEntry
from src.models.plan import SimilarityMatrix
from src.services.region_masks import downsample
from src.services.shared_attention import (
    ShapeMismatch,
    biased_attention,
    inflate_masks,
    inflate_similarity,
    shared_attention,
)

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Raised when the denoising loop fails."""


class UnsupportedBackend(BackendError):
    """Raised when a denoiser exposes no replaceable self-attention."""


class PromptTooLong(BackendError):
    """Raised when a prompt exceeds the backend's token limit."""


class SimilarityBias:
    """Bias provider building (S_i^+, M_i^+) for query image i.

    ``similarity`` None means S = 1 everywhere; ``masks`` None means M = 1.
    Masks may be P-length latent vectors or 2-D bitmaps, which are
    max-pooled to each layer's grid on first use.
    """

    def __init__(self, similarity=None, masks: Sequence[np.ndarray] | None = None):
        if isinstance(similarity, SimilarityMatrix):
            similarity = similarity.to_numpy()
        self.similarity = None if similarity is None else np.asarray(similarity, dtype=np.float64)
        self.masks = None if masks is None else [np.asarray(m) for m in masks]
        self._pooled: dict[tuple[int, int], np.ndarray] = {}

    def _mask_at(self, j: int, positions: int) -> np.ndarray:
        mask = self.masks[j]
        if mask.ndim == 1:
            if mask.shape[0] != positions:
                raise ShapeMismatch(f"latent mask {j} has {mask.shape[0]} cells, layer has {positions}")
            return mask
        key = (j, positions)
        if key not in self._pooled:
            self._pooled[key] = downsample(mask, _grid_for(positions, mask.shape))
        return self._pooled[key]

    def __call__(self, i: int, n: int, positions: int) -> tuple[torch.Tensor, torch.Tensor]:
        similarity = self.similarity if self.similarity is not None else np.ones((n, n))
        if similarity.shape != (n, n):
            raise ShapeMismatch(f"similarity matrix {similarity.shape} does not match {n} images")
        s_plus = inflate_similarity(similarity, i, positions)
        if self.masks is None:
            m_plus = torch.ones(n * positions, dtype=torch.float64)
        else:
            if len(self.masks) != n:
                raise ShapeMismatch(f"{len(self.masks)} masks for {n} images")
            m_plus = inflate_masks([self._mask_at(j, positions) for j in range(n)], i)
        return s_plus, m_plus


def _grid_for(positions: int, shape: tuple[int, int]) -> tuple[int, int]:
    """Attention grid (h, w) with h*w = positions and the bitmap's aspect ratio."""
    height, width = shape
    h = max(1, round(math.sqrt(positions * height / width)))
    w = positions // h
    if h * w != positions:
        raise ShapeMismatch(f"cannot map {positions} positions onto a {height}x{width} bitmap")
    return h, w


class SharingController:
    """Holds the router, the bias provider, the current step and the trace."""

    def __init__(self, router: Router, bias_provider, group_size: int | None = None):
        self.router = router
        self.bias_provider = bias_provider
        self.group_size = group_size
        self.step = 0
        self._trace: dict[tuple[int, str], bool] = {}

    def set_step(self, step: int) -> None:
        self.step = step

    def should_share(self, layer_id: str) -> bool:
        shared = bool(self.router(self.step, layer_id))
        self._trace.setdefault((self.step, layer_id), shared)
        return shared

    @property
    def trace(self) -> list[TraceEntry]:
        return [TraceEntry(step, layer, shared) for (step, layer), shared in self._trace.items()]


class AttnProcessor:
    """Plain self-attention, one image at a time."""

    def __call__(self, attn, hidden_states: torch.Tensor) -> torch.Tensor:
        outputs = []
        for b in range(hidden_states.shape[0]):
            q, k, v = attn.project(hidden_states[b])
            outputs.append(attn.merge(biased_attention(q, k, v)))
        return torch.stack(outputs)


class SharedAttnProcessor(AttnProcessor):
    """Shared attention across the batch on routed (step, layer) pairs."""

    def __init__(self, controller: SharingController, layer_id: str):
        self.controller = controller
        self.layer_id = layer_id

    def __call__(self, attn, hidden_states: torch.Tensor) -> torch.Tensor:
        if not self.controller.should_share(self.layer_id):
            return super().__call__(attn, hidden_states)

        batch = hidden_states.shape[0]
        group = self.controller.group_size or batch
        if batch % group:
            raise BackendError(f"batch of {batch} is not a multiple of the image count {group}")

        projected = [attn.project(hidden_states[b]) for b in range(batch)]
        outputs = []
        for start in range(0, batch, group):
            chunk = projected[start:start + group]
            blocks = FeatureBlock(
                queries=torch.stack([p[0] for p in chunk]),
                keys=torch.stack([p[1] for p in chunk]),
                values=torch.stack([p[2] for p in chunk]),
            )
            positions = blocks.positions
            for i in range(group):
                s_plus, m_plus = self.controller.bias_provider(i, group, positions)
                outputs.append(attn.merge(shared_attention(blocks, s_plus, m_plus, i)))
        return torch.stack(outputs)


class HookedDenoiser:
    """A denoiser with shared-attention processors installed."""

    def __init__(self, denoiser, controller: SharingController):
        self.denoiser = denoiser
        self.controller = controller

    def __call__(self, *args, **kwargs):
        return self.denoiser(*args, **kwargs)

    def set_step(self, step: int) -> None:
        self.controller.set_step(step)

    @property
    def trace(self) -> list[TraceEntry]:
        return self.controller.trace

    def remove(self):
        """Restore plain attention on every layer and return the bare denoiser."""
        for _, layer in self.denoiser.attention_layers():
            layer.set_processor(AttnProcessor())
        return self.denoiser


def install_processor(denoiser, router: Router, bias_provider, group_size: int | None = None) -> HookedDenoiser:
    """Replace every self-attention processor of *denoiser* with a shared one."""
    layers_fn = getattr(denoiser, "attention_layers", None)
    if layers_fn is None:
        raise UnsupportedBackend(f"{type(denoiser).__name__} exposes no replaceable attention layers")
    layers = list(layers_fn())
    if not layers:
        raise UnsupportedBackend(f"{type(denoiser).__name__} has no self-attention layers")
    controller = SharingController(router, bias_provider, group_size=group_size)
    for layer_id, layer in layers:
        layer.set_processor(SharedAttnProcessor(controller, layer_id))
    logger.debug("Installed shared attention on %d layers", len(layers))
    return HookedDenoiser(denoiser, controller)
