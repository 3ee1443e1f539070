"""Classic sequence metrics: CLIP score, DreamSim and DINOv2 L2 distance.

Model-backed adapters load their weights lazily on first use. The mock
adapter derives deterministic values from content hashes.
"""
import hashlib
import io
import logging
from typing import Protocol

import numpy as np
import torch
from PIL import Image

from src.models.evaluation import MetricRecord
from src.services.region_masks import AdapterError

logger = logging.getLogger(__name__)

CLIP_MODEL_ID = "openai/clip-vit-base-patch32"
DINO_MODEL_ID = "facebook/dinov2-base"
PAIR_METRICS = ("dreamsim", "l2_dino")


class TextImageScorer(Protocol):
    def score(self, image: Image.Image, prompt: str) -> float: ...


class ImageDistance(Protocol):
    def distance(self, first: Image.Image, second: Image.Image) -> float: ...


def _device() -> str:
    return "cuda" if torch.cuda.is_available() else "cpu"


def _image_digest(image: Image.Image) -> bytes:
    buffer = io.BytesIO()
    image.convert("RGB").save(buffer, format="PNG")
    return hashlib.sha256(buffer.getvalue()).digest()


def _unit(digest: bytes) -> float:
    return int.from_bytes(digest[:8], "big") / 2**64


class MockMetricAdapter:
    """Hash-derived scores and distances; identical images are at distance 0."""

    def __init__(self, name: str = "mock"):
        self.name = name

    def score(self, image: Image.Image, prompt: str) -> float:
        digest = hashlib.sha256(self.name.encode() + _image_digest(image) + prompt.encode("utf-8")).digest()
        return _unit(digest)

    def distance(self, first: Image.Image, second: Image.Image) -> float:
        a, b = sorted((_image_digest(first), _image_digest(second)))
        if a == b:
            return 0.0
        return 1.0 - _unit(hashlib.sha256(self.name.encode() + a + b).digest())


class ClipScoreAdapter:
    """CLIP score = max(cos(image, text), 0) * 100 with a transformers CLIP model."""

    def __init__(self, model_id: str = CLIP_MODEL_ID, device: str | None = None):
        self.model_id = model_id
        self.device = device or _device()
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is None:
            try:
                from transformers import CLIPModel, CLIPProcessor
                self._model = CLIPModel.from_pretrained(self.model_id).to(self.device).eval()
                self._processor = CLIPProcessor.from_pretrained(self.model_id)
            except Exception as exc:
                raise AdapterError(f"cannot load CLIP model {self.model_id}: {exc}") from exc
        return self._model, self._processor

    @torch.no_grad()
    def score(self, image: Image.Image, prompt: str) -> float:
        model, processor = self._load()
        inputs = processor(text=[prompt], images=[image.convert("RGB")], return_tensors="pt",
                           padding=True, truncation=True).to(self.device)
        image_features = model.get_image_features(pixel_values=inputs["pixel_values"])
        text_features = model.get_text_features(
            input_ids=inputs["input_ids"], attention_mask=inputs["attention_mask"]
        )
        image_features = image_features / image_features.norm(dim=-1, keepdim=True)
        text_features = text_features / text_features.norm(dim=-1, keepdim=True)
        cosine = (image_features * text_features).sum().float()
        return float(torch.clamp(cosine, min=0.0) * 100.0)


class DinoDistanceAdapter:
    """L2 distance between unit-normalized DINOv2 CLS embeddings."""

    def __init__(self, model_id: str = DINO_MODEL_ID, device: str | None = None):
        self.model_id = model_id
        self.device = device or _device()
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is None:
            try:
                from transformers import AutoImageProcessor, AutoModel
                self._model = AutoModel.from_pretrained(self.model_id).to(self.device).eval()
                self._processor = AutoImageProcessor.from_pretrained(self.model_id)
            except Exception as exc:
                raise AdapterError(f"cannot load DINOv2 model {self.model_id}: {exc}") from exc
        return self._model, self._processor

    @torch.no_grad()
    def _embed(self, image: Image.Image) -> torch.Tensor:
        model, processor = self._load()
        inputs = processor(images=image.convert("RGB"), return_tensors="pt").to(self.device)
        cls = model(**inputs).last_hidden_state[:, 0].float()
        return cls / cls.norm(dim=-1, keepdim=True)

    def distance(self, first: Image.Image, second: Image.Image) -> float:
        return float(torch.linalg.vector_norm(self._embed(first) - self._embed(second)))


class DreamSimAdapter:
    """Perceptual distance from the optional ``dreamsim`` package."""

    def __init__(self, device: str | None = None):
        self.device = device or _device()
        self._model = None
        self._preprocess = None

    def _load(self):
        if self._model is None:
            try:
                from dreamsim import dreamsim
            except ImportError as exc:
                raise AdapterError("dreamsim is not installed. Run: pip install dreamsim") from exc
            try:
                self._model, self._preprocess = dreamsim(pretrained=True, device=self.device)
            except Exception as exc:
                raise AdapterError(f"cannot load DreamSim weights: {exc}") from exc
        return self._model, self._preprocess

    @torch.no_grad()
    def distance(self, first: Image.Image, second: Image.Image) -> float:
        model, preprocess = self._load()
        a = preprocess(first.convert("RGB")).to(self.device)
        b = preprocess(second.convert("RGB")).to(self.device)
        return float(model(a, b))


def build_adapters(kind: str = "mock") -> dict:
    """Adapters keyed by metric name; ``kind`` is "mock" or "models"."""
    if kind == "mock":
        return {name: MockMetricAdapter(name) for name in ("clip_score", *PAIR_METRICS)}
    if kind == "models":
        return {
            "clip_score": ClipScoreAdapter(),
            "dreamsim": DreamSimAdapter(),
            "l2_dino": DinoDistanceAdapter(),
        }
    raise ValueError(f"unknown metric adapter kind {kind!r}")


def classic_metrics(sequence: list[Image.Image], prompts: list[str], adapters: dict) -> list[MetricRecord]:
    """Average CLIP score over (image, prompt) pairs and distances over consecutive images.

    Distance metrics are omitted for single-image sequences.
    """
    if len(sequence) != len(prompts):
        raise ValueError(f"{len(sequence)} images for {len(prompts)} prompts")
    if not sequence:
        raise ValueError("sequence must not be empty")

    records = []
    if "clip_score" in adapters:
        scores = [adapters["clip_score"].score(img, p) for img, p in zip(sequence, prompts)]
        records.append(MetricRecord("clip_score", float(np.mean(scores))))
    for name in PAIR_METRICS:
        if name not in adapters:
            continue
        if len(sequence) < 2:
            logger.debug("Skipping %s for a single-image sequence", name)
            continue
        distances = [adapters[name].distance(a, b) for a, b in zip(sequence, sequence[1:])]
        records.append(MetricRecord(name, float(np.mean(distances))))
    return records
