"""Per-step object region masks: shared-object selection, segmentation and downsampling."""
import base64
import hashlib
import io
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Protocol

import numpy as np
import requests
from PIL import Image, UnidentifiedImageError

import config
from src.models.generation import ObjectMask, RegionMaskSet
from src.models.plan import Continuity, Plan
from src.services.shared_attention import ShapeMismatch

logger = logging.getLogger(__name__)

MASK_INDEX_FILE = "index.json"


class AdapterError(Exception):
    """Raised when a segmentation backend fails."""


class ImageFormatError(Exception):
    """Raised when an input cannot be read as an RGB image."""


class SegmentationAdapter(Protocol):
    def segment(self, image: Image.Image, label: str, step: int) -> np.ndarray | None:
        """Return an (H, W) {0,1} bitmap for *label*, or None if not detected."""
        ...


# ---------------------------------------------------------------------------
# Shared objects
# ---------------------------------------------------------------------------

def select_shared_objects(plan: Plan) -> list[list[str]]:
    """Labels whose regions are shared, per step.

    A non-new tag at step k referencing step r marks its label as shared
    at both k and r. Tags marked new contribute nothing on their own.
    """
    shared: list[list[str]] = [[] for _ in plan.steps]
    for step in plan.steps:
        for tag in step.objects:
            if tag.continuity is Continuity.NEW or tag.reference_step is None:
                continue
            for target in (tag.reference_step, step.index):
                if 0 <= target < len(shared) and tag.label not in shared[target]:
                    shared[target].append(tag.label)
    return shared


# ---------------------------------------------------------------------------
# Bitmaps
# ---------------------------------------------------------------------------

def to_image(image) -> Image.Image:
    """Coerce a PIL image, array or path into an RGB PIL image."""
    try:
        if isinstance(image, Image.Image):
            return image.convert("RGB")
        if isinstance(image, (str, Path)):
            with Image.open(image) as img:
                return img.convert("RGB")
        if isinstance(image, np.ndarray):
            if image.ndim not in (2, 3):
                raise ImageFormatError(f"image array must be 2-D or 3-D, got shape {image.shape}")
            return Image.fromarray(image.astype(np.uint8)).convert("RGB")
    except (OSError, UnidentifiedImageError, TypeError, ValueError) as exc:
        raise ImageFormatError(f"cannot read image: {exc}") from exc
    raise ImageFormatError(f"unsupported image type {type(image).__name__}")


def bitmap_from_image(mask_image: Image.Image) -> np.ndarray:
    return (np.asarray(mask_image.convert("L")) > 127).astype(np.uint8)


def bitmap_to_image(bitmap: np.ndarray) -> Image.Image:
    return Image.fromarray((np.asarray(bitmap) > 0).astype(np.uint8) * 255)


def downsample(bitmap: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Max-pool an (H, W) bitmap to (h, w) and flatten it to P = h*w cells.

    A cell is 1 iff any pixel it covers is 1. Non-integral scale factors
    use area binning with cell edges rounded outward.
    """
    bitmap = (np.asarray(bitmap) > 0).astype(np.uint8)
    if bitmap.ndim != 2:
        raise ShapeMismatch(f"bitmap must be 2-D, got shape {bitmap.shape}")
    height, width = bitmap.shape
    h, w = target
    if h < 1 or w < 1 or height < h or width < w:
        raise ShapeMismatch(f"cannot downsample {bitmap.shape} to {(h, w)}")
    if height % h == 0 and width % w == 0:
        pooled = bitmap.reshape(h, height // h, w, width // w).max(axis=(1, 3))
        return pooled.reshape(-1)
    pooled = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        r0, r1 = (r * height) // h, -(-((r + 1) * height) // h)
        for c in range(w):
            c0, c1 = (c * width) // w, -(-((c + 1) * width) // w)
            pooled[r, c] = bitmap[r0:r1, c0:c1].max()
    return pooled.reshape(-1)


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

def segment(
    image,
    labels: list[str],
    adapter: SegmentationAdapter,
    *,
    step: int = 0,
    latent_size: tuple[int, int] = config.LATENT_SIZE,
) -> list[ObjectMask]:
    """Segment each label in *image*; undetected labels are logged and skipped."""
    pil = to_image(image)
    masks = []
    for label in labels:
        bitmap = adapter.segment(pil, label, step)
        if bitmap is None:
            logger.warning("Label %r not detected in step %d", label, step)
            continue
        bitmap = (np.asarray(bitmap) > 0).astype(np.uint8)
        if bitmap.shape != (pil.height, pil.width):
            raise ShapeMismatch(
                f"mask for {label!r} is {bitmap.shape}, image is {(pil.height, pil.width)}"
            )
        masks.append(ObjectMask(step=step, label=label, bitmap=bitmap, latent=downsample(bitmap, latent_size)))
    return masks


def segment_steps(
    images: list,
    labels_per_step: list[list[str]],
    adapter: SegmentationAdapter,
    *,
    latent_size: tuple[int, int] = config.LATENT_SIZE,
    max_workers: int = config.MAX_CONCURRENT_REQUESTS,
) -> list[ObjectMask]:
    """Segment every step concurrently; results keep step order."""
    def _one(step: int) -> list[ObjectMask]:
        labels = labels_per_step[step]
        if not labels:
            return []
        return segment(images[step], labels, adapter, step=step, latent_size=latent_size)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        per_step = list(pool.map(_one, range(len(images))))
    return [m for masks in per_step for m in masks]


def build_region_masks(
    masks: list[ObjectMask],
    num_steps: int,
    *,
    image_size: tuple[int, int] = config.IMAGE_SIZE,
    latent_size: tuple[int, int] = config.LATENT_SIZE,
) -> RegionMaskSet:
    """OR the object masks of each step; steps without masks stay all-zero."""
    bitmaps = [np.zeros(image_size, dtype=np.uint8) for _ in range(num_steps)]
    latents = [np.zeros(latent_size[0] * latent_size[1], dtype=np.uint8) for _ in range(num_steps)]
    labels: list[list[str]] = [[] for _ in range(num_steps)]
    for mask in masks:
        bitmaps[mask.step] = np.maximum(bitmaps[mask.step], mask.bitmap)
        latents[mask.step] = np.maximum(latents[mask.step], mask.latent)
        labels[mask.step].append(mask.label)
    return RegionMaskSet(
        bitmaps=bitmaps,
        latents=latents,
        labels=labels,
        image_size=image_size,
        latent_size=latent_size,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def mask_filename(step: int, label: str, disambiguate: bool = False) -> str:
    safe = re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_") or "object"
    if disambiguate:
        safe = f"{safe}_{hashlib.sha256(label.encode('utf-8')).hexdigest()[:8]}"
    return f"step{step}_{safe}.png"


def save_masks(masks: list[ObjectMask], directory: Path) -> dict:
    """Write ``step{i}_{label}.png`` files plus the JSON index; returns the index.

    Labels that sanitize to the same name get a short label hash appended.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index: dict[str, dict[str, str]] = {}
    taken: dict[str, str] = {}
    for mask in masks:
        name = mask_filename(mask.step, mask.label)
        if taken.get(name, mask.label) != mask.label:
            name = mask_filename(mask.step, mask.label, disambiguate=True)
        taken[name] = mask.label
        bitmap_to_image(mask.bitmap).save(directory / name)
        index.setdefault(str(mask.step), {})[mask.label] = name
    (directory / MASK_INDEX_FILE).write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
    return index


class FixtureSegmenter:
    """Reads recorded masks from a directory in the ``save_masks`` layout."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        index_path = self.directory / MASK_INDEX_FILE
        try:
            self.index = json.loads(index_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise AdapterError(f"cannot read mask index {index_path}: {exc}") from exc

    def segment(self, image: Image.Image, label: str, step: int) -> np.ndarray | None:
        name = self.index.get(str(step), {}).get(label)
        if name is None:
            return None
        try:
            with Image.open(self.directory / name) as mask_image:
                return bitmap_from_image(mask_image)
        except (OSError, UnidentifiedImageError) as exc:
            raise AdapterError(f"cannot read mask {name}: {exc}") from exc


class HttpSegmenter:
    """Client for a remote open-vocabulary segmentation service.

    Request: ``{"image": <base64 PNG>, "prompt": <label>}``.
    Response: ``{"found": bool, "mask": <base64 PNG>}``.
    """

    _RETRY_MAX_ATTEMPTS = 3
    _RETRY_DELAYS = [2, 4, 8]
    _RETRYABLE_STATUS_CODES = {429, 500, 502, 503, 504}
    _NON_RETRYABLE_STATUS_CODES = {401, 403}

    def __init__(self, url: str, api_key: str = "", timeout: float = 60):
        if not url:
            raise AdapterError("No segmentation endpoint configured. Set SEGMENTER_URL.")
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def segment(self, image: Image.Image, label: str, step: int) -> np.ndarray | None:
        buffer = io.BytesIO()
        image.save(buffer, format="PNG")
        payload = {"image": base64.b64encode(buffer.getvalue()).decode("ascii"), "prompt": label}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}

        for attempt in range(self._RETRY_MAX_ATTEMPTS):
            try:
                resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
                if resp.status_code in self._NON_RETRYABLE_STATUS_CODES:
                    raise AdapterError(f"Segmentation endpoint auth error (HTTP {resp.status_code})")
                if resp.status_code in self._RETRYABLE_STATUS_CODES:
                    raise requests.HTTPError(f"HTTP {resp.status_code}", response=resp)
                resp.raise_for_status()
                data = resp.json()
                break
            except requests.RequestException as exc:
                if attempt < self._RETRY_MAX_ATTEMPTS - 1:
                    delay = self._RETRY_DELAYS[attempt]
                    logger.warning(
                        "Segmentation request failed (attempt %d/%d), retrying in %ds: %s",
                        attempt + 1, self._RETRY_MAX_ATTEMPTS, delay, exc,
                    )
                    time.sleep(delay)
                else:
                    raise AdapterError(f"Segmentation request failed: {exc}") from exc

        if not data.get("found", True) or not data.get("mask"):
            return None
        try:
            with Image.open(io.BytesIO(base64.b64decode(data["mask"]))) as mask_image:
                return bitmap_from_image(mask_image)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            raise AdapterError(f"Segmentation service returned an unreadable mask: {exc}") from exc
