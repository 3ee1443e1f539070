"""Application configuration."""
import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

# Paths
BASE_DIR = Path(__file__).parent
DATA_DIR = Path(os.getenv("DATA_DIR", str(BASE_DIR / "data")))
CACHE_DIR = DATA_DIR / "cache"
OUTPUT_DIR = Path(os.getenv("OUTPUT_DIR", str(BASE_DIR / "out")))

# LLM planner (any OpenAI-compatible chat completions endpoint)
LLM_BASE_URL = os.getenv("LLM_BASE_URL", "https://api.openai.com/v1")
LLM_API_KEY = os.getenv("LLM_API_KEY", "")
LLM_MODEL = os.getenv("LLM_MODEL", "gpt-4")

# VLM judge (same endpoint family, vision-capable model)
JUDGE_BASE_URL = os.getenv("JUDGE_BASE_URL", LLM_BASE_URL)
JUDGE_MODEL = os.getenv("JUDGE_MODEL", "gpt-4-vision-preview")

# Open-vocabulary segmentation service (e.g. a Grounded-SAM server)
SEGMENTER_URL = os.getenv("SEGMENTER_URL", "")
SEGMENTER_API_KEY = os.getenv("SEGMENTER_API_KEY", "")

# Concurrency limit for remote calls (planner, judge, segmenter)
MAX_CONCURRENT_REQUESTS = int(os.getenv("MAX_CONCURRENT_REQUESTS", "4"))

# Generation defaults
TOTAL_STEPS = 20
SHARED_STEPS = 15
GUIDANCE_SCALE = 4.0
IMAGE_SIZE = (64, 64)    # (height, width) of decoded toy images
LATENT_SIZE = (8, 8)     # (height, width) of the attention grid
LATENT_CHANNELS = 4
MAX_PROMPT_TOKENS = 77

# Dataset generation
DATASET_CATEGORIES = ("cooking", "gardening", "decorating")
DATASET_SIZE = 200
DATASET_MIN_STEPS = 3
DATASET_MAX_STEPS = 5

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
