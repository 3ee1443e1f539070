"""File-based cache for raw LLM/VLM responses, one file per request."""
import hashlib
import json
import logging
import os
import threading
from pathlib import Path

from filelock import FileLock

logger = logging.getLogger(__name__)


class CorruptCacheEntry(Exception):
    """Raised when a cache entry is not valid UTF-8 text."""

    def __init__(self, path: Path, reason: str):
        self.path = path
        super().__init__(f"unreadable cache entry {path}: {reason}")


def request_key(messages: list[dict], model: str = "") -> str:
    """Return the SHA256 hex digest identifying a chat request."""
    payload = json.dumps(
        {"model": model, "messages": messages},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """Cache layer for chat responses.

    Each entry is ``<cache_dir>/<sha256 hex>`` holding the raw response
    bytes. Reads are lock-free; writes are serialized across threads and
    processes and land atomically.
    """

    def __init__(self, cache_dir: Path):
        self.cache_dir = Path(cache_dir)
        self._thread_lock = threading.Lock()

    def path(self, key: str) -> Path:
        return self.cache_dir / key

    def get(self, key: str) -> str | None:
        """Return the cached response text or None on a miss."""
        entry = self.path(key)
        if not entry.exists():
            logger.debug("Response cache miss: %s", key[:12])
            return None
        logger.debug("Response cache hit: %s", key[:12])
        try:
            return entry.read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCacheEntry(entry, str(exc)) from exc

    def put(self, key: str, text: str) -> Path:
        """Store a response and return the entry path."""
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        entry = self.path(key)
        tmp = entry.with_name(f".{key}.tmp")
        with self._thread_lock, FileLock(str(self.cache_dir / ".lock")):
            tmp.write_bytes(text.encode("utf-8"))
            os.replace(tmp, entry)
        return entry

    def get_stats(self) -> dict:
        """Return cache statistics."""
        if not self.cache_dir.exists():
            return {"total_entries": 0, "total_bytes": 0}
        entries = [p for p in self.cache_dir.iterdir() if p.is_file() and not p.name.startswith(".")]
        return {
            "total_entries": len(entries),
            "total_bytes": sum(p.stat().st_size for p in entries),
        }
