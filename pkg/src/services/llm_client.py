"""Chat clients for the planner and the judge: HTTP, fixture replay and scripted."""
import logging
import threading
import time
from pathlib import Path
from typing import Protocol

import requests

from src.services.response_cache import ResponseCache, request_key

logger = logging.getLogger(__name__)


class ClientError(Exception):
    """Raised when a chat request fails (transport, auth or missing fixture)."""


class ChatClient(Protocol):
    """Messages in, text out."""

    model: str

    def complete(self, messages: list[dict]) -> str: ...


class HttpChatClient:
    """OpenAI-compatible ``/chat/completions`` client.

    Safe for concurrent use; ``max_concurrent`` bounds in-flight requests.
    """

    _RETRY_MAX_ATTEMPTS = 3
    _RETRY_DELAYS = [2, 4, 8]  # Exponential backoff in seconds
    _RETRYABLE_STATUS_CODES = {429, 500, 502, 503, 504}
    _NON_RETRYABLE_STATUS_CODES = {401, 403}

    def __init__(
        self,
        base_url: str,
        api_key: str,
        model: str,
        *,
        timeout: float = 120,
        max_tokens: int = 2048,
        temperature: float = 0.0,
        max_concurrent: int = 4,
    ):
        if not api_key:
            raise ClientError("No API key configured. Set LLM_API_KEY in the environment.")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.max_tokens = max_tokens
        self.temperature = temperature
        self._semaphore = threading.Semaphore(max_concurrent)

    def complete(self, messages: list[dict]) -> str:
        payload = {
            "model": self.model,
            "messages": messages,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        url = f"{self.base_url}/chat/completions"

        for attempt in range(self._RETRY_MAX_ATTEMPTS):
            try:
                with self._semaphore:
                    resp = requests.post(url, json=payload, headers=headers, timeout=self.timeout)
                if resp.status_code in self._NON_RETRYABLE_STATUS_CODES:
                    raise ClientError(f"Chat endpoint auth error (HTTP {resp.status_code})")
                if resp.status_code in self._RETRYABLE_STATUS_CODES:
                    raise requests.HTTPError(f"HTTP {resp.status_code}", response=resp)
                resp.raise_for_status()
                data = resp.json()
                break
            except requests.RequestException as exc:
                if attempt < self._RETRY_MAX_ATTEMPTS - 1:
                    delay = self._RETRY_DELAYS[attempt]
                    logger.warning(
                        "Chat request failed (attempt %d/%d), retrying in %ds: %s",
                        attempt + 1, self._RETRY_MAX_ATTEMPTS, delay, exc,
                    )
                    time.sleep(delay)
                else:
                    raise ClientError(
                        f"Chat request failed after {self._RETRY_MAX_ATTEMPTS} attempts: {exc}"
                    ) from exc

        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ClientError(f"Unexpected chat response shape: {str(data)[:200]}") from exc


class FixtureChatClient:
    """Replays recorded responses stored in the response-cache layout.

    A fixture directory is just a warm cache: ``<dir>/<request hash>``.
    """

    def __init__(self, fixture_dir: Path, model: str = ""):
        self.model = model
        self._store = ResponseCache(Path(fixture_dir))

    def complete(self, messages: list[dict]) -> str:
        key = request_key(messages, self.model)
        text = self._store.get(key)
        if text is None:
            raise ClientError(f"No recorded response for request {key} in {self._store.cache_dir}")
        return text

    def record(self, messages: list[dict], text: str) -> Path:
        return self._store.put(request_key(messages, self.model), text)


class ScriptedChatClient:
    """Returns canned responses in order, repeating the last one; ``calls`` keeps the received messages."""

    def __init__(self, responses: list[str], model: str = "scripted"):
        self.model = model
        self._responses = list(responses)
        self._lock = threading.Lock()
        self.calls: list[list[dict]] = []

    def complete(self, messages: list[dict]) -> str:
        with self._lock:
            self.calls.append(messages)
            if not self._responses:
                raise ClientError("Scripted client exhausted")
            if len(self._responses) == 1:
                return self._responses[0]
            return self._responses.pop(0)


def cached_complete(client: ChatClient, cache: ResponseCache | None, messages: list[dict]) -> tuple[str, Path | None]:
    """Complete through the cache; returns (text, cache entry path)."""
    if cache is None:
        return client.complete(messages), None
    key = request_key(messages, getattr(client, "model", ""))
    cached = cache.get(key)
    if cached is not None:
        return cached, cache.path(key)
    text = client.complete(messages)
    return text, cache.put(key, text)
