"""Tests for the chat clients and the response cache."""
import pytest
import requests

from src.services.llm_client import (
    ClientError,
    FixtureChatClient,
    HttpChatClient,
    ScriptedChatClient,
    cached_complete,
)
from src.services.response_cache import CorruptCacheEntry, ResponseCache, request_key

MESSAGES = [{"role": "user", "content": "Plan boiling pasta in 3 steps."}]


class FakeResponse:
    def __init__(self, status_code, payload=None):
        self.status_code = status_code
        self._payload = payload if payload is not None else {}

    def json(self):
        return self._payload

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"HTTP {self.status_code}", response=self)


def _ok(text):
    return FakeResponse(200, {"choices": [{"message": {"content": text}}]})


@pytest.fixture
def no_sleep(monkeypatch):
    monkeypatch.setattr("src.services.llm_client.time.sleep", lambda s: None)


def test_http_client_posts_chat_request(monkeypatch):
    sent = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        sent.update(url=url, payload=json, headers=headers)
        return _ok("a plan")

    monkeypatch.setattr(requests, "post", fake_post)
    client = HttpChatClient("http://llm.local/v1/", "secret", "planner-model")
    assert client.complete(MESSAGES) == "a plan"
    assert sent["url"] == "http://llm.local/v1/chat/completions"
    assert sent["payload"]["model"] == "planner-model"
    assert sent["payload"]["messages"] == MESSAGES
    assert sent["payload"]["temperature"] == 0.0
    assert sent["headers"] == {"Authorization": "Bearer secret"}


def test_http_client_retries_transient_errors(monkeypatch, no_sleep):
    responses = [FakeResponse(503), FakeResponse(429), _ok("finally")]
    monkeypatch.setattr(requests, "post", lambda *a, **k: responses.pop(0))
    assert HttpChatClient("http://llm.local", "k", "m").complete(MESSAGES) == "finally"
    assert responses == []


def test_http_client_gives_up_after_three_attempts(monkeypatch, no_sleep):
    calls = []

    def fake_post(*args, **kwargs):
        calls.append(1)
        raise requests.ConnectionError("refused")

    monkeypatch.setattr(requests, "post", fake_post)
    with pytest.raises(ClientError, match="after 3 attempts"):
        HttpChatClient("http://llm.local", "k", "m").complete(MESSAGES)
    assert len(calls) == 3


def test_auth_errors_are_not_retried(monkeypatch, no_sleep):
    calls = []

    def fake_post(*args, **kwargs):
        calls.append(1)
        return FakeResponse(401)

    monkeypatch.setattr(requests, "post", fake_post)
    with pytest.raises(ClientError, match="auth"):
        HttpChatClient("http://llm.local", "k", "m").complete(MESSAGES)
    assert len(calls) == 1


def test_unexpected_response_shape(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda *a, **k: FakeResponse(200, {"error": "nope"}))
    with pytest.raises(ClientError, match="Unexpected"):
        HttpChatClient("http://llm.local", "k", "m").complete(MESSAGES)


def test_missing_api_key():
    with pytest.raises(ClientError, match="LLM_API_KEY"):
        HttpChatClient("http://llm.local", "", "m")


def test_fixture_client_replays_recordings(tmp_path):
    client = FixtureChatClient(tmp_path, model="m")
    with pytest.raises(ClientError):
        client.complete(MESSAGES)
    client.record(MESSAGES, "recorded plan")
    assert FixtureChatClient(tmp_path, model="m").complete(MESSAGES) == "recorded plan"
    with pytest.raises(ClientError):
        FixtureChatClient(tmp_path, model="other").complete(MESSAGES)


def test_scripted_client_repeats_last_response():
    client = ScriptedChatClient(["one", "two"])
    assert [client.complete(MESSAGES) for _ in range(3)] == ["one", "two", "two"]
    assert len(client.calls) == 3
    with pytest.raises(ClientError):
        ScriptedChatClient([]).complete(MESSAGES)


def test_cached_complete(tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    client = ScriptedChatClient(["fresh"], model="m")
    assert cached_complete(client, None, MESSAGES) == ("fresh", None)

    text, entry = cached_complete(client, cache, MESSAGES)
    assert text == "fresh"
    assert entry == tmp_path / "cache" / request_key(MESSAGES, "m")
    assert cached_complete(client, cache, MESSAGES) == ("fresh", entry)
    assert len(client.calls) == 2
    assert cache.get_stats() == {"total_entries": 1, "total_bytes": len(b"fresh")}


def test_request_key_depends_on_model_and_messages():
    assert request_key(MESSAGES, "a") == request_key(list(MESSAGES), "a")
    assert request_key(MESSAGES, "a") != request_key(MESSAGES, "b")
    assert len(request_key(MESSAGES)) == 64


def test_cache_rejects_undecodable_entry(tmp_path):
    cache = ResponseCache(tmp_path)
    key = request_key(MESSAGES)
    entry = cache.put(key, "plan text")
    entry.write_bytes(b"\xff" + entry.read_bytes()[1:])
    with pytest.raises(CorruptCacheEntry) as excinfo:
        cache.get(key)
    assert excinfo.value.path == entry
