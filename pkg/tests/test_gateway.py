import itertools
import json

import numpy as np
import pytest
import requests

import hmrag.gateway as gateway_mod
from hmrag.errors import (
    BackendUnavailableError,
    ConfigError,
    GatewayError,
    ScriptMismatchError,
)
from hmrag.gateway import (
    CallLog,
    ChatTurn,
    DecodingParams,
    HTTPChatBackend,
    HTTPEmbeddingBackend,
    ModelBackendConfig,
    ScriptedCaptionBackend,
    ScriptedChatBackend,
)

from conftest import make_gateway, user_turns


class FakeResponse:
    def __init__(self, payload, status_code=200, text=None):
        self._payload = payload
        self.status_code = status_code
        self.text = text if text is not None else json.dumps(payload)

    def json(self):
        if self._payload is None:
            raise ValueError("not json")
        return self._payload


def test_decoding_params_defaults_are_deterministic():
    params = DecodingParams()
    assert params.temperature == 0.0
    assert params.top_p == 1.0


@pytest.mark.parametrize("kwargs", [
    {"temperature": -0.1},
    {"top_p": 0.0},
    {"top_p": 1.5},
    {"max_tokens": 0},
])
def test_decoding_params_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        DecodingParams(**kwargs)


def test_chat_turn_requires_user_content():
    with pytest.raises(ValueError):
        ChatTurn("user", "  ")
    ChatTurn("assistant", "")  # assistant turns may be empty


def test_backend_config_validates_timeout():
    with pytest.raises(ValueError):
        ModelBackendConfig(endpoint="http://x", timeout_s=0)


def test_scripted_chat_returns_mapped_response():
    turns = user_turns("what is granite?")
    backend = ScriptedChatBackend().add(turns, "Answer: B")
    gateway = make_gateway(chat=backend)
    assert gateway.complete_chat(turns) == "Answer: B"
    assert gateway.complete_chat(turns) == "Answer: B"  # determinism
    assert backend.hits == 2


def test_scripted_chat_miss_is_hard_error():
    backend = ScriptedChatBackend().add(user_turns("a"), "x")
    gateway = make_gateway(chat=backend)
    with pytest.raises(ScriptMismatchError):
        gateway.complete_chat(user_turns("b"))


def test_empty_turn_list_rejected():
    gateway = make_gateway()
    with pytest.raises(ValueError):
        gateway.complete_chat([])


def test_hashing_embedding_is_deterministic(hashing_backend):
    gateway = make_gateway(embedding=hashing_backend)
    first = gateway.embed_text("cat")
    second = gateway.embed_text("cat")
    assert first.shape == (8,)
    np.testing.assert_array_equal(first, second)


def test_embed_rejects_empty_text(hashing_backend):
    gateway = make_gateway(embedding=hashing_backend)
    with pytest.raises(ValueError):
        gateway.embed_text("")
    with pytest.raises(ValueError):
        gateway.embed_text("   ")


def test_hashing_embedding_no_collisions_over_fixture_sample(hashing_backend):
    # 100 distinct strings must map to 100 pairwise-distinct vectors
    texts = [f"sample text number {i} about topic {i % 7}" for i in range(100)]
    vectors = [tuple(hashing_backend.embed(t)) for t in texts]
    for a, b in itertools.combinations(range(100), 2):
        assert vectors[a] != vectors[b], (texts[a], texts[b])


def test_hashing_embedding_similar_text_scores_higher(hashing_backend):
    base = hashing_backend.embed("the capital of arvania is arvapolis")
    near = hashing_backend.embed("capital of arvania")
    far = hashing_backend.embed("unrelated volcanic mineral survey")
    assert float(base @ near) > float(base @ far)


def test_embedding_dimension_constant_across_process(hashing_backend):
    gateway = make_gateway(embedding=hashing_backend)
    gateway.embed_text("first call fixes the dimension")

    class WrongDim:
        def embed(self, text):
            return np.ones(3)

    gateway._embedding = WrongDim()
    with pytest.raises(ValueError):
        gateway.embed_text("drifted")


def test_scripted_caption_and_miss():
    backend = ScriptedCaptionBackend({"img/soil.png": "a diagram of soil layers"})
    gateway = make_gateway(caption=backend)
    assert gateway.caption_image("img/soil.png") == "a diagram of soil layers"
    assert gateway.caption_image("img/soil.png") == "a diagram of soil layers"
    with pytest.raises(ScriptMismatchError):
        gateway.caption_image("img/missing.png")


def test_caption_without_backend_is_config_error():
    gateway = make_gateway()
    with pytest.raises(ConfigError):
        gateway.caption_image("img/x.png")


def test_http_chat_wire_format(monkeypatch):
    captured = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        captured.update(url=url, payload=json, headers=headers, timeout=timeout)
        return FakeResponse({"choices": [{"message": {"content": "hello"}}]})

    monkeypatch.setattr(gateway_mod.requests, "post", fake_post)
    monkeypatch.setenv("TEST_CHAT_KEY", "sk-test")
    backend = HTTPChatBackend(ModelBackendConfig(
        endpoint="http://models.local/v1/chat/completions",
        model_name="small-chat", api_key_env="TEST_CHAT_KEY", timeout_s=12.5, retries=1,
    ))
    turns = [ChatTurn("system", "be terse"), ChatTurn("user", "hi")]
    out = backend.complete(turns, DecodingParams(max_tokens=64))

    assert out == "hello"
    assert captured["payload"]["messages"] == [
        {"role": "system", "content": "be terse"},
        {"role": "user", "content": "hi"},
    ]
    assert captured["payload"]["temperature"] == 0.0
    assert captured["payload"]["top_p"] == 1.0
    assert captured["payload"]["max_tokens"] == 64
    assert captured["headers"]["Authorization"] == "Bearer sk-test"
    assert captured["timeout"] == 12.5


def test_http_chat_missing_api_key_env(monkeypatch):
    monkeypatch.delenv("MISSING_KEY", raising=False)
    backend = HTTPChatBackend(ModelBackendConfig(endpoint="http://x", api_key_env="MISSING_KEY"))
    with pytest.raises(ConfigError):
        backend.complete(user_turns("hi"), DecodingParams())


def test_http_retries_then_succeeds(monkeypatch):
    attempts = []

    def flaky_post(url, **kwargs):
        attempts.append(url)
        if len(attempts) < 3:
            raise requests.ConnectionError("down")
        return FakeResponse({"choices": [{"message": {"content": "up"}}]})

    monkeypatch.setattr(gateway_mod.requests, "post", flaky_post)
    backend = HTTPChatBackend(ModelBackendConfig(endpoint="http://x", retries=2))
    assert backend.complete(user_turns("hi"), DecodingParams()) == "up"
    assert len(attempts) == 3


def test_http_retries_exhausted(monkeypatch):
    attempts = []

    def dead_post(url, **kwargs):
        attempts.append(url)
        raise requests.ConnectionError("down")

    monkeypatch.setattr(gateway_mod.requests, "post", dead_post)
    backend = HTTPChatBackend(ModelBackendConfig(endpoint="http://x", retries=2))
    with pytest.raises(BackendUnavailableError):
        backend.complete(user_turns("hi"), DecodingParams())
    assert len(attempts) == 3


def test_http_4xx_fails_without_retry(monkeypatch):
    attempts = []

    def reject_post(url, **kwargs):
        attempts.append(url)
        return FakeResponse({"error": "bad"}, status_code=401)

    monkeypatch.setattr(gateway_mod.requests, "post", reject_post)
    backend = HTTPChatBackend(ModelBackendConfig(endpoint="http://x", retries=3))
    with pytest.raises(GatewayError):
        backend.complete(user_turns("hi"), DecodingParams())
    assert len(attempts) == 1


def test_retries_never_change_the_value(monkeypatch):
    payload = {"choices": [{"message": {"content": "stable"}}]}
    calls = {"n": 0}

    def flaky_post(url, **kwargs):
        calls["n"] += 1
        if calls["n"] % 2 == 1:
            raise requests.ConnectionError("blip")
        return FakeResponse(payload)

    monkeypatch.setattr(gateway_mod.requests, "post", flaky_post)
    backend = HTTPChatBackend(ModelBackendConfig(endpoint="http://x", retries=1))
    flaky_value = backend.complete(user_turns("hi"), DecodingParams())

    monkeypatch.setattr(gateway_mod.requests, "post", lambda url, **kw: FakeResponse(payload))
    clean_value = backend.complete(user_turns("hi"), DecodingParams())
    assert flaky_value == clean_value


def test_http_embedding_wire_format(monkeypatch):
    captured = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        captured.update(payload=json)
        return FakeResponse({"data": [{"embedding": [0.1, 0.2, 0.3]}]})

    monkeypatch.setattr(gateway_mod.requests, "post", fake_post)
    backend = HTTPEmbeddingBackend(ModelBackendConfig(endpoint="http://x", model_name="emb"))
    vector = backend.embed("hello world")
    assert captured["payload"] == {"model": "emb", "input": ["hello world"]}
    np.testing.assert_allclose(vector, [0.1, 0.2, 0.3])


def test_http_caption_encodes_local_file(monkeypatch, tmp_path):
    from hmrag.gateway import HTTPCaptionBackend

    image = tmp_path / "pic.png"
    image.write_bytes(b"\x89PNG fake bytes")
    captured = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        captured.update(payload=json)
        return FakeResponse({"choices": [{"message": {"content": "a test image"}}]})

    monkeypatch.setattr(gateway_mod.requests, "post", fake_post)
    backend = HTTPCaptionBackend(ModelBackendConfig(endpoint="http://x", model_name="vlm"))
    assert backend.caption(str(image)) == "a test image"
    content = captured["payload"]["messages"][0]["content"]
    assert content[0]["type"] == "text"
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
    assert captured["payload"]["temperature"] == 0.0


def test_http_caption_missing_file_errors_before_network(monkeypatch):
    from hmrag.gateway import HTTPCaptionBackend

    def no_post(*args, **kwargs):
        raise AssertionError("must not reach the network")

    monkeypatch.setattr(gateway_mod.requests, "post", no_post)
    backend = HTTPCaptionBackend(ModelBackendConfig(endpoint="http://x"))
    with pytest.raises(ValueError):
        backend.caption("img/definitely-missing.png")


def test_http_caption_passes_urls_through(monkeypatch):
    from hmrag.gateway import HTTPCaptionBackend

    captured = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        captured.update(payload=json)
        return FakeResponse({"choices": [{"message": {"content": "remote"}}]})

    monkeypatch.setattr(gateway_mod.requests, "post", fake_post)
    backend = HTTPCaptionBackend(ModelBackendConfig(endpoint="http://x"))
    backend.caption("https://example.org/pic.jpg")
    content = captured["payload"]["messages"][0]["content"]
    assert content[1]["image_url"]["url"] == "https://example.org/pic.jpg"


def test_call_log_records_roles(hashing_backend):
    log = CallLog()
    gateway = make_gateway(embedding=hashing_backend, call_log=log)
    gateway.complete_chat(user_turns("hi"))
    gateway.complete_chat(user_turns("hi"), role="expert_chat")
    gateway.embed_text("hello")
    records = log.take()
    assert [(r.kind, r.role) for r in records] == [
        ("chat", "chat"), ("chat", "expert_chat"), ("embedding", "embedding"),
    ]
    assert log.take() == []


def test_call_log_is_thread_safe(hashing_backend):
    import concurrent.futures

    log = CallLog()
    gateway = make_gateway(embedding=hashing_backend, call_log=log)

    def worker(i):
        for _ in range(50):
            gateway.embed_text(f"text {i}")

    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(worker, range(8)))
    assert len(log.take()) == 400


def test_scripted_chat_from_file(tmp_path):
    entries = [{"turns": [{"role": "user", "content": "ping"}], "response": "pong"}]
    path = tmp_path / "chat.json"
    path.write_text(json.dumps(entries), encoding="utf-8")
    backend = ScriptedChatBackend.from_file(path)
    gateway = make_gateway(chat=backend)
    assert gateway.complete_chat(user_turns("ping")) == "pong"
