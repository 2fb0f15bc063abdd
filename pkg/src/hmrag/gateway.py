"""Uniform access to chat, embedding, and caption models.

Backends are pluggable: HTTP clients speaking the common chat-completions
and embeddings JSON wire formats, plus deterministic scripted doubles for
tests and offline runs. Decoding defaults enforce temperature 0 / top_p 1
so every call is reproducible given the same backend state.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .errors import (
    BackendUnavailableError,
    ConfigError,
    GatewayError,
    ScriptMismatchError,
)

logger = logging.getLogger(__name__)

CHAT_ROLES = ("chat", "lightweight_chat", "expert_chat")
_TURN_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class DecodingParams:
    """Decoding constraints; the defaults pin deterministic generation."""

    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 1024

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in _TURN_ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")
        if self.role == "user" and not self.content.strip():
            raise ValueError("user turns must have non-empty content")


@dataclass(frozen=True)
class ModelBackendConfig:
    endpoint: str
    model_name: str = ""
    api_key_env: str = ""
    timeout_s: float = 30.0
    retries: int = 2

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


@dataclass(frozen=True)
class CallRecord:
    """One backend call, as surfaced in query traces."""

    kind: str  # chat | embedding | caption | search
    role: str
    detail: str


class CallLog:
    """Thread-safe sink collecting every backend call for the trace."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[CallRecord] = []

    def record(self, kind: str, role: str, detail: str) -> None:
        with self._lock:
            self._records.append(CallRecord(kind, role, detail[:120]))

    def take(self) -> list[CallRecord]:
        """Drain and return all records collected so far."""
        with self._lock:
            records = self._records
            self._records = []
        return records


def canonical_turn_key(turns) -> str:
    """Stable hash of a turn list, used to key scripted responses."""
    payload = [{"role": t.role, "content": t.content} for t in turns]
    blob = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ScriptedChatBackend:
    """Exact-match chat double keyed on the canonical hash of the turns.

    An unmatched turn list raises ScriptMismatchError: tests must fail
    loudly rather than silently receive a fallback answer. Install all
    entries before first use; the mapping is treated as immutable after.
    """

    def __init__(self):
        self._responses: dict[str, str] = {}
        self._lock = threading.Lock()
        self.hits = 0

    def add(self, turns, response: str) -> "ScriptedChatBackend":
        self._responses[canonical_turn_key(turns)] = response
        return self

    @classmethod
    def from_file(cls, path) -> "ScriptedChatBackend":
        backend = cls()
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        for entry in entries:
            turns = [ChatTurn(t["role"], t["content"]) for t in entry["turns"]]
            backend.add(turns, entry["response"])
        return backend

    def __len__(self):
        return len(self._responses)

    def complete(self, turns, params: DecodingParams) -> str:
        key = canonical_turn_key(turns)
        try:
            response = self._responses[key]
        except KeyError:
            preview = " / ".join(f"{t.role}: {t.content[:80]}" for t in turns)
            raise ScriptMismatchError(
                f"no scripted response for turns [{preview}] (hash {key[:12]})"
            ) from None
        with self._lock:
            self.hits += 1
        return response


class HashingEmbeddingBackend:
    """Deterministic embedding double.

    The vector is the normalized sum of per-token pseudo-random unit
    vectors seeded from a content hash, so identical text maps to an
    identical vector and texts sharing tokens land near each other.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x1f{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def embed(self, text: str) -> np.ndarray:
        tokens = text.casefold().split()
        if not tokens:
            raise ValueError("cannot embed blank text")
        acc = np.zeros(self.dim, dtype=np.float64)
        for token in tokens:
            acc += self._token_vector(token)
        norm = np.linalg.norm(acc)
        if norm == 0.0:  # astronomically unlikely; keep the unit-norm contract
            return self._token_vector(" ".join(tokens))
        return acc / norm


class ScriptedCaptionBackend:
    """Caption double backed by an image_ref -> caption mapping."""

    def __init__(self, mapping: dict[str, str]):
        self._mapping = dict(mapping)

    @classmethod
    def from_file(cls, path) -> "ScriptedCaptionBackend":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def caption(self, image_ref: str) -> str:
        try:
            return self._mapping[image_ref]
        except KeyError:
            raise ScriptMismatchError(f"no scripted caption for {image_ref!r}") from None


def _auth_headers(config: ModelBackendConfig) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    if config.api_key_env:
        key = os.environ.get(config.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {config.api_key_env!r} is not set")
        headers["Authorization"] = f"Bearer {key}"
    return headers


def post_json_with_retries(url: str, payload: dict, headers: dict, timeout_s: float, retries: int) -> dict:
    """POST JSON, retrying connection failures and 5xx up to `retries` times."""
    last_error: Exception | None = None
    for _ in range(retries + 1):
        try:
            response = requests.post(url, json=payload, headers=headers, timeout=timeout_s)
        except requests.RequestException as exc:
            last_error = exc
            continue
        if response.status_code >= 500:
            last_error = GatewayError(f"server error {response.status_code} from {url}")
            continue
        if response.status_code >= 400:
            raise GatewayError(
                f"request rejected with status {response.status_code}: {response.text[:200]}"
            )
        try:
            return response.json()
        except ValueError as exc:
            raise GatewayError(f"malformed JSON from {url}: {exc}") from exc
    raise BackendUnavailableError(
        f"backend at {url} unreachable after {retries + 1} attempts: {last_error}"
    )


class HTTPChatBackend:
    """Chat-completions client; works against any compatible server."""

    def __init__(self, config: ModelBackendConfig):
        if not config.endpoint:
            raise ConfigError("chat backend needs an endpoint")
        self.config = config

    def complete(self, turns, params: DecodingParams) -> str:
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": t.role, "content": t.content} for t in turns],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        }
        data = post_json_with_retries(
            self.config.endpoint, payload, _auth_headers(self.config),
            self.config.timeout_s, self.config.retries,
        )
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"unexpected chat response shape: {exc}") from exc


class HTTPEmbeddingBackend:
    """Embeddings client speaking the input/embedding JSON wire format."""

    def __init__(self, config: ModelBackendConfig):
        if not config.endpoint:
            raise ConfigError("embedding backend needs an endpoint")
        self.config = config

    def embed(self, text: str) -> np.ndarray:
        payload = {"model": self.config.model_name, "input": [text]}
        data = post_json_with_retries(
            self.config.endpoint, payload, _auth_headers(self.config),
            self.config.timeout_s, self.config.retries,
        )
        try:
            vector = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"unexpected embedding response shape: {exc}") from exc
        return np.asarray(vector, dtype=np.float64)


_CAPTION_INSTRUCTION = "Describe this image in one or two sentences."


class HTTPCaptionBackend:
    """Caption client: a vision-style chat-completions call per image."""

    def __init__(self, config: ModelBackendConfig):
        if not config.endpoint:
            raise ConfigError("caption backend needs an endpoint")
        self.config = config

    def _resolve_image(self, image_ref: str) -> str:
        if image_ref.startswith(("http://", "https://", "data:")):
            return image_ref
        path = Path(image_ref)
        if not path.is_file():
            raise ValueError(f"image_ref does not resolve to a file: {image_ref!r}")
        mime = mimetypes.guess_type(path.name)[0] or "image/png"
        encoded = base64.b64encode(path.read_bytes()).decode("ascii")
        return f"data:{mime};base64,{encoded}"

    def caption(self, image_ref: str) -> str:
        content = [
            {"type": "text", "text": _CAPTION_INSTRUCTION},
            {"type": "image_url", "image_url": {"url": self._resolve_image(image_ref)}},
        ]
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0.0,
            "top_p": 1.0,
            "max_tokens": 256,
        }
        data = post_json_with_retries(
            self.config.endpoint, payload, _auth_headers(self.config),
            self.config.timeout_s, self.config.retries,
        )
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"unexpected caption response shape: {exc}") from exc


class ModelGateway:
    """Routes chat/embedding/caption calls to role-configured backends.

    Roles `lightweight_chat` and `expert_chat` fall back to the main chat
    backend when not configured separately. Safe for concurrent use: all
    backends are immutable after construction.
    """

    def __init__(self, chat, embedding=None, caption=None,
                 lightweight_chat=None, expert_chat=None, call_log: CallLog | None = None):
        if chat is None:
            raise ConfigError("a chat backend is required")
        self._chat_backends = {
            "chat": chat,
            "lightweight_chat": lightweight_chat or chat,
            "expert_chat": expert_chat or chat,
        }
        self._embedding = embedding
        self._caption = caption
        self._call_log = call_log
        self._dim_lock = threading.Lock()
        self._dim: int | None = None

    def _record(self, kind: str, role: str, detail: str) -> None:
        if self._call_log is not None:
            self._call_log.record(kind, role, detail)

    def complete_chat(self, turns, params: DecodingParams | None = None, role: str = "chat") -> str:
        if not turns:
            raise ValueError("turn list must be non-empty")
        if role not in self._chat_backends:
            raise ConfigError(f"unknown chat role {role!r}")
        params = params or DecodingParams()
        self._record("chat", role, turns[-1].content)
        return self._chat_backends[role].complete(list(turns), params)

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        if self._embedding is None:
            raise ConfigError("no embedding backend configured")
        self._record("embedding", "embedding", text)
        vector = np.asarray(self._embedding.embed(text), dtype=np.float64)
        with self._dim_lock:
            if self._dim is None:
                self._dim = vector.shape[0]
            elif vector.shape[0] != self._dim:
                raise ValueError(
                    f"embedding dimension drifted: got {vector.shape[0]}, expected {self._dim}"
                )
        return vector

    def caption_image(self, image_ref: str) -> str:
        if not image_ref:
            raise ValueError("image_ref must be non-empty")
        if self._caption is None:
            raise ConfigError("no caption backend configured")
        self._record("caption", "caption", image_ref)
        return self._caption.caption(image_ref)
