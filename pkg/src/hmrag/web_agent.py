"""Web retrieval through a Serper-compatible search endpoint.

The live client POSTs ``{q, num, hl}`` with an X-API-KEY header and
reads the ``organic`` array (title/snippet/link/position). A file-backed
stub serves the same JSON keyed by query so tests and offline runs never
touch the network. Answers carry their source URLs as evidence.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import requests

from .decision import AnswerCandidate, unavailable_candidate
from .errors import (
    BackendUnavailableError,
    ConfigError,
    GatewayError,
    ScriptMismatchError,
    SearchParseError,
)
from .gateway import CallLog, ChatTurn, DecodingParams
from .templates import TemplateSet

logger = logging.getLogger(__name__)

DEFAULT_SEARCH_ENDPOINT = "https://google.serper.dev/search"

_EMPTY_RESULTS = "(no web evidence retrieved)"


@dataclass(frozen=True)
class SearchConfig:
    num_results: int = 5
    language: str = "en"
    type_: str = "web"

    def __post_init__(self):
        if self.num_results < 1:
            raise ValueError("num_results must be >= 1")


@dataclass(frozen=True)
class SearchResult:
    title: str
    snippet: str
    url: str
    position: int

    def __post_init__(self):
        if not self.url:
            raise ValueError("search result url must be non-empty")
        if self.position < 1:
            raise ValueError("position must be >= 1")


def parse_search_response(data: dict, cfg: SearchConfig, raw_payload: str = "") -> list[SearchResult]:
    """Shared parser for live and stub responses."""
    organic = data.get("organic")
    if not isinstance(organic, list):
        raise SearchParseError("response missing 'organic' array", raw_payload=raw_payload)
    results = []
    for i, item in enumerate(organic):
        if not isinstance(item, dict) or not item.get("link"):
            raise SearchParseError(f"organic entry {i} missing link", raw_payload=raw_payload)
        results.append(SearchResult(
            title=str(item.get("title", "")),
            snippet=str(item.get("snippet", "")),
            url=str(item["link"]),
            position=int(item.get("position", i + 1)),
        ))
    positions = [r.position for r in results]
    if len(set(positions)) != len(positions):
        raise ValueError(f"duplicate result positions in response: {sorted(positions)}")
    results.sort(key=lambda r: r.position)
    return results[: cfg.num_results]


class SerperSearchClient:
    def __init__(self, endpoint: str = DEFAULT_SEARCH_ENDPOINT, api_key_env: str = "SERPER_API_KEY",
                 timeout_s: float = 30.0, retries: int = 2, call_log: CallLog | None = None):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.retries = retries
        self._call_log = call_log

    def search(self, query: str, cfg: SearchConfig) -> list[SearchResult]:
        if not query or not query.strip():
            raise ValueError("query must be non-empty")
        key = os.environ.get(self.api_key_env) if self.api_key_env else None
        if self.api_key_env and not key:
            raise ConfigError(f"environment variable {self.api_key_env!r} is not set")
        payload = {"q": query, "num": cfg.num_results, "hl": cfg.language}
        if cfg.type_ != "web":
            payload["type"] = cfg.type_
        headers = {"Content-Type": "application/json"}
        if key:
            headers["X-API-KEY"] = key
        if self._call_log is not None:
            self._call_log.record("search", "web", query)
        last_error = None
        for _ in range(self.retries + 1):
            try:
                response = requests.post(self.endpoint, json=payload, headers=headers,
                                         timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = GatewayError(f"search server error {response.status_code}")
                continue
            if response.status_code >= 400:
                raise GatewayError(f"search rejected with status {response.status_code}")
            try:
                data = response.json()
            except ValueError as exc:
                raise SearchParseError(f"search response is not JSON: {exc}",
                                       raw_payload=response.text) from exc
            return parse_search_response(data, cfg, raw_payload=response.text)
        raise BackendUnavailableError(
            f"search endpoint unreachable after {self.retries + 1} attempts: {last_error}"
        )


class StubSearchClient:
    """Serves canned Serper-format JSON keyed by the exact query string."""

    def __init__(self, fixture: dict[str, dict], call_log: CallLog | None = None):
        self._fixture = dict(fixture)
        self._call_log = call_log

    @classmethod
    def from_file(cls, path, call_log: CallLog | None = None) -> "StubSearchClient":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), call_log=call_log)

    def search(self, query: str, cfg: SearchConfig) -> list[SearchResult]:
        if not query or not query.strip():
            raise ValueError("query must be non-empty")
        if self._call_log is not None:
            self._call_log.record("search", "web", query)
        try:
            data = self._fixture[query]
        except KeyError:
            raise ScriptMismatchError(f"no stub search fixture for query {query[:80]!r}") from None
        return parse_search_response(data, cfg, raw_payload=json.dumps(data))


def format_results(results) -> list[str]:
    return [f"[{r.position}] {r.title} — {r.snippet} ({r.url})" for r in results]


class WebAgent:
    def __init__(self, gateway, client, cfg: SearchConfig | None = None,
                 templates: TemplateSet | None = None):
        self._gateway = gateway
        self._client = client
        self._cfg = cfg or SearchConfig()
        self._templates = templates or TemplateSet()

    def search(self, query: str) -> list[SearchResult]:
        return self._client.search(query, self._cfg)

    def answer(self, query: str, results) -> AnswerCandidate:
        lines = format_results(results)
        results_text = "\n".join(lines) if lines else _EMPTY_RESULTS
        prompt = self._templates.render("web_answer", question=query, results=results_text)
        try:
            text = self._gateway.complete_chat([ChatTurn("user", prompt)], DecodingParams())
        except GatewayError as exc:
            logger.warning("web answer generation failed: %s", exc)
            return unavailable_candidate("web")
        return AnswerCandidate(text=text, source="web", evidence=tuple(r.url for r in results))

    def run(self, query: str, warnings: list[str] | None = None) -> AnswerCandidate:
        try:
            results = self.search(query)
        except SearchParseError as exc:
            message = f"web search response unparseable: {exc}; raw payload: {exc.raw_payload[:500]}"
            logger.warning(message)
            if warnings is not None:
                warnings.append(message)
            return unavailable_candidate("web")
        except GatewayError as exc:
            logger.warning("web search failed: %s", exc)
            if warnings is not None:
                warnings.append(f"web search failed: {exc}")
            return unavailable_candidate("web")
        return self.answer(query, results)
