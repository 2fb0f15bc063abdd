"""Fine-grained retrieval: cosine ranking over the embedding index.

Search is exact and exhaustive; at the corpus sizes this engine targets
that is cheaper than approximate structures and trivially testable.
Ties are broken by ascending chunk_id so rankings are reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .decision import AnswerCandidate, unavailable_candidate
from .errors import GatewayError
from .gateway import ChatTurn, DecodingParams
from .ingest import EmbeddingIndex, IndexRecord
from .kernels import cosine_scores
from .templates import TemplateSet

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 5


@dataclass(frozen=True)
class ScoredChunk:
    chunk: IndexRecord
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    top: tuple[ScoredChunk, ...]
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        scores = [s.score for s in self.top]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("top list must be sorted by non-increasing score")


def score_all(query_vec: np.ndarray, index: EmbeddingIndex) -> list[ScoredChunk]:
    """One cosine score per index record, in index order."""
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.shape != (index.dim,):
        raise ValueError(f"query vector has shape {query_vec.shape}, index dim is {index.dim}")
    if np.linalg.norm(query_vec) == 0.0:
        raise ValueError("query vector must be non-zero")
    scores = cosine_scores(query_vec, index.matrix)
    zero_rows = int(np.sum(np.linalg.norm(index.matrix, axis=1) == 0.0))
    if zero_rows:
        logger.warning("%d zero-norm index records scored 0", zero_rows)
    return [ScoredChunk(index.record(i), float(scores[i])) for i in range(len(index))]


def top_k_by_vector(query: str, query_vec: np.ndarray, index: EmbeddingIndex, k: int) -> RetrievalResult:
    """Select the k best records, ties broken by ascending chunk_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("cannot retrieve from an empty index")
    scored = score_all(query_vec, index)
    scores = np.array([s.score for s in scored], dtype=np.float64)
    id_rank = np.empty(len(index), dtype=np.int64)
    id_rank[np.argsort(np.array(index.chunk_ids, dtype=object), kind="stable")] = np.arange(len(index))
    order = np.lexsort((id_rank, -scores))
    top = tuple(scored[i] for i in order[: min(k, len(index))])
    return RetrievalResult(query=query, top=top, k=k)


def build_prompt(query: str, chunk_texts, header: str) -> str:
    """Assemble the generation prompt: question, context header, ranked chunks.

    Every section is announced with its exact character length, so the
    prompt parses back unambiguously: distinct (query, chunk list)
    inputs can never collide.
    """
    parts = [f"Question ({len(query)} chars):", query, ""]
    parts.append(header.rstrip("\n"))
    parts.append("")
    parts.append(f"Context chunks: {len(chunk_texts)}")
    for i, text in enumerate(chunk_texts, 1):
        parts.append(f"[chunk {i}/{len(chunk_texts)} | {len(text)} chars]")
        parts.append(text)
    return "\n".join(parts)


class VectorAgent:
    """Read-only over an immutable index; safe for concurrent queries."""

    def __init__(self, gateway, index: EmbeddingIndex, top_k: int = DEFAULT_TOP_K,
                 templates: TemplateSet | None = None):
        self._gateway = gateway
        self._index = index
        self._top_k = top_k
        self._templates = templates or TemplateSet()

    def retrieve_top_k(self, query: str, k: int | None = None) -> RetrievalResult:
        query_vec = self._gateway.embed_text(query)
        return top_k_by_vector(query, query_vec, self._index, k or self._top_k)

    def answer(self, query: str, result: RetrievalResult) -> AnswerCandidate:
        if not result.top:
            raise ValueError("retrieval result has no chunks")
        chunk_texts = [s.chunk.text for s in result.top]
        prompt = build_prompt(query, chunk_texts, self._templates.text("vector_header"))
        try:
            text = self._gateway.complete_chat([ChatTurn("user", prompt)], DecodingParams())
        except GatewayError as exc:
            logger.warning("vector answer generation failed: %s", exc)
            return unavailable_candidate("vector")
        return AnswerCandidate(text=text, source="vector", evidence=tuple(chunk_texts))

    def run(self, query: str) -> AnswerCandidate:
        try:
            result = self.retrieve_top_k(query)
        except GatewayError as exc:
            logger.warning("vector retrieval failed: %s", exc)
            return unavailable_candidate("vector")
        return self.answer(query, result)
