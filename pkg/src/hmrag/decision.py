"""Arbitration of the retrieval agents' answers.

Each available answer is summarized, pairwise agreement is scored with
an LCS-overlap metric and a clipped n-gram precision metric, and the
fused mean decides the route: agreeing answers are merged by the
lightweight model, conflicting ones go to the expert model with full
evidence attached.

Metric conventions, fixed for reproducibility:
  - tokenization case-folds and splits on whitespace and punctuation;
  - LCS overlap normalizes by the longer sequence;
  - n-gram precision uses n up to min(max_n, len(candidate)) with the
    configured weights as given, collapses to 0 when any used precision
    is 0 (no smoothing), and applies a min(1, len(ref)/len(cand)) factor
    that penalizes long candidates;
  - pairwise fusion symmetrizes the directional n-gram metric so voting
    is order-independent.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, replace
from statistics import mean

import numpy as np

from .errors import GatewayError, PipelineError
from .gateway import ChatTurn, DecodingParams
from .kernels import lcs_length
from .templates import TemplateSet

logger = logging.getLogger(__name__)

SOURCES = ("vector", "graph", "web")
ROUTE_LIGHTWEIGHT = "lightweight"
ROUTE_EXPERT = "expert"

_WORD = re.compile(r"\w+")


@dataclass(frozen=True)
class AnswerCandidate:
    text: str
    source: str
    evidence: tuple[str, ...] = ()
    summary: str | None = None
    available: bool = True

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown candidate source {self.source!r}")


def unavailable_candidate(source: str) -> AnswerCandidate:
    return AnswerCandidate(text="", source=source, evidence=(), summary=None, available=False)


@dataclass(frozen=True)
class ConsensusReport:
    pair_scores: dict[str, dict[str, float]]
    mean_fused: float
    threshold: float
    consensus: bool
    route: str

    def __post_init__(self):
        for pair, scores in self.pair_scores.items():
            for metric, value in scores.items():
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"{pair} {metric} score {value} outside [0, 1]")
        if not 0.0 <= self.mean_fused <= 1.0:
            raise ValueError(f"mean_fused {self.mean_fused} outside [0, 1]")
        if self.consensus != (self.mean_fused >= self.threshold):
            raise ValueError("consensus flag inconsistent with mean_fused vs threshold")
        expected_route = ROUTE_LIGHTWEIGHT if self.consensus else ROUTE_EXPERT
        if self.route != expected_route:
            raise ValueError(f"route {self.route!r} inconsistent with consensus={self.consensus}")

    def to_dict(self) -> dict:
        return {
            "pair_scores": {k: dict(v) for k, v in sorted(self.pair_scores.items())},
            "mean_fused": self.mean_fused,
            "threshold": self.threshold,
            "consensus": self.consensus,
            "route": self.route,
        }


def tokenize(text: str) -> list[str]:
    """Case-fold and split on whitespace and punctuation."""
    return _WORD.findall(text.casefold())


def rouge_l(a, b) -> float:
    """LCS(a, b) / max(|a|, |b|); empty input scores 0 rather than raising."""
    a, b = list(a), list(b)
    if not a or not b:
        logger.warning("rouge_l over an empty token sequence scores 0")
        return 0.0
    vocab: dict[str, int] = {}
    ids_a = np.array([vocab.setdefault(t, len(vocab)) for t in a], dtype=np.int64)
    ids_b = np.array([vocab.setdefault(t, len(vocab)) for t in b], dtype=np.int64)
    return lcs_length(ids_a, ids_b) / max(len(a), len(b))


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4, weights: list[float] | None = None) -> float:
    """Weighted n-gram precision of `candidate` against `reference`.

    n runs from 1 to min(max_n, len(candidate)); the weights are applied
    as configured without renormalization over the used range.
    """
    candidate, reference = list(candidate), list(reference)
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    weights = list(weights) if weights is not None else [1.0 / max_n] * max_n
    if len(weights) != max_n:
        raise ValueError(f"need {max_n} weights, got {len(weights)}")
    if not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
        raise ValueError("weights must sum to 1")
    if not candidate:
        logger.warning("bleu over an empty candidate scores 0")
        return 0.0
    if not reference:
        return 0.0
    log_sum = 0.0
    for n in range(1, min(max_n, len(candidate)) + 1):
        counts = _ngram_counts(candidate, n)
        clipped = counts & _ngram_counts(reference, n)
        precision = sum(clipped.values()) / sum(counts.values())
        if precision == 0.0:
            return 0.0
        log_sum += weights[n - 1] * math.log(precision)
    brevity = min(1.0, len(reference) / len(candidate))
    return math.exp(log_sum) * brevity


def fused_similarity(a: AnswerCandidate, b: AnswerCandidate, fusion_lambda: float,
                     max_n: int = 4) -> float:
    """lambda-weighted blend of LCS overlap and symmetrized n-gram precision."""
    if not 0 <= fusion_lambda <= 1:
        raise ValueError("fusion_lambda must be in [0, 1]")
    if a.summary is None or b.summary is None:
        raise ValueError("both candidates need summaries before scoring")
    tokens_a, tokens_b = tokenize(a.summary), tokenize(b.summary)
    rouge = rouge_l(tokens_a, tokens_b)
    sym_bleu = (bleu(tokens_a, tokens_b, max_n) + bleu(tokens_b, tokens_a, max_n)) / 2
    return fusion_lambda * rouge + (1 - fusion_lambda) * sym_bleu


def format_answers(candidates, with_evidence: bool = False) -> str:
    blocks = []
    for candidate in candidates:
        lines = [f"[{candidate.source}] {candidate.text}"]
        if with_evidence:
            lines.extend(f"  evidence: {item}" for item in candidate.evidence)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def _pair_key(source_a: str, source_b: str) -> str:
    return "|".join(sorted((source_a, source_b)))


class DecisionAgent:
    def __init__(self, gateway, templates: TemplateSet | None = None,
                 fusion_lambda: float = 0.5, consensus_threshold: float = 0.5,
                 bleu_max_n: int = 4, summary_token_budget: int = 64):
        self._gateway = gateway
        self._templates = templates or TemplateSet()
        self.fusion_lambda = fusion_lambda
        self.consensus_threshold = consensus_threshold
        self.bleu_max_n = bleu_max_n
        self.summary_token_budget = summary_token_budget

    def summarize(self, candidate: AnswerCandidate) -> AnswerCandidate:
        """Attach a short model-written summary; unavailable candidates pass through."""
        if not candidate.available:
            return candidate
        prompt = self._templates.render(
            "summarize", text=candidate.text, budget=self.summary_token_budget
        )
        try:
            summary = self._gateway.complete_chat(
                [ChatTurn("user", prompt)],
                DecodingParams(max_tokens=self.summary_token_budget),
                role="lightweight_chat",
            )
        except GatewayError as exc:
            logger.warning("summarizer failed for %s candidate: %s", candidate.source, exc)
            return replace(candidate, available=False)
        return replace(candidate, summary=summary)

    def _refine(self, query: str, candidates, route: str) -> str:
        if route == ROUTE_LIGHTWEIGHT:
            prompt = self._templates.render(
                "refine_lightweight", question=query, answers=format_answers(candidates)
            )
            role = "lightweight_chat"
        else:
            prompt = self._templates.render(
                "refine_expert", question=query,
                answers=format_answers(candidates, with_evidence=True),
            )
            role = "expert_chat"
        return self._gateway.complete_chat([ChatTurn("user", prompt)], DecodingParams(), role=role)

    def decide(self, query: str, candidates) -> tuple[str, ConsensusReport, list[AnswerCandidate]]:
        """Vote over the available candidates and produce the final text.

        Returns the final answer, the consensus report, and the candidate
        list as it stood at voting time (summaries attached, failures
        marked unavailable).
        """
        worked = list(candidates)
        if not any(c.available for c in worked):
            raise PipelineError("no available answer candidates to decide over")

        if sum(c.available for c in worked) >= 2:
            worked = [
                self.summarize(c) if c.available and c.summary is None else c
                for c in worked
            ]
        available = [c for c in worked if c.available]
        if not available:
            raise PipelineError("all candidates became unavailable during summarization")

        if len(available) == 1:
            # Nothing to compare: a lone answer is trivially consistent.
            report = ConsensusReport(
                pair_scores={}, mean_fused=1.0, threshold=self.consensus_threshold,
                consensus=True, route=ROUTE_LIGHTWEIGHT,
            )
            final = self._refine(query, available, ROUTE_LIGHTWEIGHT)
            return final, report, worked

        pair_scores: dict[str, dict[str, float]] = {}
        fused_values = []
        for i in range(len(available)):
            for j in range(i + 1, len(available)):
                a, b = available[i], available[j]
                tokens_a, tokens_b = tokenize(a.summary), tokenize(b.summary)
                rouge = rouge_l(tokens_a, tokens_b)
                sym_bleu = (bleu(tokens_a, tokens_b, self.bleu_max_n)
                            + bleu(tokens_b, tokens_a, self.bleu_max_n)) / 2
                fused = self.fusion_lambda * rouge + (1 - self.fusion_lambda) * sym_bleu
                pair_scores[_pair_key(a.source, b.source)] = {
                    "rouge_l": rouge, "bleu": sym_bleu, "fused": fused,
                }
                fused_values.append(fused)

        mean_fused = mean(fused_values)
        consensus = mean_fused >= self.consensus_threshold
        route = ROUTE_LIGHTWEIGHT if consensus else ROUTE_EXPERT
        report = ConsensusReport(
            pair_scores=pair_scores, mean_fused=mean_fused,
            threshold=self.consensus_threshold, consensus=consensus, route=route,
        )
        final = self._refine(query, available, route)
        return final, report, worked
