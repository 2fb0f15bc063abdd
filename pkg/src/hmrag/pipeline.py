"""End-to-end query orchestration.

A query is decomposed, each sub-query fans out concurrently to the
enabled retrieval agents, the decision agent arbitrates the candidates,
and sub-answers chain forward as context for later sub-queries. Every
stage lands in a QueryTrace, including each backend call with its role.

With the decision stage disabled (ablation), the web candidate is taken
verbatim, falling back to vector then graph.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

from .decompose import DecompositionAgent, SubQueryPlan
from .decision import (
    SOURCES,
    AnswerCandidate,
    ConsensusReport,
    DecisionAgent,
    unavailable_candidate,
)
from .errors import GatewayError, PipelineError
from .gateway import CallLog, ChatTurn, DecodingParams, ModelGateway
from .ingest import EmbeddingIndex, KnowledgeGraph
from .graph_agent import GraphAgent
from .templates import TemplateSet
from .vector_agent import VectorAgent
from .web_agent import SearchConfig, WebAgent

logger = logging.getLogger(__name__)

FALLBACK_ORDER = ("web", "vector", "graph")  # decision-disabled preference

_CHOICE_LETTER = re.compile(r"\b([A-E])\b")
_CHOICE_LABELS = "ABCDE"


@dataclass(frozen=True)
class PipelineConfig:
    enabled_agents: tuple[str, ...] = SOURCES
    decision_enabled: bool = True
    top_k: int = 5
    tau: float = 0.3
    fusion_lambda: float = 0.5
    consensus_threshold: float = 0.5
    bleu_max_n: int = 4
    summary_token_budget: int = 64
    agent_timeout_s: float = 30.0
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self):
        unknown = set(self.enabled_agents) - set(SOURCES)
        if unknown:
            raise ValueError(f"unknown agents {sorted(unknown)}")
        if not self.enabled_agents:
            raise ValueError("at least one retrieval agent must be enabled")


@dataclass
class SubQueryTrace:
    sub_query: str
    contextual_query: str
    candidates: list[AnswerCandidate] = field(default_factory=list)
    report: ConsensusReport | None = None
    answer: str = ""
    warnings: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        data = {
            "sub_query": self.sub_query,
            "contextual_query": self.contextual_query,
            "candidates": [
                {"text": c.text, "source": c.source, "evidence": list(c.evidence),
                 "summary": c.summary, "available": c.available}
                for c in self.candidates
            ],
            "report": self.report.to_dict() if self.report else None,
            "answer": self.answer,
            "warnings": list(self.warnings),
        }
        if include_timings:
            data["timings"] = dict(self.timings)
        return data


@dataclass
class QueryTrace:
    question: str
    plan: SubQueryPlan | None = None
    entries: list[SubQueryTrace] = field(default_factory=list)
    final_answer: str = ""
    warnings: list[str] = field(default_factory=list)
    calls: list = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return self._as_dict(include_timings=True, sort_calls=False)

    def normalized(self) -> dict:
        """Comparison form: timing fields dropped, call order canonicalized.

        Fan-out threads record calls in completion order, so the raw call
        list is not stable across runs even when the calls themselves are.
        """
        return self._as_dict(include_timings=False, sort_calls=True)

    def _as_dict(self, include_timings: bool, sort_calls: bool) -> dict:
        calls = [{"kind": c.kind, "role": c.role, "detail": c.detail} for c in self.calls]
        if sort_calls:
            calls.sort(key=lambda c: (c["kind"], c["role"], c["detail"]))
        data = {
            "question": self.question,
            "plan": None if self.plan is None else {
                "original": self.plan.original,
                "sub_queries": list(self.plan.sub_queries),
                "multi_intent": self.plan.multi_intent,
            },
            "entries": [e.to_dict(include_timings=include_timings) for e in self.entries],
            "final_answer": self.final_answer,
            "warnings": list(self.warnings),
            "calls": calls,
        }
        if include_timings:
            data["timings"] = dict(self.timings)
        return data

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=indent, sort_keys=True)


def compose_contextual_query(sub_query: str, prior: list[tuple[str, str]]) -> str:
    if not prior:
        return sub_query
    blocks = [f"Q: {q}\nA: {a}" for q, a in prior]
    return sub_query + "\n\nAnswers to earlier sub-questions:\n" + "\n\n".join(blocks)


class Pipeline:
    """Wires decomposition, retrieval fan-out, and decision per query.

    Stores are immutable and shared; agents for one sub-query run
    concurrently while sub-queries themselves run in order because each
    one can depend on earlier answers.
    """

    def __init__(self, gateway: ModelGateway, index: EmbeddingIndex | None,
                 graph: KnowledgeGraph | None, web_client=None,
                 cfg: PipelineConfig | None = None, templates: TemplateSet | None = None,
                 call_log: CallLog | None = None):
        self.cfg = cfg or PipelineConfig()
        self._templates = templates or TemplateSet()
        self._gateway = gateway
        self._call_log = call_log
        self._decomposer = DecompositionAgent(gateway, self._templates)
        self._decision = DecisionAgent(
            gateway, self._templates,
            fusion_lambda=self.cfg.fusion_lambda,
            consensus_threshold=self.cfg.consensus_threshold,
            bleu_max_n=self.cfg.bleu_max_n,
            summary_token_budget=self.cfg.summary_token_budget,
        )
        self._agents = {}
        if "vector" in self.cfg.enabled_agents:
            if index is None:
                raise PipelineError("vector agent enabled but no index loaded")
            self._agents["vector"] = VectorAgent(gateway, index, self.cfg.top_k, self._templates)
        if "graph" in self.cfg.enabled_agents:
            if graph is None:
                raise PipelineError("graph agent enabled but no graph loaded")
            self._agents["graph"] = GraphAgent(gateway, graph, self.cfg.tau, self._templates)
        if "web" in self.cfg.enabled_agents:
            if web_client is None:
                raise PipelineError("web agent enabled but no search client configured")
            self._agents["web"] = WebAgent(gateway, web_client, self.cfg.search, self._templates)
        self._order = tuple(s for s in SOURCES if s in self._agents)

    def _run_agent(self, source: str, query: str) -> tuple[AnswerCandidate, list[str]]:
        warnings: list[str] = []
        agent = self._agents[source]
        if source == "vector":
            candidate = agent.run(query)
        else:
            candidate = agent.run(query, warnings)
        return candidate, warnings

    def _fan_out(self, query: str, entry: SubQueryTrace) -> list[AnswerCandidate]:
        candidates = []
        pool = concurrent.futures.ThreadPoolExecutor(max_workers=len(self._order))
        try:
            futures = {source: pool.submit(self._run_agent, source, query)
                       for source in self._order}
            for source in self._order:
                try:
                    candidate, agent_warnings = futures[source].result(
                        timeout=self.cfg.agent_timeout_s
                    )
                    entry.warnings.extend(agent_warnings)
                except concurrent.futures.TimeoutError:
                    candidate = unavailable_candidate(source)
                    entry.warnings.append(
                        f"{source} agent timed out after {self.cfg.agent_timeout_s}s"
                    )
                except GatewayError as exc:
                    candidate = unavailable_candidate(source)
                    entry.warnings.append(f"{source} agent failed: {exc}")
                candidates.append(candidate)
        finally:
            # wait=False so a timed-out agent cannot stall the query; its
            # thread finishes in the background and is simply ignored
            pool.shutdown(wait=False)
        return candidates

    def _fallback_answer(self, candidates: list[AnswerCandidate]) -> AnswerCandidate | None:
        by_source = {c.source: c for c in candidates if c.available}
        for source in FALLBACK_ORDER:
            if source in by_source:
                return by_source[source]
        return None

    def run_query(self, question: str) -> QueryTrace:
        if not question or not question.strip():
            raise ValueError("question must be non-empty")
        trace = QueryTrace(question=question)
        if self._call_log is not None:
            self._call_log.take()  # drop records from earlier work
        started = time.perf_counter()
        try:
            plan = self._decomposer.decompose(question, trace.warnings)
            trace.plan = plan
            trace.timings["decompose_s"] = time.perf_counter() - started

            prior: list[tuple[str, str]] = []
            for sub_query in plan.sub_queries:
                contextual = compose_contextual_query(sub_query, prior)
                entry = SubQueryTrace(sub_query=sub_query, contextual_query=contextual)
                trace.entries.append(entry)
                fan_started = time.perf_counter()
                candidates = self._fan_out(contextual, entry)
                entry.timings["fanout_s"] = time.perf_counter() - fan_started

                decide_started = time.perf_counter()
                if self.cfg.decision_enabled:
                    try:
                        answer, report, candidates = self._decision.decide(contextual, candidates)
                    except PipelineError as exc:
                        entry.candidates = candidates
                        raise PipelineError(str(exc), trace=trace) from exc
                    entry.report = report
                else:
                    chosen = self._fallback_answer(candidates)
                    if chosen is None:
                        entry.candidates = candidates
                        raise PipelineError(
                            "no available answer candidates to decide over", trace=trace
                        )
                    answer = chosen.text
                entry.candidates = candidates
                entry.answer = answer
                entry.timings["decision_s"] = time.perf_counter() - decide_started
                prior.append((sub_query, answer))

            final = prior[-1][1]
            if plan.multi_intent:
                blocks = "\n\n".join(f"Q: {q}\nA: {a}" for q, a in prior)
                prompt = self._templates.render("final_refine", question=question, answers=blocks)
                final = self._gateway.complete_chat(
                    [ChatTurn("user", prompt)], DecodingParams(), role="lightweight_chat"
                )
            trace.final_answer = final
            return trace
        finally:
            trace.timings["total_s"] = time.perf_counter() - started
            if self._call_log is not None:
                trace.calls = self._call_log.take()


@dataclass(frozen=True)
class EvalRecord:
    id: str
    question: str
    choices: tuple[str, ...]
    answer: int
    context: str = ""
    image_caption: str = ""
    tags: tuple[str, ...] = ()


def parse_eval_record(raw: dict) -> EvalRecord:
    choices = raw.get("choices")
    if not isinstance(choices, list) or not choices or len(choices) > len(_CHOICE_LABELS):
        raise ValueError("record needs 1-5 choices")
    answer = raw.get("answer")
    if not isinstance(answer, int) or not 0 <= answer < len(choices):
        raise ValueError("answer index out of range")
    question = raw.get("question")
    if not question or not isinstance(question, str):
        raise ValueError("record needs a question")
    tags = raw.get("tags", [])
    if isinstance(tags, str):
        tags = [tags]
    return EvalRecord(
        id=str(raw.get("id", "")),
        question=question,
        choices=tuple(str(c) for c in choices),
        answer=answer,
        context=str(raw.get("context") or ""),
        image_caption=str(raw.get("image_caption") or ""),
        tags=tuple(str(t) for t in tags),
    )


def format_eval_question(record: EvalRecord) -> str:
    parts = [record.question]
    if record.context:
        parts.append(f"Context: {record.context}")
    if record.image_caption:
        parts.append(f"Image caption: {record.image_caption}")
    choice_lines = [f"({_CHOICE_LABELS[i]}) {c}" for i, c in enumerate(record.choices)]
    parts.append("Choices:\n" + "\n".join(choice_lines))
    return "\n\n".join(parts)


def _normalize_choice_text(text: str) -> str:
    return text.strip().rstrip(".").strip().casefold()


def extract_choice(answer: str, choices) -> int | None:
    """First standalone A-E letter in range, else exact choice-text match."""
    for match in _CHOICE_LETTER.finditer(answer):
        idx = _CHOICE_LABELS.index(match.group(1))
        if idx < len(choices):
            return idx
    normalized = _normalize_choice_text(answer)
    for i, choice in enumerate(choices):
        if _normalize_choice_text(choice) == normalized:
            return i
    return None


def run_eval(pipeline: Pipeline, dataset_path, keep_traces: bool = False) -> dict:
    """Answer every dataset question and report accuracy.

    Malformed records are skipped and counted; per-tag accuracy is
    reported whenever records carry tags.
    """
    total = 0
    correct = 0
    skipped = 0
    errors = 0
    per_tag: dict[str, dict[str, int]] = {}
    rows = []
    traces = []
    for lineno, line in enumerate(Path(dataset_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = parse_eval_record(json.loads(line))
        except (ValueError, TypeError) as exc:
            logger.warning("skipping malformed eval record at line %d: %s", lineno, exc)
            skipped += 1
            continue
        total += 1
        predicted = None
        error_text = ""
        try:
            trace = pipeline.run_query(format_eval_question(record))
            if keep_traces:
                traces.append(trace)
            predicted = extract_choice(trace.final_answer, record.choices)
        except PipelineError as exc:
            errors += 1
            error_text = str(exc)
        is_correct = predicted == record.answer
        correct += int(is_correct)
        for tag in record.tags:
            bucket = per_tag.setdefault(tag, {"total": 0, "correct": 0})
            bucket["total"] += 1
            bucket["correct"] += int(is_correct)
        rows.append({
            "id": record.id, "predicted": predicted, "answer": record.answer,
            "correct": is_correct, "error": error_text,
        })
    report = {
        "total": total,
        "correct": correct,
        "accuracy": correct / total if total else 0.0,
        "skipped": skipped,
        "errors": errors,
        "per_tag": {
            tag: {
                "total": bucket["total"],
                "correct": bucket["correct"],
                "accuracy": bucket["correct"] / bucket["total"],
            }
            for tag, bucket in sorted(per_tag.items())
        },
        "questions": rows,
    }
    if keep_traces:
        report["_traces"] = traces
    return report
