"""Builds the two knowledge stores from a multimodal corpus.

Records carrying images get a caption that is refined against the
record's own text, then text and caption are fused into one document.
Fused documents feed an exact-search embedding index (token-window
chunks) and an entity/relation knowledge graph extracted by prompting
a chat model for a line-delimited triplet format.

Persistence is JSON-lines throughout and deterministic: rebuilding from
an identical corpus with scripted backends yields byte-identical files.
"""

from __future__ import annotations

import json
import logging
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gateway import ChatTurn, DecodingParams
from .templates import TemplateSet

logger = logging.getLogger(__name__)

FUSION_SEPARATOR = "\n\n"


@dataclass(frozen=True)
class CorpusRecord:
    id: str
    text: str = ""
    image_ref: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("corpus record needs an id")
        if not self.text and not self.image_ref:
            raise ValueError(f"record {self.id!r} has neither text nor image_ref")


@dataclass(frozen=True)
class FusedDocument:
    id: str
    fused_text: str
    caption: str | None = None
    image_ref: str | None = None

    def __post_init__(self):
        if not self.fused_text:
            raise ValueError(f"document {self.id!r} has empty fused_text")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    token_span: tuple[int, int]

    def __post_init__(self):
        start, end = self.token_span
        if end <= start:
            raise ValueError(f"chunk {self.chunk_id!r} has empty span {self.token_span}")
        if not self.text:
            raise ValueError(f"chunk {self.chunk_id!r} has empty text")


IndexRecord = namedtuple("IndexRecord", ["chunk_id", "vector", "text"])


class EmbeddingIndex:
    """Immutable exact-search index: one (chunk_id, vector, text) per chunk."""

    def __init__(self, dim: int, chunk_ids: list[str], texts: list[str], matrix: np.ndarray):
        if dim < 1:
            raise ValueError("dim must be positive")
        if len(chunk_ids) != len(texts) or matrix.shape != (len(chunk_ids), dim):
            raise ValueError("index shape mismatch")
        if len(set(chunk_ids)) != len(chunk_ids):
            raise ValueError("chunk_ids must be unique")
        self.dim = dim
        self.chunk_ids = list(chunk_ids)
        self.texts = list(texts)
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float64)

    def __len__(self):
        return len(self.chunk_ids)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingIndex):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.chunk_ids == other.chunk_ids
            and self.texts == other.texts
            and self.matrix.shape == other.matrix.shape
            and bool(np.all(self.matrix == other.matrix))
        )

    def record(self, i: int) -> IndexRecord:
        return IndexRecord(self.chunk_ids[i], self.matrix[i], self.texts[i])

    @property
    def records(self) -> list[IndexRecord]:
        return [self.record(i) for i in range(len(self))]

    def save(self, path) -> None:
        lines = [json.dumps({"dim": self.dim, "count": len(self)}, ensure_ascii=False)]
        for i in range(len(self)):
            lines.append(json.dumps(
                {"chunk_id": self.chunk_ids[i],
                 "vector": self.matrix[i].tolist(),
                 "text": self.texts[i]},
                ensure_ascii=False,
            ))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        raw_lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not raw_lines:
            raise ValueError(f"empty index file: {path}")
        header = json.loads(raw_lines[0])
        dim, count = int(header["dim"]), int(header["count"])
        chunk_ids, texts, rows = [], [], []
        for line in raw_lines[1:]:
            if not line.strip():
                continue
            rec = json.loads(line)
            chunk_ids.append(rec["chunk_id"])
            texts.append(rec["text"])
            rows.append(rec["vector"])
        if len(chunk_ids) != count:
            raise ValueError(f"index header says {count} records, file has {len(chunk_ids)}")
        matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
        return cls(dim, chunk_ids, texts, matrix)


class Entity:
    def __init__(self, name: str, description: str = "", visual_location: str | None = None):
        self.name = name
        self.description = description
        self.visual_location = visual_location

    def __eq__(self, other):
        return (
            isinstance(other, Entity)
            and self.name == other.name
            and self.description == other.description
            and self.visual_location == other.visual_location
        )

    def __repr__(self):
        return f"Entity({self.name!r}, {self.description!r}, {self.visual_location!r})"


class KnowledgeGraph:
    """Entities plus (head, relation, tail) triplets with adjacency lookup.

    Entity names are deduplicated case-insensitively; the first-seen
    spelling is kept as canonical. Triplets referencing an undeclared
    entity auto-create it with an empty description, since extraction
    output is noisy by nature.
    """

    def __init__(self):
        self._entities: dict[str, Entity] = {}  # casefolded name -> Entity
        self._triplets: dict[tuple[str, str, str], tuple[str, str, str]] = {}
        self._adjacency: dict[str, set[str]] = {}

    def __len__(self):
        return len(self._entities)

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self._entities == other._entities and set(self._triplets) == set(other._triplets)

    @property
    def entities(self) -> list[Entity]:
        return sorted(self._entities.values(), key=lambda e: e.name.casefold())

    @property
    def triplets(self) -> list[tuple[str, str, str]]:
        return list(self._triplets.values())

    @property
    def triplet_count(self) -> int:
        return len(self._triplets)

    def has_entity(self, name: str) -> bool:
        return name.casefold() in self._entities

    def get_entity(self, name: str) -> Entity:
        return self._entities[name.casefold()]

    def canonical_name(self, name: str) -> str:
        return self._entities[name.casefold()].name

    def add_entity(self, name: str, description: str = "", visual_location: str | None = None) -> Entity:
        if not name or not name.strip():
            raise ValueError("entity name must be non-empty")
        key = name.casefold()
        entity = self._entities.get(key)
        if entity is None:
            entity = Entity(name, description, visual_location)
            self._entities[key] = entity
            self._adjacency.setdefault(key, set())
        else:
            if not entity.description and description:
                entity.description = description
            if entity.visual_location is None and visual_location is not None:
                entity.visual_location = visual_location
        return entity

    def add_triplet(self, head: str, relation: str, tail: str) -> None:
        relation = relation.strip()
        if not head or not relation or not tail:
            raise ValueError("triplet fields must be non-empty")
        head_entity = self.add_entity(head)
        tail_entity = self.add_entity(tail)
        key = (head_entity.name.casefold(), relation.casefold(), tail_entity.name.casefold())
        if key in self._triplets:
            return
        self._triplets[key] = (head_entity.name, relation, tail_entity.name)
        self._adjacency[head_entity.name.casefold()].add(tail_entity.name.casefold())
        self._adjacency[tail_entity.name.casefold()].add(head_entity.name.casefold())

    def neighbors(self, name: str) -> set[str]:
        """Canonical names of entities sharing a triplet with `name`."""
        key = name.casefold()
        return {self._entities[k].name for k in self._adjacency.get(key, ())}

    def validate(self) -> None:
        for head, _, tail in self._triplets.values():
            if head.casefold() not in self._entities or tail.casefold() not in self._entities:
                raise ValueError(f"triplet endpoint missing from entity set: {head!r}/{tail!r}")

    def save(self, path) -> None:
        lines = []
        for entity in self.entities:
            lines.append(json.dumps(
                {"kind": "entity", "name": entity.name,
                 "description": entity.description,
                 "visual_location": entity.visual_location},
                ensure_ascii=False,
            ))
        for head, relation, tail in sorted(self._triplets.values()):
            lines.append(json.dumps(
                {"kind": "triplet", "head": head, "relation": relation, "tail": tail},
                ensure_ascii=False,
            ))
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        graph = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["kind"] == "entity":
                graph.add_entity(rec["name"], rec.get("description", ""), rec.get("visual_location"))
            elif rec["kind"] == "triplet":
                graph.add_triplet(rec["head"], rec["relation"], rec["tail"])
            else:
                raise ValueError(f"unknown graph record kind {rec['kind']!r}")
        graph.validate()
        return graph


def load_corpus(path) -> list[CorpusRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            records.append(CorpusRecord(raw["id"], raw.get("text", "") or "", raw.get("image_ref")))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"bad corpus record at line {lineno}: {exc}") from exc
    return records


def caption_and_refine(record: CorpusRecord, gateway, templates: TemplateSet) -> FusedDocument:
    """Fuse a record's text with a context-refined image caption."""
    if record.image_ref is None:
        return FusedDocument(record.id, record.text, caption=None, image_ref=None)
    raw_caption = gateway.caption_image(record.image_ref)
    prompt = templates.render("refine_caption", caption=raw_caption, text=record.text)
    refined = gateway.complete_chat(
        [ChatTurn("user", prompt)], DecodingParams(), role="lightweight_chat"
    )
    fused = record.text + FUSION_SEPARATOR + refined if record.text else refined
    return FusedDocument(record.id, fused, caption=refined, image_ref=record.image_ref)


def chunk_document(doc: FusedDocument, chunk_size: int = 512, overlap: int = 64) -> list[Chunk]:
    """Whitespace-token windows with stride chunk_size - overlap.

    The last window may be short; together the spans cover every token
    at least once.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    if not 0 <= overlap < chunk_size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < chunk_size, got {overlap}")
    tokens = doc.fused_text.split()
    if not tokens:
        raise ValueError(f"document {doc.id!r} has no tokens")
    stride = chunk_size - overlap
    chunks = []
    start = 0
    while True:
        end = min(start + chunk_size, len(tokens))
        chunks.append(Chunk(
            chunk_id=f"{doc.id}:{len(chunks):04d}",
            doc_id=doc.id,
            text=" ".join(tokens[start:end]),
            token_span=(start, end),
        ))
        if end == len(tokens):
            return chunks
        start += stride


def build_index(chunks: list[Chunk], gateway) -> EmbeddingIndex:
    if not chunks:
        raise ValueError("cannot build an index from zero chunks")
    ids = [c.chunk_id for c in chunks]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate chunk_id in chunk list")
    rows = []
    dim = None
    for chunk in chunks:
        vector = gateway.embed_text(chunk.text)
        if dim is None:
            dim = vector.shape[0]
        elif vector.shape[0] != dim:
            raise ValueError(
                f"embedding dimension drifted at {chunk.chunk_id!r}: {vector.shape[0]} != {dim}"
            )
        rows.append(vector)
    matrix = np.vstack(rows)
    return EmbeddingIndex(dim, ids, [c.text for c in chunks], matrix)


def parse_extraction_response(response: str) -> tuple[list[tuple[str, str]], list[tuple[str, str, str]]]:
    """Parse ENTITY|name|description and REL|head|relation|tail lines.

    Lines matching neither form are ignored; callers treat a response
    with no parseable lines as an unparseable document.
    """
    entities, triplets = [], []
    for line in response.splitlines():
        parts = [p.strip() for p in line.strip().split("|")]
        tag = parts[0].upper() if parts and parts[0] else ""
        if tag == "ENTITY" and len(parts) >= 3 and parts[1]:
            entities.append((parts[1], parts[2]))
        elif tag == "REL" and len(parts) >= 4 and parts[1] and parts[2] and parts[3]:
            triplets.append((parts[1], parts[2], parts[3]))
    return entities, triplets


def extract_graph(docs: list[FusedDocument], gateway, templates: TemplateSet,
                  warnings: list[str] | None = None) -> KnowledgeGraph:
    """One extraction chat call per document, merged into a single graph."""
    if not docs:
        raise ValueError("cannot extract a graph from zero documents")
    graph = KnowledgeGraph()
    for doc in docs:
        prompt = templates.render("extract_graph", text=doc.fused_text)
        response = gateway.complete_chat([ChatTurn("user", prompt)], DecodingParams())
        entities, triplets = parse_extraction_response(response)
        if not entities and not triplets:
            message = f"extraction produced no parseable lines for document {doc.id!r}; skipped"
            logger.warning(message)
            if warnings is not None:
                warnings.append(message)
            continue
        for name, description in entities:
            graph.add_entity(name, description, visual_location=doc.image_ref)
        for head, relation, tail in triplets:
            graph.add_triplet(head, relation, tail)
    graph.validate()
    return graph
