"""Embedding-backed retrieval over articles and previously resolved cases.

Embeddings are deterministic feature hashes: no model weights, no network,
same text → same vector on every platform. That is deliberately cheap; the
point of this layer is the retrieval contract (cosine threshold, top-k,
stable tie-breaks, snapshot round-trips), not embedding quality. Providers
are pluggable behind embed_text for anyone who wants a real model.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DIMENSION = 256
DEFAULT_THRESHOLD = 0.55
DEFAULT_K = 5

# Scores are quantized before thresholding and ordering so that ties between
# mathematically equal cosines resolve the same way no matter which BLAS (or
# none) computed them. 1e-12 is far below any distinct pair of hash-embedding
# cosines and far above accumulation noise.
SCORE_DECIMALS = 12

_TOKEN_RE = re.compile(r"[a-z0-9_]+")

DOC_KINDS = ("article", "resolved_case")


class KnowledgeError(Exception):
    pass


class SnapshotCorruptError(KnowledgeError):
    """Snapshot checksum or structure does not verify."""


class HashEmbeddingProvider:
    """sha256 feature hashing over lowercase token counts, L2-normalized.

    Empty or tokenless text maps to the first basis vector rather than the
    zero vector so cosine stays defined everywhere.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION) -> None:
        if dimension < 2:
            raise ValueError("dimension must be >= 2")
        self.dimension = dimension

    def embed_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            index = int.from_bytes(digest[:4], "big") % self.dimension
            sign = 1.0 if digest[4] & 1 else -1.0
            vec[index] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    # vectors are unit-norm by construction, so the dot product is the cosine
    return float(np.dot(a, b))


def _require_unit_norm(embedding: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(embedding, dtype=np.float64)
    if arr.ndim != 1:
        raise KnowledgeError(f"{what}: embedding must be one-dimensional")
    norm = float(np.linalg.norm(arr))
    if abs(norm - 1.0) > 1e-6:
        raise KnowledgeError(f"{what}: embedding must be unit-norm, got {norm}")
    return arr


@dataclass
class KnowledgeDoc:
    id: str
    kind: str
    title: str
    body: str
    embedding: np.ndarray
    updated_at: float

    def __post_init__(self) -> None:
        if self.kind not in DOC_KINDS:
            raise KnowledgeError(f"doc {self.id!r}: kind must be one of {DOC_KINDS}")
        if not self.id:
            raise KnowledgeError("doc id must be non-empty")
        self.embedding = _require_unit_norm(self.embedding, f"doc {self.id!r}")


@dataclass(frozen=True)
class RetrievalHit:
    doc_id: str
    score: float


@dataclass(frozen=True)
class ContextPackage:
    """What retrieval hands to planning: the hits plus assembled text."""

    query: str
    hits: tuple[RetrievalHit, ...]
    assembled_text: str


@dataclass
class CaseRecord:
    """One previously resolved support case from the case repository."""

    id: str
    issue_description: str
    chat_transcript: str
    resolution_summary: str
    root_cause: str
    resolution_steps: list[str]
    turn_count: int
    contact_duration_minutes: float

    def __post_init__(self) -> None:
        if self.turn_count < 0:
            raise KnowledgeError(f"case {self.id!r}: turn_count must be >= 0")
        if self.contact_duration_minutes < 0:
            raise KnowledgeError(
                f"case {self.id!r}: contact_duration_minutes must be >= 0"
            )

    def searchable_text(self) -> str:
        return " ".join(
            [
                self.issue_description,
                self.root_cause,
                self.resolution_summary,
                " ".join(self.resolution_steps),
            ]
        )


def load_case_repo(path) -> dict[str, CaseRecord]:
    """Load a JSONL case repository keyed by case id."""
    cases: dict[str, CaseRecord] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KnowledgeError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            try:
                record = CaseRecord(
                    id=raw["id"],
                    issue_description=raw["issue_description"],
                    chat_transcript=raw.get("chat_transcript", ""),
                    resolution_summary=raw.get("resolution_summary", ""),
                    root_cause=raw.get("root_cause", ""),
                    resolution_steps=list(raw.get("resolution_steps", [])),
                    turn_count=int(raw["turn_count"]),
                    contact_duration_minutes=float(raw["contact_duration_minutes"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise KnowledgeError(f"{path}:{line_no}: bad case record: {exc}") from exc
            if record.id in cases:
                raise KnowledgeError(f"{path}:{line_no}: duplicate case id {record.id!r}")
            cases[record.id] = record
    return cases


@dataclass
class _Index:
    """Immutable search index; replaced wholesale on every mutation."""

    ids: tuple[str, ...]
    matrix: np.ndarray  # shape (n_docs, dimension)


class KnowledgeStore:
    """Holds docs and answers cosine top-k queries above a threshold.

    Writers swap in a fresh (ids, matrix) pair under a lock; readers grab
    the current pair once and work on it without locking, so retrieval
    never blocks on ingestion.
    """

    def __init__(
        self,
        provider: HashEmbeddingProvider | None = None,
        dimension: int | None = None,
    ) -> None:
        self.provider = provider or HashEmbeddingProvider(dimension or DEFAULT_DIMENSION)
        if dimension is not None and self.provider.dimension != dimension:
            raise KnowledgeError("dimension disagrees with provider dimension")
        self.dimension = self.provider.dimension
        self._docs: dict[str, KnowledgeDoc] = {}
        self._index = _Index(ids=(), matrix=np.zeros((0, self.dimension)))
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._docs)

    def get(self, doc_id: str) -> KnowledgeDoc:
        try:
            return self._docs[doc_id]
        except KeyError:
            raise KnowledgeError(f"unknown doc id: {doc_id!r}") from None

    def add(self, doc: KnowledgeDoc) -> None:
        if doc.embedding.shape != (self.dimension,):
            raise KnowledgeError(
                f"doc {doc.id!r}: embedding dimension {doc.embedding.shape} "
                f"does not match store dimension {self.dimension}"
            )
        with self._lock:
            self._docs[doc.id] = doc
            self._rebuild_locked()

    def add_text(
        self,
        doc_id: str,
        kind: str,
        title: str,
        body: str,
        updated_at: float,
    ) -> KnowledgeDoc:
        doc = KnowledgeDoc(
            id=doc_id,
            kind=kind,
            title=title,
            body=body,
            embedding=self.provider.embed_text(f"{title} {body}"),
            updated_at=updated_at,
        )
        self.add(doc)
        return doc

    def remove(self, doc_id: str) -> None:
        with self._lock:
            if doc_id not in self._docs:
                raise KnowledgeError(f"unknown doc id: {doc_id!r}")
            del self._docs[doc_id]
            self._rebuild_locked()

    def _rebuild_locked(self) -> None:
        # Stable id order keeps scoring deterministic across rebuilds.
        ids = tuple(sorted(self._docs))
        if ids:
            matrix = np.stack([self._docs[i].embedding for i in ids])
        else:
            matrix = np.zeros((0, self.dimension))
        self._index = _Index(ids=ids, matrix=matrix)

    def retrieve(
        self,
        query: str,
        k: int = DEFAULT_K,
        threshold: float = DEFAULT_THRESHOLD,
    ) -> ContextPackage:
        """Top-k docs with cosine >= threshold, best first.

        Ordering: score descending, then updated_at descending (fresher
        wins), then id ascending. Empty stores and all-below-threshold
        queries return an empty package.
        """
        if k < 1:
            raise KnowledgeError("k must be >= 1")
        query_vec = self.provider.embed_text(query)
        index = self._index
        if not index.ids:
            return ContextPackage(query=query, hits=(), assembled_text="")
        scores = index.matrix @ query_vec
        candidates = [
            (round(float(score), SCORE_DECIMALS), doc_id)
            for score, doc_id in zip(scores, index.ids)
        ]
        candidates = [(s, d) for s, d in candidates if s >= threshold]
        candidates.sort(
            key=lambda pair: (-pair[0], -self._docs[pair[1]].updated_at, pair[1])
        )
        top = candidates[:k]
        hits = tuple(RetrievalHit(doc_id=doc_id, score=score) for score, doc_id in top)
        blocks = []
        for hit in hits:
            doc = self._docs[hit.doc_id]
            blocks.append(f"[{doc.kind}:{doc.id}] {doc.title}\n{doc.body}")
        return ContextPackage(
            query=query, hits=hits, assembled_text="\n\n".join(blocks)
        )

    # --- snapshots -----------------------------------------------------

    def snapshot(self, path) -> None:
        """Write header + JSONL docs; header checksums the doc bytes."""
        lines = []
        for doc_id in sorted(self._docs):
            doc = self._docs[doc_id]
            lines.append(
                json.dumps(
                    {
                        "id": doc.id,
                        "kind": doc.kind,
                        "title": doc.title,
                        "body": doc.body,
                        # repr round-trips float64 exactly, so reloads are bit-identical
                        "embedding": [float(x) for x in doc.embedding],
                        "updated_at": doc.updated_at,
                    },
                    sort_keys=True,
                )
            )
        body = "".join(line + "\n" for line in lines)
        body_bytes = body.encode("utf-8")
        header = json.dumps(
            {
                "version": 1,
                "dimension": self.dimension,
                "doc_count": len(lines),
                "checksum": hashlib.sha256(body_bytes).hexdigest(),
            },
            sort_keys=True,
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            fh.write(body)

    @classmethod
    def load_snapshot(
        cls, path, provider: HashEmbeddingProvider | None = None
    ) -> "KnowledgeStore":
        with open(path, "r", encoding="utf-8") as fh:
            header_line = fh.readline()
            body = fh.read()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise SnapshotCorruptError(f"unreadable snapshot header: {exc}") from exc
        if header.get("version") != 1:
            raise SnapshotCorruptError(f"unsupported snapshot version: {header.get('version')}")
        checksum = hashlib.sha256(body.encode("utf-8")).hexdigest()
        if checksum != header.get("checksum"):
            raise SnapshotCorruptError("snapshot checksum mismatch")
        dimension = int(header["dimension"])
        store = cls(provider=provider, dimension=None if provider else dimension)
        if store.dimension != dimension:
            raise SnapshotCorruptError(
                f"snapshot dimension {dimension} does not match provider "
                f"dimension {store.dimension}"
            )
        count = 0
        for line in body.splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            embedding = np.asarray(raw["embedding"], dtype=np.float64)
            store.add(
                KnowledgeDoc(
                    id=raw["id"],
                    kind=raw["kind"],
                    title=raw["title"],
                    body=raw["body"],
                    embedding=embedding,
                    updated_at=float(raw["updated_at"]),
                )
            )
            count += 1
        if count != int(header["doc_count"]):
            raise SnapshotCorruptError(
                f"snapshot doc_count {header['doc_count']} does not match body ({count})"
            )
        return store

    def doc_ids(self) -> tuple[str, ...]:
        return self._index.ids


def brute_force_top_k(
    store: KnowledgeStore,
    query: str,
    k: int = DEFAULT_K,
    threshold: float = DEFAULT_THRESHOLD,
) -> list[RetrievalHit]:
    """Reference scorer: per-doc cosine, no matrix math. Test oracle."""
    query_vec = store.provider.embed_text(query)
    scored = []
    for doc_id in store.doc_ids():
        doc = store.get(doc_id)
        score = round(
            float(sum(a * b for a, b in zip(doc.embedding, query_vec))), SCORE_DECIMALS
        )
        if score >= threshold:
            scored.append((score, doc))
    scored.sort(key=lambda pair: (-pair[0], -pair[1].updated_at, pair[1].id))
    return [RetrievalHit(doc_id=doc.id, score=score) for score, doc in scored[:k]]
