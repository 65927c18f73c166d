"""Passage retrieval for sub-queries.

Two sources feed the reasoning loop:

* a remote passage-search service (QA over an encyclopedic corpus), reached over HTTP
  or replayed from a fixture file;
* a local dense index over short word-bounded chunks of one document (summaries).

Off-the-shelf mode skips retrieval entirely and hands back the dataset's own knowledge.
"""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np

from . import _kernels
from .errors import (
    BackendError,
    EmptyDocumentError,
    EmptyIndexError,
    ServiceUnavailableError,
    TransportError,
)
from .gateway import Backend, embed, write_atomic

logger = logging.getLogger(__name__)

QA_TOP_K = 2
SUMMARY_TOP_K = 3
CHUNK_MAX_WORDS = 40

INDEX_MAGIC = b"HALUIDX1"
SOURCES = ("external_service", "local_index", "off_the_shelf")


@dataclass(frozen=True)
class Passage:
    id: str
    text: str
    title: str | None = None
    score: float = 0.0

    def __post_init__(self):
        if not self.text:
            raise ValueError("passage text must be non-empty")

    def render(self) -> str:
        if self.title:
            return f"Title: {self.title}. Article: {self.text}"
        return f"Article: {self.text}"

    def to_dict(self) -> dict:
        return {"id": self.id, "title": self.title, "text": self.text, "score": round(self.score, 6)}


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    ordinal: int
    text: str
    word_count: int


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = QA_TOP_K
    source: str = "external_service"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.source not in SOURCES:
            raise ValueError(f"unknown retrieval source {self.source!r}")


def render_passages(passages: Sequence[Passage]) -> str:
    return "\n".join(p.render() for p in passages)


# ---------------------------------------------------------------------------
# chunking + dense index
# ---------------------------------------------------------------------------


def chunk_document(doc_id: str, text: str, max_words: int = CHUNK_MAX_WORDS) -> list[Chunk]:
    """Greedy packing of whitespace-delimited words into chunks of fewer than ``max_words``.

    Words are never split, so ``max_words=1`` still yields one word per chunk.
    """
    if max_words < 1:
        raise ValueError("max_words must be >= 1")
    words = text.split()
    if not words:
        raise EmptyDocumentError(f"document {doc_id!r} has no words")
    cap = max(max_words - 1, 1)
    return [
        Chunk(doc_id, i, " ".join(words[start:start + cap]), len(words[start:start + cap]))
        for i, start in enumerate(range(0, len(words), cap))
    ]


class DenseIndex:
    """Row-normalised chunk embeddings. Immutable after construction."""

    def __init__(self, vectors: np.ndarray, chunks: Sequence[Chunk]):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(chunks):
            raise ValueError("need one embedding row per chunk")
        norms = np.linalg.norm(vectors, axis=1)
        if len(chunks) and not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("index rows must be unit-norm")
        vectors.setflags(write=False)
        self.vectors = vectors
        self.chunks = tuple(chunks)
        self._ordinals = np.array([c.ordinal for c in self.chunks], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def save(self, path: str | Path) -> None:
        """Binary matrix + chunk table, plus a ``.json`` sidecar manifest."""
        path = Path(path)
        n, dim = self.vectors.shape
        table = json.dumps([[c.doc_id, c.ordinal, c.word_count, c.text] for c in self.chunks],
                           ensure_ascii=False, separators=(",", ":")).encode("utf-8")
        blob = (INDEX_MAGIC + struct.pack("<II", dim, n)
                + self.vectors.astype("<f4").tobytes(order="C")
                + struct.pack("<Q", len(table)) + table)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(blob)
        tmp.replace(path)
        docs: dict[str, int] = {}
        for c in self.chunks:
            docs[c.doc_id] = docs.get(c.doc_id, 0) + 1
        manifest = {"dim": dim, "n_chunks": n, "documents": docs}
        write_atomic(path.with_name(path.name + ".json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> DenseIndex:
        blob = Path(path).read_bytes()
        if blob[:8] != INDEX_MAGIC:
            raise ValueError(f"{path}: not an index file")
        dim, n = struct.unpack_from("<II", blob, 8)
        off = 16
        mat = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=off).astype(np.float64).reshape(n, dim)
        off += 4 * n * dim
        (tlen,) = struct.unpack_from("<Q", blob, off)
        rows = json.loads(blob[off + 8:off + 8 + tlen].decode("utf-8"))
        chunks = [Chunk(d, o, t, w) for d, o, w, t in rows]
        # float32 storage loses a little norm precision; renormalise on load
        if n:
            mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
        return cls(mat, chunks)


def build_index(chunks: Sequence[Chunk], backend: Backend) -> DenseIndex:
    if not chunks:
        raise EmptyIndexError("cannot build an index from zero chunks")
    vectors = embed(backend, [c.text for c in chunks])
    return DenseIndex(np.vstack(vectors), chunks)


def search_vector(index: DenseIndex, query_vec: np.ndarray, k: int) -> list[Passage]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise EmptyIndexError("search on an empty index")
    if query_vec.shape[0] != index.dim:
        raise ValueError(f"query dimension {query_vec.shape[0]} != index dimension {index.dim}")
    rows, scores = _kernels.top_k_similar(index.vectors, query_vec, index._ordinals, min(k, len(index)))
    out = []
    for r, s in zip(rows.tolist(), scores.tolist()):
        c = index.chunks[r]
        out.append(Passage(f"{c.doc_id}:{c.ordinal}", c.text, None, float(s)))
    return out


def search(index: DenseIndex, query_text: str, k: int, backend: Backend) -> list[Passage]:
    if len(index) == 0:
        raise EmptyIndexError("search on an empty index")
    (qvec,) = embed(backend, [query_text])
    return search_vector(index, qvec, k)


# ---------------------------------------------------------------------------
# external passage search
# ---------------------------------------------------------------------------


def _passages_from_payload(payload, k: int) -> list[Passage]:
    rows = payload.get("passages", []) if isinstance(payload, dict) else payload
    if not isinstance(rows, list):
        raise BackendError("search service returned an unexpected payload")
    out, seen = [], set()
    for i, row in enumerate(rows):
        pid = str(row.get("id", i))
        text = (row.get("text") or "").strip()
        if pid in seen or not text:
            continue
        seen.add(pid)
        out.append(Passage(pid, text, row.get("title") or None, float(row.get("score", 0.0))))
        if len(out) == k:
            break
    return out


class SearchClient:
    """POSTs ``{"query", "k"}`` to a passage-search endpoint."""

    def __init__(self, url: str, timeout: float = 30.0, headers: dict | None = None,
                 transport: httpx.BaseTransport | None = None):
        self.url = url
        self._client = httpx.Client(timeout=timeout, headers=headers or {}, transport=transport)

    def search(self, query_text: str, k: int) -> list[Passage]:
        try:
            resp = self._client.post(self.url, json={"query": query_text, "k": k})
        except httpx.HTTPError as exc:
            raise TransportError(f"search service: {exc}") from exc
        if resp.status_code in (502, 503, 504):
            raise ServiceUnavailableError(f"search service answered {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(f"search service answered {resp.status_code}: {resp.text[:200]}")
        return _passages_from_payload(resp.json(), k)

    def close(self) -> None:
        self._client.close()


class ScriptedSearchService:
    """Query text -> canned passage list, loaded from a JSON fixture. Unknown queries get no hits."""

    def __init__(self, table: dict[str, list]):
        self.table = dict(table)

    @classmethod
    def load(cls, path: str | Path) -> ScriptedSearchService:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def search(self, query_text: str, k: int) -> list[Passage]:
        return _passages_from_payload(self.table.get(query_text, []), k)


def external_search(client, query_text: str, k: int) -> list[Passage]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return client.search(query_text, k)


def merge_formulation_results(specific_hits: Sequence[Passage], general_hits: Sequence[Passage]) -> list[Passage]:
    out, seen = [], set()
    for p in list(specific_hits) + list(general_hits):
        if p.id not in seen:
            seen.add(p.id)
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# retriever adapters used by the reasoning loop
# ---------------------------------------------------------------------------


class Retriever:
    def retrieve(self, query_text: str) -> list[Passage]:
        raise NotImplementedError


class ServiceRetriever(Retriever):
    def __init__(self, client, k: int = QA_TOP_K):
        self.client = client
        self.k = k

    def retrieve(self, query_text):
        return external_search(self.client, query_text, self.k)


class IndexRetriever(Retriever):
    def __init__(self, index: DenseIndex, backend: Backend, k: int = SUMMARY_TOP_K):
        self.index = index
        self.backend = backend
        self.k = k

    def retrieve(self, query_text):
        return search(self.index, query_text, self.k, self.backend)


class OffTheShelfRetriever(Retriever):
    """Always returns the knowledge text that ships with the dataset record."""

    def __init__(self, knowledge: str, item_id: str = "knowledge"):
        self.passages = [Passage(f"{item_id}:0", knowledge.strip())] if knowledge.strip() else []

    def retrieve(self, query_text):
        return list(self.passages)
