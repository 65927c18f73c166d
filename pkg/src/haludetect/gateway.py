"""Chat-completion and embedding backends.

Pipeline code talks to a backend only through :func:`chat` and :func:`embed`; those
wrappers enforce the request invariants, stop-marker truncation, refusal handling and
unit-norm embeddings regardless of which backend produced the raw output.

Backends:

* :class:`HTTPBackend` - any OpenAI-compatible server (``/chat/completions`` and
  ``/embeddings`` under ``base_url``), with retries, a concurrency cap and an on-disk
  response cache.
* :class:`ScriptedBackend` - deterministic replay of a :class:`ScriptedTranscript`.
* :class:`FunctionBackend` - completions produced by a Python callable; handy for
  authoring transcripts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .errors import (
    AlignmentError,
    BackendError,
    ConfigError,
    DimensionMismatchError,
    EmbeddingError,
    MissingTranscriptError,
    NoLogprobsError,
    RefusalError,
    ServiceUnavailableError,
    TransportError,
)

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
FINISH_REASONS = ("stop", "length", "content_filter", "refusal")
NORM_TOL = 1e-6


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 512
    stop_markers: tuple[str, ...] = ()
    want_logprobs: bool = False

    def __post_init__(self):
        msgs = tuple((str(r), str(t)) for r, t in self.messages)
        object.__setattr__(self, "messages", msgs)
        object.__setattr__(self, "stop_markers", tuple(self.stop_markers))
        if not msgs:
            raise ValueError("a chat request needs at least one message")
        if msgs[0][0] not in ("system", "user"):
            raise ValueError("first message must come from system or user")
        for role, _ in msgs:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if any(not s for s in self.stop_markers):
            raise ValueError("stop markers must be non-empty")


@dataclass(frozen=True)
class TokenLogProb:
    token_text: str
    logprob: float

    @property
    def prob(self) -> float:
        return math.exp(self.logprob)


@dataclass(frozen=True)
class ChatCompletion:
    text: str
    tokens: tuple[TokenLogProb, ...] = ()
    finish_reason: str = "stop"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"unknown finish_reason {self.finish_reason!r}")

    def tokens_consistent(self) -> bool:
        return not self.tokens or "".join(t.token_text for t in self.tokens) == self.text

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "tokens": [{"token": t.token_text, "logprob": t.logprob} for t in self.tokens],
            "finish_reason": self.finish_reason,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ChatCompletion:
        return cls(
            text=d["text"],
            tokens=tuple(TokenLogProb(t["token"], float(t["logprob"])) for t in d.get("tokens", ())),
            finish_reason=d.get("finish_reason", "stop"),
        )


def fingerprint(request: ChatRequest) -> str:
    """Stable key for a request: messages plus the sampling parameters that shape output."""
    payload = {
        "messages": [[role, text] for role, text in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "stop": list(request.stop_markers),
    }
    blob = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def truncate_at_stop(completion: ChatCompletion, stop_markers: Sequence[str]) -> ChatCompletion:
    cuts = [i for i in (completion.text.find(s) for s in stop_markers) if i >= 0]
    if not cuts:
        return completion
    cut = min(cuts)
    tokens = []
    pos = 0
    for tok in completion.tokens:
        if pos >= cut:
            break
        end = pos + len(tok.token_text)
        if end > cut:
            tokens.append(TokenLogProb(tok.token_text[: cut - pos], tok.logprob))
        else:
            tokens.append(tok)
        pos = end
    return ChatCompletion(completion.text[:cut], tuple(tokens), completion.finish_reason)


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------


class Backend:
    """Raw completion/embedding source. Use :func:`chat` / :func:`embed` instead of calling these."""

    def complete(self, request: ChatRequest) -> ChatCompletion:
        raise NotImplementedError

    def embed_raw(self, texts: Sequence[str]) -> list[list[float]]:
        raise BackendError(f"{type(self).__name__} has no embedding support")


def chat(backend: Backend, request: ChatRequest) -> ChatCompletion:
    completion = backend.complete(request)
    if completion.finish_reason in ("refusal", "content_filter"):
        raise RefusalError(f"backend declined ({completion.finish_reason})", completion.text)
    completion = truncate_at_stop(completion, request.stop_markers)
    if not request.want_logprobs and completion.tokens:
        completion = ChatCompletion(completion.text, (), completion.finish_reason)
    return completion


def embed(backend: Backend, texts: Sequence[str]) -> list[np.ndarray]:
    """Embed ``texts`` and L2-normalise every vector."""
    texts = list(texts)
    if not texts or any(not t for t in texts):
        raise ValueError("embed needs a non-empty list of non-empty strings")
    raw = backend.embed_raw(texts)
    if len(raw) != len(texts):
        raise DimensionMismatchError(f"asked for {len(texts)} embeddings, got {len(raw)}")
    dims = {len(v) for v in raw}
    if len(dims) != 1:
        raise DimensionMismatchError(f"ragged embeddings: dimensions {sorted(dims)}")
    out = []
    for text, vec in zip(texts, raw):
        arr = np.asarray(vec, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if not math.isfinite(norm) or norm == 0.0:
            raise EmbeddingError(f"cannot normalise embedding of {text[:40]!r}")
        out.append(arr / norm)
    return out


class ScriptedTranscript:
    """Fingerprint -> canned completion. Immutable once loaded; safe to share across threads."""

    def __init__(self, entries: Mapping[str, ChatCompletion] | None = None, strict: bool = True):
        self.entries = dict(entries or {})
        self.strict = strict

    def add(self, request: ChatRequest, completion: ChatCompletion) -> str:
        fp = fingerprint(request)
        self.entries[fp] = completion
        return fp

    def to_json(self) -> str:
        data = {fp: c.to_dict() for fp, c in sorted(self.entries.items())}
        return json.dumps(data, ensure_ascii=False, indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        write_atomic(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path, strict: bool = True) -> ScriptedTranscript:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = {}
        for fp, d in data.items():
            c = ChatCompletion.from_dict(d)
            if not c.tokens_consistent():
                raise ValueError(f"transcript entry {fp}: tokens do not concatenate to text")
            entries[fp] = c
        return cls(entries, strict=strict)


class HashingEmbedder:
    """Deterministic feature-hashing embedder (signed word + word-bigram buckets).

    Not semantic, but stable across platforms and good enough for lexical-overlap
    retrieval in offline runs and tests.
    """

    def __init__(self, dim: int = 256):
        self.dim = dim

    def _features(self, text: str) -> list[str]:
        words = re.findall(r"\w+", text.lower())
        if not words:
            return list(text)
        return words + [a + " " + b for a, b in zip(words, words[1:])]

    def __call__(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            v = [0.0] * self.dim
            for feat in self._features(text):
                h = int.from_bytes(hashlib.blake2b(feat.encode("utf-8"), digest_size=8).digest(), "little")
                v[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
            out.append(v)
        return out


class TableEmbedder:
    """Looks vectors up in a fixed text -> vector table (fixtures)."""

    def __init__(self, table: Mapping[str, Sequence[float]], fallback: Callable | None = None):
        self.table = {k: list(v) for k, v in table.items()}
        self.fallback = fallback

    def __call__(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for t in texts:
            if t in self.table:
                out.append(self.table[t])
            elif self.fallback is not None:
                out.append(self.fallback([t])[0])
            else:
                raise EmbeddingError(f"no fixture vector for {t[:40]!r}")
        return out


class ScriptedBackend(Backend):
    def __init__(self, transcript: ScriptedTranscript, embedder: Callable | None = None,
                 fallback: ChatCompletion | None = None):
        self.transcript = transcript
        self.embedder = embedder or HashingEmbedder()
        self.fallback = fallback or ChatCompletion("")

    def complete(self, request: ChatRequest) -> ChatCompletion:
        fp = fingerprint(request)
        hit = self.transcript.entries.get(fp)
        if hit is not None:
            return hit
        if self.transcript.strict:
            raise MissingTranscriptError(fp)
        return self.fallback

    def embed_raw(self, texts):
        return self.embedder(texts)


class FunctionBackend(Backend):
    """Completions from ``fn(request) -> ChatCompletion``; optionally records into a transcript."""

    def __init__(self, fn: Callable[[ChatRequest], ChatCompletion], embedder: Callable | None = None,
                 record_to: ScriptedTranscript | None = None):
        self.fn = fn
        self.embedder = embedder or HashingEmbedder()
        self.record_to = record_to
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatCompletion:
        completion = self.fn(request)
        if self.record_to is not None:
            with self._lock:
                self.record_to.add(request, completion)
        return completion

    def embed_raw(self, texts):
        return self.embedder(texts)


class CountingBackend(Backend):
    """Delegates to ``inner`` and tallies chat calls under ``stage`` in a shared dict."""

    def __init__(self, inner: Backend, counts: dict, stage: str, lock: threading.Lock | None = None):
        self.inner = inner
        self.counts = counts
        self.stage = stage
        self._lock = lock or threading.Lock()
        with self._lock:
            counts.setdefault(stage, 0)

    def complete(self, request):
        with self._lock:
            self.counts[self.stage] += 1
        return self.inner.complete(request)

    def embed_raw(self, texts):
        return self.inner.embed_raw(texts)


# ---------------------------------------------------------------------------
# live HTTP backend
# ---------------------------------------------------------------------------


@dataclass
class BackendConfig:
    base_url: str
    model_name: str
    api_key_env: str | None = "OPENAI_API_KEY"
    request_timeout: float = 120.0
    max_retries: int = 3
    concurrency_limit: int = 4
    embedding_model: str | None = None
    cache_dir: str | None = None
    top_logprobs: int = 1

    def __post_init__(self):
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be >= 1")
        if not 0 <= self.max_retries <= 10:
            raise ConfigError("max_retries must be within 0..10")
        if self.request_timeout <= 0:
            raise ConfigError("request_timeout must be positive")

    def resolve_api_key(self) -> str | None:
        if not self.api_key_env:
            return None
        key = os.environ.get(self.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {self.api_key_env} is not set (API key for {self.base_url})")
        return key


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ResponseCache:
    """One JSON file per fingerprint. Writes are serialised and atomic, so readers never see torn files."""

    def __init__(self, root: str | Path, namespace: str):
        ns = hashlib.sha256(namespace.encode("utf-8")).hexdigest()[:16]
        self.root = Path(root) / ns
        self._lock = threading.Lock()

    def _path(self, fp: str) -> Path:
        return self.root / fp[:2] / f"{fp}.json"

    def get(self, fp: str) -> ChatCompletion | None:
        try:
            return ChatCompletion.from_dict(json.loads(self._path(fp).read_text(encoding="utf-8")))
        except FileNotFoundError:
            return None
        except (ValueError, KeyError):
            logger.warning("ignoring unreadable cache entry %s", fp)
            return None

    def put(self, fp: str, completion: ChatCompletion) -> None:
        with self._lock:
            write_atomic(self._path(fp), json.dumps(completion.to_dict(), ensure_ascii=False))


class HTTPBackend(Backend):
    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        headers = {"Content-Type": "application/json"}
        key = config.resolve_api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            headers=headers,
            timeout=config.request_timeout,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(config.concurrency_limit)
        self._sleep = sleep
        self.cache = (
            ResponseCache(config.cache_dir, f"{config.base_url}|{config.model_name}")
            if config.cache_dir else None
        )

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        attempt = 0
        while True:
            try:
                with self._slots:
                    resp = self._client.post(path, json=payload)
                if resp.status_code == 429 or resp.status_code >= 500:
                    cls = ServiceUnavailableError if resp.status_code in (502, 503, 504) else TransportError
                    raise cls(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code >= 400:
                    raise BackendError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
                return resp.json()
            except (httpx.TransportError, TransportError) as exc:
                if attempt >= self.config.max_retries:
                    if isinstance(exc, TransportError):
                        raise
                    raise TransportError(f"{path}: {exc}") from exc
                delay = min(0.5 * (2 ** attempt), 30.0)
                logger.info("retrying %s after %s (attempt %d, sleeping %.1fs)", path, exc, attempt + 1, delay)
                self._sleep(delay)
                attempt += 1

    def complete(self, request: ChatRequest) -> ChatCompletion:
        fp = fingerprint(request)
        if self.cache is not None:
            hit = self.cache.get(fp)
            if hit is not None and (hit.tokens or not request.want_logprobs):
                return hit
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": r, "content": t} for r, t in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.stop_markers:
            payload["stop"] = list(request.stop_markers)
        if request.want_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = self.config.top_logprobs
        completion = parse_chat_response(self._post("/chat/completions", payload))
        if self.cache is not None and completion.finish_reason in ("stop", "length"):
            self.cache.put(fp, completion)
        return completion

    def embed_raw(self, texts):
        model = self.config.embedding_model or self.config.model_name
        data = self._post("/embeddings", {"model": model, "input": list(texts)})
        rows = sorted(data.get("data", []), key=lambda d: d.get("index", 0))
        return [row["embedding"] for row in rows]


def parse_chat_response(data: Mapping) -> ChatCompletion:
    """Read text, finish reason and token logprobs from an OpenAI-style response body."""
    try:
        choice = data["choices"][0]
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"malformed chat response: {str(data)[:200]}") from exc
    message = choice.get("message") or {}
    text = message.get("content") or ""
    reason = choice.get("finish_reason") or "stop"
    if message.get("refusal"):
        reason, text = "refusal", message["refusal"]
    if reason not in FINISH_REASONS:
        reason = "stop"
    tokens = []
    for entry in ((choice.get("logprobs") or {}).get("content") or []):
        tokens.append(TokenLogProb(entry.get("token", ""), min(float(entry.get("logprob", 0.0)), 0.0)))
    completion = ChatCompletion(text, tuple(tokens), reason)
    if tokens and not completion.tokens_consistent():
        logger.debug("token stream does not concatenate to the message text; alignment falls back to offsets")
    return completion


# ---------------------------------------------------------------------------
# confidence
# ---------------------------------------------------------------------------


def first_token_confidence(completion: ChatCompletion, label_text: str, start: int | None = None,
                           strict: bool = False) -> float:
    """Probability of the first token of ``label_text`` inside ``completion``.

    ``start`` is the label's character offset in ``completion.text``; by default the last
    standalone occurrence is used.  When no token begins exactly at ``start`` the token
    whose span covers that character is used instead (``strict=True`` raises
    :class:`AlignmentError` rather than falling back).
    """
    if not completion.tokens:
        raise NoLogprobsError("completion carries no token logprobs")
    if start is None:
        hits = [m.start() for m in re.finditer(rf"(?<![A-Za-z]){re.escape(label_text)}(?![A-Za-z])",
                                               completion.text)]
        if not hits:
            raise AlignmentError(f"label {label_text!r} not found in completion text")
        start = hits[-1]
    elif completion.text[start:start + len(label_text)] != label_text:
        raise AlignmentError(f"label {label_text!r} is not at offset {start}")
    pos = 0
    covering = None
    for tok in completion.tokens:
        end = pos + len(tok.token_text)
        if pos == start and tok.token_text:
            return tok.prob
        if covering is None and pos <= start < end:
            covering = tok
        pos = end
    if covering is None:
        raise AlignmentError(f"no token covers offset {start}")
    if strict:
        raise AlignmentError(f"label starts inside token {covering.token_text!r}")
    return covering.prob
