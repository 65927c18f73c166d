"""Per-item orchestration and batch runs.

QA items go through the specificity check first; only answers that name something
are fact-checked. Fact checking runs the reasoning loop and a judgment once per
knowledge form, then fuses the two judgments. Summaries skip the specificity check,
are cut into short segments and every segment is fact-checked against a dense index
over its own document.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

from .aggregator import Thresholds, aggregate
from .errors import HaluDetectError
from .evaluator import DatasetItem
from .fabrication import ExtractionResult, check_specificity
from .gateway import Backend, CountingBackend, write_atomic
from .knowledge import KnowledgeForge
from .prompt_library import FORMS, FORMULATIONS, PromptLibrary
from .query_engine import DEFAULT_MAX_STEPS, ReasoningTrace, run_reasoning
from .retrieval import (
    QA_TOP_K,
    SUMMARY_TOP_K,
    DenseIndex,
    IndexRetriever,
    OffTheShelfRetriever,
    Retriever,
    ServiceRetriever,
    build_index,
    chunk_document,
)
from .verdict import CORRECT, INCONCLUSIVE, INCORRECT, Judgment, compose_summary_verdict, judge, segment_summary

logger = logging.getLogger(__name__)

STAGES = ("extraction", "query", "retrieval", "optimize", "judge")
FINAL_BY_LABEL = {INCORRECT: "hallucinated", CORRECT: "faithful", INCONCLUSIVE: "abstain"}
KNOWLEDGE_SOURCES = ("off_the_shelf", "retrieval")


@dataclass(frozen=True)
class DetectConfig:
    task: str = "qa"
    forms: tuple[str, ...] = FORMS
    base_form: str = "unstructured"
    mode: str = "combined"
    knowledge_source: str = "retrieval"
    k: int | None = None
    max_steps: int = DEFAULT_MAX_STEPS
    thresholds: Thresholds | None = None
    max_knowledge_chars: int | None = None

    def __post_init__(self):
        if self.task not in ("qa", "summary"):
            raise ValueError(f"unknown task {self.task!r}")
        if not self.forms or any(f not in FORMS for f in self.forms) or len(set(self.forms)) != len(self.forms):
            raise ValueError(f"forms must be a non-empty subset of {FORMS}")
        if self.base_form not in FORMS:
            raise ValueError(f"unknown base form {self.base_form!r}")
        if len(self.forms) == 2 and self.thresholds is not None and self.thresholds.base_form != self.base_form:
            raise ValueError("thresholds were calibrated for a different base form")
        if self.mode not in FORMULATIONS:
            raise ValueError(f"unknown formulation mode {self.mode!r}")
        if self.knowledge_source not in KNOWLEDGE_SOURCES:
            raise ValueError(f"unknown knowledge source {self.knowledge_source!r}")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def top_k(self) -> int:
        return self.k or (QA_TOP_K if self.task == "qa" else SUMMARY_TOP_K)

    @property
    def effective_thresholds(self) -> Thresholds:
        # uncalibrated: fall back to the supplement only when the base is INCONCLUSIVE
        return self.thresholds or Thresholds(1.0, 1.0, self.base_form)


@dataclass
class FormResult:
    trace: ReasoningTrace
    judgment: Judgment


@dataclass
class SegmentResult:
    text: str
    per_form: dict[str, FormResult]
    label: str


@dataclass
class DetectionRecord:
    item_id: str
    task: str
    gold: str | None
    final: str
    final_label: str | None = None
    reason: str = ""
    phase1: ExtractionResult | None = None
    per_form: dict[str, FormResult] = field(default_factory=dict)
    segments: list[SegmentResult] = field(default_factory=list)
    call_counts: dict[str, int] = field(default_factory=dict)

    def to_result_dict(self) -> dict:
        d = {
            "item_id": self.item_id,
            "task": self.task,
            "gold": self.gold,
            "final": self.final,
            "final_label": self.final_label,
            "reason": self.reason,
            "phase1": self.phase1.to_dict() if self.phase1 else None,
            "call_counts": dict(self.call_counts),
        }
        if self.task == "qa":
            d["judgments"] = {f: r.judgment.to_dict() for f, r in self.per_form.items()}
        else:
            d["segments"] = [
                {"text": s.text, "label": s.label,
                 "judgments": {f: r.judgment.to_dict() for f, r in s.per_form.items()}}
                for s in self.segments
            ]
        return d

    def trace_dicts(self) -> list[dict]:
        out = []
        for f, r in self.per_form.items():
            out.append({"item_id": self.item_id, "segment": None, "form": f,
                        "trace": r.trace.to_dict(), "judgment": r.judgment.to_dict()})
        for i, s in enumerate(self.segments):
            for f, r in s.per_form.items():
                out.append({"item_id": self.item_id, "segment": i, "form": f,
                            "trace": r.trace.to_dict(), "judgment": r.judgment.to_dict()})
        return out


class _CountingRetriever(Retriever):
    def __init__(self, inner: Retriever, counts: dict, lock: threading.Lock):
        self.inner, self.counts, self.lock = inner, counts, lock

    def retrieve(self, query_text):
        with self.lock:
            self.counts["retrieval"] += 1
        return self.inner.retrieve(query_text)


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


class Detector:
    """Runs detection for items with a fixed backend, configuration and prompt library.

    ``search_client`` serves QA retrieval; ``index_provider(item)`` may supply a prebuilt
    document index for summaries (otherwise one is built and cached per document).
    """

    def __init__(self, backend: Backend, config: DetectConfig, library: PromptLibrary | None = None,
                 search_client=None, index_provider: Callable[[DatasetItem], DenseIndex | None] | None = None):
        self.backend = backend
        self.config = config
        self.library = library
        self.search_client = search_client
        self.index_provider = index_provider
        self._indexes: dict[str, DenseIndex] = {}
        self._index_lock = threading.Lock()
        if config.task == "qa" and config.knowledge_source == "retrieval" and search_client is None:
            raise ValueError("retrieval-backed QA needs a search client")

    # -- single items ------------------------------------------------------

    def detect(self, item: DatasetItem) -> DetectionRecord:
        return self.detect_qa(item) if self.config.task == "qa" else self.detect_summary(item)

    def _counting(self, counts: dict, lock: threading.Lock):
        return {s: CountingBackend(self.backend, counts, s, lock) for s in ("extraction", "query", "optimize", "judge")}

    def _run_form(self, question: str, answer: str, form: str, retriever: Retriever, backends: dict,
                  task: str) -> FormResult:
        forge = KnowledgeForge(backends["optimize"], task, self.library, self.config.max_knowledge_chars)
        trace = run_reasoning(question, answer, form, self.config.mode, retriever, forge, backends["query"],
                              self.library, self.config.max_steps, task)
        if trace.terminated == "refusal":
            judgment = Judgment(INCONCLUSIVE, 0.0, "", form, abstained=True, note="reasoning refused")
        else:
            judgment = judge(question, answer, trace, backends["judge"], self.library, task)
        return FormResult(trace, judgment)

    def _fuse(self, per_form: dict[str, FormResult]) -> Judgment:
        if len(per_form) == 1:
            return next(iter(per_form.values())).judgment
        t = self.config.effective_thresholds
        return aggregate(per_form[t.base_form].judgment, per_form[t.supplement_form].judgment, t)

    def detect_qa(self, item: DatasetItem) -> DetectionRecord:
        counts = dict.fromkeys(STAGES, 0)
        lock = threading.Lock()
        backends = self._counting(counts, lock)
        record = DetectionRecord(item.id, "qa", item.gold, "abstain", call_counts=counts)
        try:
            record.phase1 = check_specificity(item.question, item.candidate, backends["extraction"], self.library)
            if record.phase1.abstained:
                record.reason = "extraction refused"
                return record
            if record.phase1.is_none:
                record.final, record.reason = "hallucinated", "no specific answer"
                return record
            if self.config.knowledge_source == "off_the_shelf":
                inner = OffTheShelfRetriever(item.knowledge or "", item.id)
            else:
                inner = ServiceRetriever(self.search_client, self.config.top_k)
            retriever = _CountingRetriever(inner, counts, lock)
            forms = list(self.config.forms)
            with ThreadPoolExecutor(max_workers=len(forms)) as pool:
                results = list(pool.map(
                    lambda f: self._run_form(item.question, item.candidate, f, retriever, backends, "qa"), forms))
            record.per_form = dict(zip(forms, results))
            fused = self._fuse(record.per_form)
        except HaluDetectError as exc:
            logger.warning("item %s: %s: %s", item.id, type(exc).__name__, exc)
            record.final, record.reason = "abstain", f"{type(exc).__name__}: {exc}"
            return record
        record.final_label = fused.label
        record.final = FINAL_BY_LABEL[fused.label]
        return record

    def _index_for(self, item: DatasetItem) -> DenseIndex:
        if self.index_provider is not None:
            idx = self.index_provider(item)
            if idx is not None:
                return idx
        key = hashlib.sha256(item.question.encode("utf-8")).hexdigest()
        with self._index_lock:
            idx = self._indexes.get(key)
            if idx is None:
                idx = build_index(chunk_document(key[:12], item.question), self.backend)
                self._indexes[key] = idx
        return idx

    def detect_summary(self, item: DatasetItem) -> DetectionRecord:
        counts = dict.fromkeys(STAGES, 0)
        lock = threading.Lock()
        backends = self._counting(counts, lock)
        record = DetectionRecord(item.id, "summary", item.gold, "abstain", call_counts=counts)
        try:
            index = self._index_for(item)
            retriever = _CountingRetriever(IndexRetriever(index, self.backend, self.config.top_k), counts, lock)
            segments = segment_summary(item.candidate)
            forms = list(self.config.forms)
            jobs = [(s, f) for s in range(len(segments)) for f in forms]
            with ThreadPoolExecutor(max_workers=min(len(jobs), 8)) as pool:
                results = list(pool.map(
                    lambda j: self._run_form("", segments[j[0]], j[1], retriever, backends, "summary"), jobs))
            for s, text in enumerate(segments):
                per_form = {f: results[s * len(forms) + i] for i, f in enumerate(forms)}
                record.segments.append(SegmentResult(text, per_form, self._fuse(per_form).label))
        except HaluDetectError as exc:
            logger.warning("item %s: %s: %s", item.id, type(exc).__name__, exc)
            record.final, record.reason = "abstain", f"{type(exc).__name__}: {exc}"
            return record
        record.final = compose_summary_verdict([s.label for s in record.segments])
        record.final_label = INCORRECT if record.final == "hallucinated" else CORRECT
        return record

    # -- batches -----------------------------------------------------------

    def run(self, items: Sequence[DatasetItem], workers: int = 1,
            done: dict[int, DetectionRecord] | None = None) -> list[DetectionRecord]:
        """Detect every item; output keeps input order whatever the worker count.

        Finished records land in ``done`` (index -> record) as they complete, so a caller
        interrupted mid-run can still write what was finished.
        """
        if workers < 1:
            raise ValueError("workers must be >= 1")
        done = {} if done is None else done
        if workers == 1:
            for i, item in enumerate(items):
                done[i] = self.detect(item)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(self.detect, item): i for i, item in enumerate(items)}
                try:
                    for fut in as_completed(futures):
                        done[futures[fut]] = fut.result()
                except KeyboardInterrupt:
                    for fut in futures:
                        fut.cancel()
                    raise
        return [done[i] for i in range(len(items))]


def write_outputs(records: Sequence[DetectionRecord], out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = "".join(_dumps(r.to_result_dict()) + "\n" for r in records)
    traces = "".join(_dumps(t) + "\n" for r in records for t in r.trace_dicts())
    write_atomic(out / "results.jsonl", results)
    write_atomic(out / "traces.jsonl", traces)
    return out / "results.jsonl", out / "traces.jsonl"
