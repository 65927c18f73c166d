"""Step-wise reasoning: the model proposes one-hop sub-queries, we answer them.

Each step is one chat call that stops before the model can write its own
``#Knowledge-k#`` line. If the completion holds a ``#Query-k#`` line we retrieve,
optimise the passages into the configured knowledge form and append the knowledge
line to the transcript; a completion with only a thought ends the loop.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass, field

from .errors import BackendError, FormatError, MalformedQueryError, RefusalError
from .gateway import Backend, ChatRequest, chat
from .knowledge import KnowledgeForge, OptimizedKnowledge
from .prompt_library import FORMS, FORMULATIONS, PromptLibrary, render, select_template
from .retrieval import Passage, Retriever, merge_formulation_results

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 8
TERMINATIONS = ("concluded", "max_steps", "refusal", "no_query", "error")
STOP_MARKERS = ("#Knowledge",)

_THOUGHT_RE = re.compile(r"#Thought-(\d+)#:[ \t]*")
_QUERY_RE = re.compile(r"^[ \t]*#Query-(\d+)#:[ \t]*(.*)$", re.MULTILINE)


@dataclass(frozen=True)
class SubQuery:
    specific_text: str | None
    general_text: str | None
    line: str = ""

    def __post_init__(self):
        if not (self.specific_text or self.general_text):
            raise ValueError("a sub-query needs a specific or a general text")

    def texts(self, mode: str) -> list[str]:
        """Query strings to send to retrieval under ``mode`` (one, or two for combined)."""
        if mode == "specific":
            return [self.specific_text or self.general_text]
        if mode == "general":
            return [self.general_text or self.specific_text]
        return [t for t in (self.specific_text, self.general_text) if t]

    def to_dict(self) -> dict:
        return {"specific": self.specific_text, "general": self.general_text, "line": self.line}

    @classmethod
    def from_dict(cls, d: dict) -> SubQuery:
        return cls(d.get("specific"), d.get("general"), d.get("line", ""))


def parse_query_line(line: str, mode: str = "combined") -> SubQuery:
    """Split ``specific [general]``.

    Without brackets the whole line is the query for the active mode; in combined mode
    it stands in for both formulations.
    """
    if mode not in FORMULATIONS:
        raise ValueError(f"unknown formulation mode {mode!r}")
    text = line.strip()
    if not text:
        raise MalformedQueryError("empty query line")
    open_at = text.find("[")
    if open_at < 0:
        if "]" in text:
            raise MalformedQueryError(f"unbalanced bracket in {line!r}")
        if mode == "specific":
            return SubQuery(text, None, text)
        if mode == "general":
            return SubQuery(None, text, text)
        return SubQuery(text, text, text)
    depth = 0
    close_at = -1
    for i in range(open_at, len(text)):
        if text[i] == "[":
            depth += 1
        elif text[i] == "]":
            depth -= 1
            if depth == 0:
                close_at = i
                break
    if close_at < 0 or "]" in text[:open_at]:
        raise MalformedQueryError(f"unbalanced bracket in {line!r}")
    specific = text[:open_at].strip() or None
    general = text[open_at + 1:close_at].strip() or None
    if specific is None and general is None:
        raise MalformedQueryError(f"empty query in {line!r}")
    if mode == "combined":
        specific = specific or general
        general = general or specific
    return SubQuery(specific, general, text)


@dataclass(frozen=True)
class Continue:
    thought: str
    query: SubQuery
    emitted: str
    notes: tuple[str, ...] = ()


@dataclass(frozen=True)
class Terminate:
    thought: str
    emitted: str


def parse_step(text: str, mode: str) -> Continue | Terminate:
    """Interpret one completion. Raises :class:`FormatError` when no marker is present."""
    queries = list(_QUERY_RE.finditer(text))
    thought_m = _THOUGHT_RE.search(text)
    if queries:
        q = queries[0]
        thought = ""
        if thought_m and thought_m.start() < q.start():
            thought = text[thought_m.end():q.start()].strip()
        notes = ()
        if len(queries) > 1:
            notes = (f"{len(queries)} query lines in one completion; used the first",)
        emitted = text[:q.end()].strip() + "\n"
        return Continue(thought, parse_query_line(q.group(2), mode), emitted, notes)
    if thought_m:
        return Terminate(text[thought_m.end():].strip(), text.strip() + "\n")
    raise FormatError(f"no #Thought-k# or #Query-k# marker in {text[:120]!r}")


@dataclass(frozen=True)
class ReasoningStep:
    k: int
    thought: str
    query: SubQuery | None = None
    knowledge: OptimizedKnowledge | None = None

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "thought": self.thought,
            "query": self.query.to_dict() if self.query else None,
            "knowledge": self.knowledge.to_dict() if self.knowledge else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ReasoningStep:
        return cls(
            d["k"],
            d["thought"],
            SubQuery.from_dict(d["query"]) if d.get("query") else None,
            OptimizedKnowledge.from_dict(d["knowledge"]) if d.get("knowledge") else None,
        )


@dataclass
class ReasoningTrace:
    question: str
    answer: str
    form: str
    mode: str = "combined"
    steps: list[ReasoningStep] = field(default_factory=list)
    terminated: str = "concluded"
    notes: list[str] = field(default_factory=list)

    def query_knowledge_text(self) -> str:
        """Query/knowledge pairs for the judgment prompt; thoughts are left out."""
        lines = []
        for s in self.steps:
            if s.query is not None and s.knowledge is not None:
                lines.append(f"#Query-{s.k}#: {s.query.line}")
                lines.append(f"#Knowledge-{s.k}#: {s.knowledge.raw_text}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "answer": self.answer,
            "form": self.form,
            "mode": self.mode,
            "steps": [s.to_dict() for s in self.steps],
            "terminated": self.terminated,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ReasoningTrace:
        return cls(d["question"], d["answer"], d["form"], d.get("mode", "combined"),
                   [ReasoningStep.from_dict(s) for s in d["steps"]], d["terminated"], list(d.get("notes", ())))


def next_step(prompt_messages: Sequence[tuple[str, str]], transcript: str, backend: Backend,
              mode: str = "combined", max_tokens: int = 512) -> Continue | Terminate:
    """One chat call continuing ``transcript`` after the rendered query prompt."""
    messages = list(prompt_messages)
    role, text = messages[-1]
    messages[-1] = (role, text + "\n" + transcript)
    completion = chat(backend, ChatRequest(tuple(messages), max_tokens=max_tokens, stop_markers=STOP_MARKERS))
    return parse_step(completion.text, mode)


def run_reasoning(question: str, answer: str, form: str, mode: str, retriever: Retriever,
                  forge: KnowledgeForge, backend: Backend, library: PromptLibrary | None = None,
                  max_steps: int = DEFAULT_MAX_STEPS, task: str = "qa") -> ReasoningTrace:
    """Run the loop for one knowledge form. Step errors end the trace instead of raising.

    For summaries ``answer`` is the summary segment and ``question`` is ignored.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if form not in FORMS:
        raise ValueError(f"unknown knowledge form {form!r}")
    template = select_template(task, "query", form, mode, library=library)
    bindings = {"question": question, "answer": answer} if task == "qa" else {"summary": answer}
    prompt = render(template, bindings)
    trace = ReasoningTrace(question, answer, form, mode)
    transcript = ""
    for k in range(1, max_steps + 1):
        try:
            step = next_step(prompt.messages, transcript, backend, mode)
        except RefusalError as exc:
            trace.steps.append(ReasoningStep(k, ""))
            trace.terminated = "refusal"
            trace.notes.append(f"step {k}: refused ({exc})")
            break
        except (FormatError, MalformedQueryError) as exc:
            trace.steps.append(ReasoningStep(k, ""))
            trace.terminated = "no_query"
            trace.notes.append(f"step {k}: {exc}")
            break
        except BackendError as exc:
            trace.steps.append(ReasoningStep(k, ""))
            trace.terminated = "error"
            trace.notes.append(f"step {k}: {type(exc).__name__}: {exc}")
            break
        if isinstance(step, Terminate):
            trace.steps.append(ReasoningStep(k, step.thought))
            trace.terminated = "concluded"
            break
        trace.notes.extend(f"step {k}: {n}" for n in step.notes)
        try:
            hits: list[Passage] = []
            for text in step.query.texts(mode):
                hits = merge_formulation_results(hits, retriever.retrieve(text))
            knowledge = forge.optimize(step.query.line, hits, form)
        except BackendError as exc:
            knowledge = OptimizedKnowledge.none(f"retrieval failed: {type(exc).__name__}")
            trace.steps.append(ReasoningStep(k, step.thought, step.query, knowledge))
            trace.terminated = "error"
            trace.notes.append(f"step {k}: {type(exc).__name__}: {exc}")
            break
        trace.steps.append(ReasoningStep(k, step.thought, step.query, knowledge))
        transcript += step.emitted + f"#Knowledge-{k}#: {knowledge.raw_text}\n"
    else:
        trace.terminated = "max_steps"
    return trace
