"""Condense retrieved passages into the answer to one sub-query.

The model answers either in prose (unstructured) or as ``(subject, predicate, object)``
triplets (structured), or says that nothing relevant was found.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

from .errors import RefusalError, TripletParseError
from .gateway import Backend, ChatRequest, chat
from .prompt_library import FORMS, PromptLibrary, render, select_template
from .retrieval import Passage, render_passages

logger = logging.getLogger(__name__)

NO_INFORMATION = "No specific information is available."
VARIANTS = ("unstructured", "structured", "no_information")

STOP_MARKERS = ("#Query#",)

_OPEN_QUOTES = {'"': '"', "“": "”"}


@dataclass(frozen=True)
class Triplet:
    subject: str
    predicate: str
    object: str

    def __post_init__(self):
        if not (self.subject.strip() and self.predicate.strip() and self.object.strip()):
            raise ValueError("triplet fields must be non-empty")

    def render(self) -> str:
        return f"({self.subject}, {self.predicate}, {self.object})"


@dataclass(frozen=True)
class OptimizedKnowledge:
    variant: str
    raw_text: str
    triplets: tuple[Triplet, ...] = ()
    note: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown knowledge variant {self.variant!r}")
        if self.variant == "structured" and not self.triplets:
            raise ValueError("structured knowledge needs at least one triplet")
        if self.variant != "structured" and self.triplets:
            raise ValueError("only structured knowledge carries triplets")
        if (self.variant == "no_information") != (self.raw_text == NO_INFORMATION):
            raise ValueError("no_information holds exactly when raw_text is the sentinel")

    @classmethod
    def none(cls, note: str = "") -> OptimizedKnowledge:
        return cls("no_information", NO_INFORMATION, (), note)

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "raw_text": self.raw_text}
        if self.triplets:
            d["triplets"] = [[t.subject, t.predicate, t.object] for t in self.triplets]
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, d: dict) -> OptimizedKnowledge:
        triplets = tuple(Triplet(*t) for t in d.get("triplets", ()))
        return cls(d["variant"], d["raw_text"], triplets, d.get("note", ""))


def _split_groups(line: str) -> list[str]:
    """Contents of each top-level parenthesised group; text between groups must be commas/space."""
    groups, depth, quote, buf = [], 0, None, []
    for ch in line:
        if quote:
            buf.append(ch)
            if ch == quote:
                quote = None
            continue
        if ch in _OPEN_QUOTES and depth > 0:
            quote = _OPEN_QUOTES[ch]
            buf.append(ch)
        elif ch == "(":
            if depth > 0:
                buf.append(ch)
            depth += 1
        elif ch == ")":
            if depth == 0:
                raise TripletParseError(f"unbalanced ')' in {line!r}")
            depth -= 1
            if depth == 0:
                groups.append("".join(buf))
                buf = []
            else:
                buf.append(ch)
        elif depth > 0:
            buf.append(ch)
        elif ch not in ", \t":
            raise TripletParseError(f"text outside a triplet in {line!r}")
    if depth or quote:
        raise TripletParseError(f"unterminated group or quote in {line!r}")
    return groups


def _split_fields(group: str) -> list[str]:
    fields, depth, quote, buf = [], 0, None, []
    for ch in group:
        if quote:
            if ch == quote:
                quote = None
        elif ch in _OPEN_QUOTES:
            quote = _OPEN_QUOTES[ch]
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0 and len(fields) < 2:
            fields.append("".join(buf))
            buf = []
            continue
        buf.append(ch)
    fields.append("".join(buf))
    return [f.strip() for f in fields]


def parse_triplets(answer_line: str) -> list[Triplet]:
    """Parse ``(s, p, o), (s, p, o)``; commas past the second in a group belong to the object."""
    line = answer_line.strip()
    if not line.startswith("(") or not line.endswith(")"):
        raise TripletParseError(f"not a triplet list: {answer_line!r}")
    groups = _split_groups(line)
    if not groups:
        raise TripletParseError(f"no triplets in {answer_line!r}")
    out = []
    for g in groups:
        fields = _split_fields(g)
        if len(fields) < 3 or not all(fields):
            raise TripletParseError(f"triplet needs three non-empty fields: ({g})")
        out.append(Triplet(*fields))
    return out


def detect_no_information(answer_line: str) -> bool:
    def norm(s: str) -> str:
        return s.strip().strip("\"'“”").rstrip(".!?;: ").casefold()

    return norm(answer_line) == norm(NO_INFORMATION)


def interpret_answer(text: str, form: str) -> OptimizedKnowledge:
    line = next((l.strip() for l in text.split("\n") if l.strip()), "")
    if line.startswith("#Answer#:"):
        line = line[len("#Answer#:"):].strip()
    if not line or detect_no_information(line):
        return OptimizedKnowledge.none("" if line else "empty answer")
    if form == "structured":
        try:
            return OptimizedKnowledge("structured", line, tuple(parse_triplets(line)))
        except TripletParseError as exc:
            return OptimizedKnowledge("unstructured", line, (), f"triplet parse failed: {exc}")
    return OptimizedKnowledge("unstructured", line)


@dataclass
class KnowledgeForge:
    """Runs the optimisation prompt for one task and form against a backend."""

    backend: Backend
    task: str = "qa"
    library: PromptLibrary | None = None
    max_chars: int | None = None
    max_tokens: int = 256

    def optimize(self, sub_query: str, passages: Sequence[Passage], form: str) -> OptimizedKnowledge:
        if form not in FORMS:
            raise ValueError(f"unknown knowledge form {form!r}")
        if not passages:
            return OptimizedKnowledge.none("no passages retrieved")
        knowledge = render_passages(passages)
        if self.max_chars is not None and len(knowledge) > self.max_chars:
            knowledge = knowledge[: self.max_chars]
        template = select_template(self.task, "optimize", form, library=self.library)
        prompt = render(template, {"question": sub_query, "knowledge": knowledge})
        request = ChatRequest(prompt.messages, max_tokens=self.max_tokens, stop_markers=STOP_MARKERS)
        try:
            completion = chat(self.backend, request)
        except RefusalError as exc:
            logger.info("knowledge optimisation refused: %s", exc)
            return OptimizedKnowledge.none("abstained: refusal")
        return interpret_answer(completion.text, form)


def optimize(sub_query: str, passages: Sequence[Passage], form: str, backend: Backend,
             library: PromptLibrary | None = None, task: str = "qa") -> OptimizedKnowledge:
    return KnowledgeForge(backend, task, library).optimize(sub_query, passages, form)
