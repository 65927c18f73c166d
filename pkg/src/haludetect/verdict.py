"""Judgment over a finished reasoning trace, plus summary segmentation and composition."""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass

from .errors import AlignmentError, NoLabelError, NoLogprobsError, RefusalError
from .gateway import Backend, ChatRequest, chat, first_token_confidence
from .prompt_library import PromptLibrary, render, select_template
from .query_engine import ReasoningTrace

logger = logging.getLogger(__name__)

CORRECT = "CORRECT"
INCORRECT = "INCORRECT"
INCONCLUSIVE = "INCONCLUSIVE"
LABELS = (CORRECT, INCORRECT, INCONCLUSIVE)

SEGMENT_MAX_WORDS = 30

# longest alternatives first so INCORRECT is never read as CORRECT
_LABEL_RE = re.compile(r"(?<![A-Za-z])(INCONCLUSIVE|INCORRECT|CORRECT)(?![A-Za-z])")
_SENTENCE_END_RE = re.compile(r"(?<=[.!?])\s+")

_STOP = {"qa": ("\n#Question#",), "summary": ("\n#Summary#",)}


@dataclass(frozen=True)
class Judgment:
    label: str
    confidence: float
    rationale: str
    form: str
    abstained: bool = False
    note: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown judgment label {self.label!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = {"form": self.form, "label": self.label, "confidence": self.confidence,
             "rationale": self.rationale, "abstained": self.abstained}
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Judgment:
        return cls(d["label"], float(d["confidence"]), d.get("rationale", ""), d["form"],
                   bool(d.get("abstained", False)), d.get("note", ""))


def find_label(text: str) -> tuple[str, int]:
    """Last standalone uppercase label in ``text`` and its character offset."""
    last = None
    for last in _LABEL_RE.finditer(text):
        pass
    if last is None:
        raise NoLabelError(f"no judgment label in {text[-120:]!r}")
    return last.group(1), last.start()


def parse_label(text: str) -> str:
    return find_label(text)[0]


def judge(question: str, answer: str, trace: ReasoningTrace, backend: Backend,
          library: PromptLibrary | None = None, task: str = "qa", max_tokens: int = 512) -> Judgment:
    """One chat call with logprobs; never raises for refusals or unparseable output."""
    template = select_template(task, "judge", trace.form, library=library)
    qk = trace.query_knowledge_text()
    if task == "qa":
        bindings = {"question": question, "answer": answer, "query_knowledge": qk}
    else:
        bindings = {"summary": answer, "query_knowledge": qk}
    prompt = render(template, bindings)
    request = ChatRequest(prompt.messages, max_tokens=max_tokens, stop_markers=_STOP[task], want_logprobs=True)
    try:
        completion = chat(backend, request)
    except RefusalError as exc:
        return Judgment(INCONCLUSIVE, 0.0, exc.text, trace.form, abstained=True, note="refusal")
    text = completion.text
    try:
        label, start = find_label(text)
    except NoLabelError:
        return Judgment(INCONCLUSIVE, 0.0, text.strip(), trace.form, abstained=True, note="no label")
    note = ""
    try:
        confidence = first_token_confidence(completion, label, start)
    except (NoLogprobsError, AlignmentError) as exc:
        # without token probabilities the label is taken at face value
        logger.warning("judgment confidence unavailable (%s); using 1.0", exc)
        confidence, note = 1.0, f"confidence unavailable: {type(exc).__name__}"
    return Judgment(label, confidence, text.strip(), trace.form, note=note)


def segment_summary(summary: str, max_words: int = SEGMENT_MAX_WORDS) -> list[str]:
    """Pack whole sentences into segments of at most ``max_words`` words.

    A sentence longer than the limit is cut every ``max_words`` words and its pieces
    are packed like sentences, so a short tail can share a segment with what follows.
    """
    if max_words < 1:
        raise ValueError("max_words must be >= 1")
    pieces: list[list[str]] = []
    for sentence in _SENTENCE_END_RE.split(summary.strip()):
        words = sentence.split()
        pieces.extend(words[i:i + max_words] for i in range(0, len(words), max_words))
    segments: list[list[str]] = []
    for piece in pieces:
        if segments and len(segments[-1]) + len(piece) <= max_words:
            segments[-1].extend(piece)
        else:
            segments.append(list(piece))
    return [" ".join(s) for s in segments]


def compose_summary_verdict(segment_labels: Sequence[str]) -> str:
    if not segment_labels:
        raise ValueError("need at least one segment judgment")
    for label in segment_labels:
        if label not in LABELS:
            raise ValueError(f"unknown judgment label {label!r}")
    # an undecided segment cannot be supported by the document
    return "hallucinated" if any(l != CORRECT for l in segment_labels) else "faithful"
