"""First-phase check: does the answer commit to the specific thing the question asks for?

The model is asked to extract the entity the question seeks from the answer. If it
reports ``NONE`` the answer is vague, parrots the question or otherwise dodges, and the
item is labelled a hallucination without any fact checking.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from .errors import RefusalError
from .gateway import Backend, ChatRequest, chat
from .prompt_library import PromptLibrary, render, select_template

logger = logging.getLogger(__name__)

_NONE_RE = re.compile(r"(?<![A-Za-z])NONE(?![A-Za-z])")

STOP_MARKERS = ("\n#Question#",)


@dataclass(frozen=True)
class ExtractionResult:
    raw_text: str
    extracted_entity: str | None
    is_none: bool
    abstained: bool = False

    def __post_init__(self):
        if self.is_none != (self.extracted_entity is None) and not self.abstained:
            raise ValueError("is_none must hold exactly when no entity was extracted")

    def to_dict(self) -> dict:
        return {
            "raw_text": self.raw_text,
            "extracted_entity": self.extracted_entity,
            "is_none": self.is_none,
            "abstained": self.abstained,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExtractionResult:
        return cls(d["raw_text"], d.get("extracted_entity"), bool(d["is_none"]), bool(d.get("abstained", False)))


def parse_extraction(raw_text: str) -> ExtractionResult:
    """``NONE`` as a standalone uppercase token anywhere in the text means no entity.

    Otherwise the whole (stripped) extraction is kept as the entity; isolating the
    entity itself is not needed downstream.
    """
    if _NONE_RE.search(raw_text):
        return ExtractionResult(raw_text, None, True)
    return ExtractionResult(raw_text, raw_text.strip(), False)


def check_specificity(question: str, answer: str, backend: Backend,
                      library: PromptLibrary | None = None, max_tokens: int = 256) -> ExtractionResult:
    if not question.strip() or not answer.strip():
        raise ValueError("question and answer must be non-empty")
    template = select_template("qa", "extraction", library=library)
    prompt = render(template, {"question": question, "answer": answer})
    request = ChatRequest(prompt.messages, max_tokens=max_tokens, stop_markers=STOP_MARKERS)
    try:
        completion = chat(backend, request)
    except RefusalError as exc:
        # a refusal is not evidence of a vague answer
        logger.info("extraction refused: %s", exc)
        return ExtractionResult(exc.text, None, False, abstained=True)
    return parse_extraction(completion.text.strip())
