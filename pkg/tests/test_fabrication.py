from __future__ import annotations

import pytest

from haludetect.fabrication import ExtractionResult, check_specificity, parse_extraction
from haludetect.gateway import ChatCompletion


@pytest.mark.parametrize("text", [
    "Therefore, the corresponding specific language entity in this answer is NONE.",
    "NONE",
    "entity: NONE, as no year is given",
    "(NONE)",
])
def test_none_detected(text):
    r = parse_extraction(text)
    assert r.is_none and r.extracted_entity is None


@pytest.mark.parametrize("text", [
    "The answer provides this author as William Styron.",
    "Nonetheless the answer names 1960.",
    "NONEXISTENT is not a marker",
    "none of that matters; the answer is 1960",
    "xNONE",
])
def test_none_not_detected(text):
    r = parse_extraction(text)
    assert not r.is_none and r.extracted_entity == text.strip()


def test_invariant_enforced():
    with pytest.raises(ValueError):
        ExtractionResult("x", None, False)
    with pytest.raises(ValueError):
        ExtractionResult("x", "e", True)
    ExtractionResult("x", None, False, abstained=True)


def test_roundtrip():
    r = parse_extraction(" The answer provides Mexico. ")
    assert ExtractionResult.from_dict(r.to_dict()) == r


def test_check_specificity_renders_and_truncates(replies):
    backend, fn = replies(" The answer provides 1960.\n#Question#: leaked continuation")
    r = check_specificity("When was it published?", "1960", backend)
    assert r.extracted_entity == "The answer provides 1960."
    req = fn.requests[0]
    assert req.stop_markers == ("\n#Question#",) and req.temperature == 0
    assert req.messages[-1][1].endswith("#Question#: When was it published?\n#Answer#: 1960\n#Extraction#:")


def test_refusal_abstains(replies):
    backend, _ = replies(ChatCompletion("cannot help", (), "refusal"))
    r = check_specificity("q", "a", backend)
    assert r.abstained and not r.is_none and r.raw_text == "cannot help"


def test_empty_inputs_rejected(replies):
    backend, _ = replies()
    with pytest.raises(ValueError):
        check_specificity(" ", "a", backend)
    with pytest.raises(ValueError):
        check_specificity("q", "", backend)
