from __future__ import annotations

import json

import pytest

from haludetect.errors import MissingBindingError, TemplateIntegrityError, UnknownTemplateError
from haludetect.prompt_library import (
    NA,
    PROMPT_ROOT,
    PromptLibrary,
    all_combinations,
    build_manifest,
    default_library,
    derive_formulation,
    dump_template,
    parse_template,
    render,
    select_template,
    template_id,
    template_relpath,
)

EXPECTED_PLACEHOLDERS = {
    ("qa", "extraction"): {"question", "answer"},
    ("qa", "query"): {"question", "answer"},
    ("qa", "optimize"): {"question", "knowledge"},
    ("qa", "judge"): {"question", "answer", "query_knowledge"},
    ("summary", "query"): {"summary"},
    ("summary", "optimize"): {"question", "knowledge"},
    ("summary", "judge"): {"summary", "query_knowledge"},
}


def test_every_combination_is_shipped():
    lib = default_library()
    combos = list(all_combinations())
    assert len(combos) == 21 and len(lib.templates) == 21
    for combo in combos:
        tpl = lib.select(*combo)
        assert set(tpl.placeholders) == EXPECTED_PLACEHOLDERS[combo[:2]], combo


def test_manifest_matches_files():
    on_disk = json.loads((PROMPT_ROOT / "manifest.json").read_text(encoding="utf-8"))
    assert build_manifest() == on_disk


def test_single_formulation_files_are_derived_from_combined():
    lib = default_library()
    for task in ("qa", "summary"):
        for form in ("structured", "unstructured"):
            combined = lib.select(task, "query", form, "combined")
            for formulation in ("specific", "general"):
                tid = template_id(task, "query", form, formulation)
                assert derive_formulation(combined, formulation, tid) == lib.get(tid)


def test_derive_rewrites_only_query_lines():
    tpl = parse_template("=== system ===\nS\n=== demo ===\n#Query-1#: Is X Y? [What is X?]\n#Knowledge-1#: k [x]\n"
                         "=== body ===\n#Question#: {question}\n#Answer#: {answer}", "t")
    spec = derive_formulation(tpl, "specific", "t.s")
    gen = derive_formulation(tpl, "general", "t.g")
    assert spec.demonstrations[0] == "#Query-1#: Is X Y?\n#Knowledge-1#: k [x]"
    assert gen.demonstrations[0] == "#Query-1#: What is X?\n#Knowledge-1#: k [x]"


def test_parse_dump_roundtrip():
    lib = default_library()
    for tid, tpl in lib.templates.items():
        assert parse_template(dump_template(tpl), tid) == tpl


def test_render_layout():
    tpl = parse_template("=== system ===\nSYS\n=== demo ===\nD1\n=== demo:supplied ===\nD2\n"
                         "=== body ===\nQ: {question} {question}", "t")
    assert tpl.supplied_demonstrations == 1
    msgs = render(tpl, {"question": "why", "unused": "x"}).messages
    assert msgs == (("system", "SYS"), ("user", "D1\n\nD2\n\nQ: why why"))


def test_render_does_not_reexpand_bound_values():
    tpl = parse_template("=== body ===\n{question} / {answer}", "t")
    assert render(tpl, {"question": "{answer}", "answer": "a"}).user_text == "{answer} / a"


def test_render_missing_binding():
    tpl = select_template("qa", "judge", "structured")
    with pytest.raises(MissingBindingError) as ei:
        render(tpl, {"question": "q"})
    assert set(ei.value.names) == {"answer", "query_knowledge"}


def test_unknown_combinations():
    lib = default_library()
    with pytest.raises(UnknownTemplateError):
        lib.select("summary", "extraction")
    with pytest.raises(UnknownTemplateError):
        lib.select("qa", "judge", "structured", "combined")
    with pytest.raises(UnknownTemplateError):
        lib.select("qa", "query", "structured")
    with pytest.raises(UnknownTemplateError):
        lib.get("qa.nope")


def test_paths():
    assert template_relpath("qa", "extraction") == "qa/extraction/na/na.txt"
    assert template_relpath("qa", "query", "structured", "general") == "qa/query/structured/general.txt"
    assert template_id("qa", "optimize", "structured", NA) == "qa.optimize.structured"


def test_checksum_mismatch_detected(tmp_path):
    import shutil

    root = tmp_path / "prompts"
    shutil.copytree(PROMPT_ROOT, root)
    target = root / "qa" / "judge" / "structured" / "na.txt"
    target.write_text(target.read_text(encoding="utf-8") + "tampered\n", encoding="utf-8")
    with pytest.raises(TemplateIntegrityError):
        PromptLibrary.load(root)
    assert PromptLibrary.load(root, verify=False).get("qa.judge.structured").body.endswith("tampered")


def test_text_before_first_section_rejected():
    with pytest.raises(TemplateIntegrityError):
        parse_template("stray\n=== body ===\nx", "t")
    with pytest.raises(TemplateIntegrityError):
        parse_template("=== system ===\nx", "t")


def test_verbatim_demos_precede_supplied_ones():
    tpl = select_template("qa", "query", "structured", "combined")
    verbatim = tpl.demonstrations[: len(tpl.demonstrations) - tpl.supplied_demonstrations]
    assert verbatim[0].startswith("#Question#: In the midst of 17th-century")
    assert any("Bracero" in d for d in verbatim)
