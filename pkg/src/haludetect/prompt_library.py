"""Few-shot prompt templates shipped as text assets.

Layout under ``prompts/``::

    <task>/<stage>/<form>/<formulation>.txt     ("na" stands in for "not applicable")
    manifest.json                                ids, relative paths, sha256, demo counts

A template file is split into sections by marker lines::

    === system ===
    === demo ===            (one per demonstration; ``demo:supplied`` marks demos
    === body ===             written for this package rather than copied from a source)

Rendering yields two messages: the system text, then every demonstration followed by
the body, separated by blank lines.  Only the body carries placeholders.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from .errors import MissingBindingError, TemplateIntegrityError, UnknownTemplateError

PLACEHOLDERS = ("question", "answer", "knowledge", "query_knowledge", "summary", "document")
TASKS = ("qa", "summary")
STAGES = ("extraction", "query", "optimize", "judge")
FORMS = ("structured", "unstructured")
FORMULATIONS = ("specific", "general", "combined")
NA = "n/a"

PROMPT_ROOT = Path(__file__).with_name("prompts")

_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")
_SECTION_RE = re.compile(r"^=== (system|demo|demo:supplied|body) ===$")
_QUERY_LINE_RE = re.compile(r"^(#Query-\d+#: )(.*?)\s*\[(.*)\]\s*$")


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    system_text: str
    body: str
    demonstrations: tuple[str, ...] = ()
    supplied_demonstrations: int = 0

    @property
    def placeholders(self) -> tuple[str, ...]:
        seen = []
        for m in _PLACEHOLDER_RE.finditer(self.body):
            if m.group(1) not in seen:
                seen.append(m.group(1))
        return tuple(seen)


@dataclass(frozen=True)
class RenderedPrompt:
    messages: tuple[tuple[str, str], ...]

    @property
    def user_text(self) -> str:
        return self.messages[-1][1]


def render(template: PromptTemplate, bindings: dict[str, str]) -> RenderedPrompt:
    missing = [name for name in template.placeholders if name not in bindings]
    if missing:
        raise MissingBindingError(*missing)
    body = _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template.body)
    user = "\n\n".join(list(template.demonstrations) + [body])
    messages = []
    if template.system_text:
        messages.append(("system", template.system_text))
    messages.append(("user", user))
    return RenderedPrompt(tuple(messages))


def template_id(task: str, stage: str, form: str = NA, formulation: str = NA) -> str:
    parts = [task, stage]
    if form != NA:
        parts.append(form)
    if formulation != NA:
        parts.append(formulation)
    return ".".join(parts)


def template_relpath(task: str, stage: str, form: str = NA, formulation: str = NA) -> str:
    def slot(v):
        return "na" if v == NA else v
    return f"{task}/{stage}/{slot(form)}/{slot(formulation)}.txt"


def validate_combination(task: str, stage: str, form: str, formulation: str) -> None:
    ok = task in TASKS and stage in STAGES
    if ok and stage == "extraction":
        # summaries go straight to factual checking
        ok = task == "qa" and form == NA and formulation == NA
    elif ok and stage == "query":
        ok = form in FORMS and formulation in FORMULATIONS
    elif ok:
        ok = form in FORMS and formulation == NA
    if not ok:
        raise UnknownTemplateError(f"no template for ({task}, {stage}, {form}, {formulation})")


def parse_template(text: str, template_id: str = "") -> PromptTemplate:
    sections: list[tuple[str, list[str]]] = []
    for line in text.split("\n"):
        m = _SECTION_RE.match(line)
        if m:
            sections.append((m.group(1), []))
        elif sections:
            sections[-1][1].append(line)
        elif line.strip():
            raise TemplateIntegrityError(f"{template_id}: text before the first section marker")
    system, body, demos, supplied = "", None, [], 0
    for kind, lines in sections:
        content = "\n".join(lines).rstrip("\n")
        if kind == "system":
            system = content
        elif kind == "body":
            body = content
        else:
            demos.append(content)
            supplied += kind == "demo:supplied"
    if body is None:
        raise TemplateIntegrityError(f"{template_id}: missing body section")
    return PromptTemplate(template_id, system, body, tuple(demos), supplied)


def dump_template(template: PromptTemplate) -> str:
    out = ["=== system ===", template.system_text]
    n_verbatim = len(template.demonstrations) - template.supplied_demonstrations
    for i, demo in enumerate(template.demonstrations):
        out += ["=== demo ===" if i < n_verbatim else "=== demo:supplied ===", demo]
    out += ["=== body ===", template.body]
    return "\n".join(out) + "\n"


def derive_formulation(template: PromptTemplate, formulation: str, new_id: str) -> PromptTemplate:
    """Rewrite demo query lines of a combined-query template for one formulation.

    ``"specific"`` keeps the text before the bracket, ``"general"`` keeps the bracketed
    text; every other line is untouched.
    """
    if formulation == "combined":
        return PromptTemplate(new_id, template.system_text, template.body,
                              template.demonstrations, template.supplied_demonstrations)

    def fix(line: str) -> str:
        m = _QUERY_LINE_RE.match(line)
        if not m:
            return line
        return m.group(1) + (m.group(2) if formulation == "specific" else m.group(3))

    demos = tuple("\n".join(fix(l) for l in d.split("\n")) for d in template.demonstrations)
    return PromptTemplate(new_id, template.system_text, template.body, demos,
                          template.supplied_demonstrations)


def all_combinations():
    yield ("qa", "extraction", NA, NA)
    for task in TASKS:
        for form in FORMS:
            for formulation in FORMULATIONS:
                yield (task, "query", form, formulation)
            yield (task, "optimize", form, NA)
            yield (task, "judge", form, NA)


def build_manifest(root: str | Path = PROMPT_ROOT) -> dict:
    root = Path(root)
    entries = {}
    for combo in all_combinations():
        rel = template_relpath(*combo)
        raw = (root / rel).read_bytes()
        tpl = parse_template(raw.decode("utf-8"), template_id(*combo))
        entries[template_id(*combo)] = {
            "path": rel,
            "sha256": hashlib.sha256(raw).hexdigest(),
            "demonstrations": len(tpl.demonstrations),
            "supplied_demonstrations": tpl.supplied_demonstrations,
            "placeholders": list(tpl.placeholders),
        }
    return {"version": 1, "templates": entries}


class PromptLibrary:
    """All templates, loaded once and checked against the manifest checksums."""

    def __init__(self, templates: dict[str, PromptTemplate], manifest: dict | None = None):
        self.templates = dict(templates)
        self.manifest = manifest or {}

    @classmethod
    def load(cls, root: str | Path = PROMPT_ROOT, verify: bool = True) -> PromptLibrary:
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        templates = {}
        for tid, meta in manifest["templates"].items():
            raw = (root / meta["path"]).read_bytes()
            if verify and hashlib.sha256(raw).hexdigest() != meta["sha256"]:
                raise TemplateIntegrityError(f"{tid}: checksum mismatch for {meta['path']}")
            templates[tid] = parse_template(raw.decode("utf-8"), tid)
        return cls(templates, manifest)

    def get(self, tid: str) -> PromptTemplate:
        try:
            return self.templates[tid]
        except KeyError:
            raise UnknownTemplateError(tid) from None

    def select(self, task: str, stage: str, form: str = NA, formulation: str = NA) -> PromptTemplate:
        validate_combination(task, stage, form, formulation)
        return self.get(template_id(task, stage, form, formulation))


@lru_cache(maxsize=1)
def default_library() -> PromptLibrary:
    return PromptLibrary.load()


def select_template(task: str, stage: str, form: str = NA, formulation: str = NA,
                    library: PromptLibrary | None = None) -> PromptTemplate:
    return (library or default_library()).select(task, stage, form, formulation)
