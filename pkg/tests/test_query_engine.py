from __future__ import annotations

import pytest

from haludetect.errors import FormatError, MalformedQueryError, TransportError
from haludetect.gateway import ChatCompletion, FunctionBackend
from haludetect.knowledge import KnowledgeForge
from haludetect.query_engine import (
    Continue,
    ReasoningTrace,
    SubQuery,
    Terminate,
    parse_query_line,
    parse_step,
    run_reasoning,
)
from haludetect.retrieval import Passage, Retriever


class TestParseQueryLine:
    def test_combined(self):
        q = parse_query_line("Did Joy Williams compose it? [Who composed it?]")
        assert (q.specific_text, q.general_text) == ("Did Joy Williams compose it?", "Who composed it?")
        assert q.texts("combined") == ["Did Joy Williams compose it?", "Who composed it?"]
        assert q.texts("specific") == ["Did Joy Williams compose it?"]
        assert q.texts("general") == ["Who composed it?"]

    def test_nested_brackets(self):
        q = parse_query_line("Is A [x] B? [What is [x]?]")
        assert q.specific_text == "Is A" and q.general_text == "x"
        q = parse_query_line("Is A B? [What is [x] really?]")
        assert q.general_text == "What is [x] really?"

    @pytest.mark.parametrize("mode,expect", [
        ("specific", ("Who wrote it?", None)),
        ("general", (None, "Who wrote it?")),
        ("combined", ("Who wrote it?", "Who wrote it?")),
    ])
    def test_no_brackets(self, mode, expect):
        q = parse_query_line("Who wrote it?", mode)
        assert (q.specific_text, q.general_text) == expect

    def test_only_general_in_combined_fills_specific(self):
        q = parse_query_line("[Who wrote it?]")
        assert q.specific_text == q.general_text == "Who wrote it?"

    @pytest.mark.parametrize("bad", ["", "  ", "Is it? [Who", "Is it?] x", "] [x]", "[]", "[ ]"])
    def test_malformed(self, bad):
        with pytest.raises(MalformedQueryError):
            parse_query_line(bad)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            parse_query_line("x", "both")

    def test_subquery_roundtrip(self):
        q = parse_query_line("a? [b?]")
        assert SubQuery.from_dict(q.to_dict()) == q
        with pytest.raises(ValueError):
            SubQuery(None, None)


class TestParseStep:
    def test_continue(self):
        s = parse_step("#Thought-1#: check it.\n#Query-1#: Is X Y? [What is X?]\n", "combined")
        assert isinstance(s, Continue)
        assert s.thought == "check it." and s.query.general_text == "What is X?"
        assert s.emitted == "#Thought-1#: check it.\n#Query-1#: Is X Y? [What is X?]\n"

    def test_multiple_queries_use_first(self):
        s = parse_step("#Thought-2#: t\n#Query-2#: a? [b?]\n#Query-3#: c?", "combined")
        assert s.query.line == "a? [b?]" and s.notes and s.emitted.endswith("[b?]\n")

    def test_terminate(self):
        s = parse_step(" #Thought-3#: Found one wrong detail, we do not need further query.", "combined")
        assert isinstance(s, Terminate) and s.thought.startswith("Found one wrong detail")

    def test_query_without_thought(self):
        s = parse_step("#Query-1#: a?", "specific")
        assert isinstance(s, Continue) and s.thought == "" and s.query.specific_text == "a?"

    def test_no_marker(self):
        with pytest.raises(FormatError):
            parse_step("I think the answer is fine.", "combined")


class TableRetriever(Retriever):
    def __init__(self, table, fail_on=()):
        self.table, self.fail_on, self.calls = table, set(fail_on), []

    def retrieve(self, query_text):
        self.calls.append(query_text)
        if query_text in self.fail_on:
            raise TransportError("search down")
        return [Passage(pid, f"text {pid}") for pid in self.table.get(query_text, [])]


def scripted(steps):
    """Query-stage backend replaying ``steps``; optimisation answers echo the query line."""
    calls = {"query": [], "optimize": []}

    def fn(request):
        user = request.messages[-1][1]
        if "#Knowledge#:" in user.rsplit("\n\n", 1)[-1]:
            calls["optimize"].append(user)
            return ChatCompletion("Yes, confirmed.")
        calls["query"].append(user)
        item = steps[len(calls["query"]) - 1]
        return item if isinstance(item, ChatCompletion) else ChatCompletion(item)

    return FunctionBackend(fn), calls


Q, A = "Who composed the score?", "Joy Williams."


def run(steps, retriever=None, mode="combined", max_steps=8, form="unstructured"):
    backend, calls = scripted(steps)
    retriever = retriever or TableRetriever({"a?": ["p1"], "b?": ["p1", "p2"], "c?": ["p3"]})
    trace = run_reasoning(Q, A, form, mode, retriever, KnowledgeForge(backend), backend, max_steps=max_steps)
    return trace, calls, retriever


class TestRunReasoning:
    def test_two_steps_then_conclude(self):
        trace, calls, retriever = run([
            "#Thought-1#: first.\n#Query-1#: a? [b?]\n#Knowledge-1#: invented",
            "#Thought-2#: second.\n#Query-2#: c?",
            "#Thought-3#: done.",
        ])
        assert trace.terminated == "concluded" and [s.k for s in trace.steps] == [1, 2, 3]
        assert retriever.calls == ["a?", "b?", "c?", "c?"]
        assert trace.query_knowledge_text() == (
            "#Query-1#: a? [b?]\n#Knowledge-1#: Yes, confirmed.\n#Query-2#: c?\n#Knowledge-2#: Yes, confirmed.")
        # the transcript fed back excludes the model's invented knowledge
        third = calls["query"][2]
        assert third.endswith("#Answer#: Joy Williams.\n#Thought-1#: first.\n#Query-1#: a? [b?]\n"
                              "#Knowledge-1#: Yes, confirmed.\n#Thought-2#: second.\n#Query-2#: c?\n"
                              "#Knowledge-2#: Yes, confirmed.\n")
        # merged hits are de-duplicated in specific-then-general order
        assert "Article: text p1\nArticle: text p2\n#Answer#:" in calls["optimize"][0]

    def test_no_hits_gives_sentinel_without_optimising(self):
        trace, calls, _ = run(["#Thought-1#: t\n#Query-1#: zzz?", "#Thought-2#: done"])
        assert trace.steps[0].knowledge.variant == "no_information" and calls["optimize"] == []

    def test_max_steps(self):
        trace, _, _ = run(["#Thought-1#: t\n#Query-1#: a?"] * 3, max_steps=2)
        assert trace.terminated == "max_steps" and len(trace.steps) == 2

    def test_refusal(self):
        trace, _, _ = run(["#Thought-1#: t\n#Query-1#: a?", ChatCompletion("no", (), "refusal")])
        assert trace.terminated == "refusal" and trace.steps[-1].query is None

    def test_format_error(self):
        trace, _, _ = run(["rambling without markers"])
        assert trace.terminated == "no_query" and len(trace.steps) == 1

    def test_retrieval_error(self):
        trace, _, _ = run(["#Thought-1#: t\n#Query-1#: a?"], retriever=TableRetriever({}, fail_on={"a?"}))
        assert trace.terminated == "error"
        assert trace.steps[0].knowledge.note == "retrieval failed: TransportError"

    def test_specific_mode_retrieves_once(self):
        _, _, retriever = run(["#Thought-1#: t\n#Query-1#: a?", "#Thought-2#: done"], mode="specific")
        assert retriever.calls == ["a?"]

    def test_trace_roundtrip(self):
        trace, _, _ = run(["#Thought-1#: t\n#Query-1#: a? [b?]", "#Thought-2#: done"], form="structured")
        assert ReasoningTrace.from_dict(trace.to_dict()) == trace

    def test_argument_checks(self):
        with pytest.raises(ValueError):
            run([], max_steps=0)
        with pytest.raises(ValueError):
            run([], form="graph")
