from __future__ import annotations

import json

import httpx
import numpy as np
import pytest

from haludetect.errors import BackendError, EmptyDocumentError, EmptyIndexError, ServiceUnavailableError, TransportError
from haludetect.gateway import FunctionBackend, HashingEmbedder
from haludetect.retrieval import (
    Chunk,
    DenseIndex,
    OffTheShelfRetriever,
    Passage,
    ScriptedSearchService,
    SearchClient,
    ServiceRetriever,
    IndexRetriever,
    build_index,
    chunk_document,
    external_search,
    merge_formulation_results,
    render_passages,
    search,
    search_vector,
)


class TestChunking:
    def test_capacity_is_below_limit(self):
        text = " ".join(f"w{i}" for i in range(100))
        assert [c.word_count for c in chunk_document("d", text)] == [39, 39, 22]

    def test_whitespace_normalised_and_lossless(self):
        text = "a  b\n\tc " * 30
        chunks = chunk_document("d", text, max_words=7)
        assert " ".join(c.text for c in chunks) == " ".join(text.split())
        assert [c.ordinal for c in chunks] == list(range(len(chunks)))

    def test_single_word_chunks(self):
        assert [c.text for c in chunk_document("d", "a b c", max_words=1)] == ["a", "b", "c"]

    def test_errors(self):
        with pytest.raises(EmptyDocumentError):
            chunk_document("d", " \n ")
        with pytest.raises(ValueError):
            chunk_document("d", "a", max_words=0)


def unit_rows(rng, n, dim):
    m = rng.normal(size=(n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestIndex:
    def test_rejects_non_unit_rows(self):
        with pytest.raises(ValueError):
            DenseIndex(np.ones((1, 2)), [Chunk("d", 0, "x", 1)])
        with pytest.raises(ValueError):
            DenseIndex(np.eye(2), [Chunk("d", 0, "x", 1)])

    def test_read_only(self):
        idx = DenseIndex(np.eye(2), [Chunk("d", 0, "a", 1), Chunk("d", 1, "b", 1)])
        with pytest.raises(ValueError):
            idx.vectors[0, 0] = 2.0

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(1)
        chunks = [Chunk("doc", i, f"text é {i}", 3) for i in range(5)]
        idx = DenseIndex(unit_rows(rng, 5, 8), chunks)
        idx.save(tmp_path / "x.idx")
        back = DenseIndex.load(tmp_path / "x.idx")
        assert back.chunks == idx.chunks
        assert np.allclose(back.vectors, idx.vectors, atol=1e-6)
        manifest = json.loads((tmp_path / "x.idx.json").read_text())
        assert manifest == {"dim": 8, "n_chunks": 5, "documents": {"doc": 5}}

    def test_load_rejects_other_files(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOTANIDX" + b"\0" * 16)
        with pytest.raises(ValueError):
            DenseIndex.load(tmp_path / "bad")

    def test_search_order_and_ties(self):
        vecs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.6, 0.8]])
        chunks = [Chunk("d", o, f"c{o}", 1) for o in (5, 1, 2, 3)]
        idx = DenseIndex(vecs, chunks)
        hits = search_vector(idx, np.array([1.0, 0.0]), 3)
        # rows 0 and 2 tie; the lower ordinal wins
        assert [h.id for h in hits] == ["d:2", "d:5", "d:3"]
        assert hits[0].score == pytest.approx(1.0)

    def test_search_errors(self):
        idx = DenseIndex(np.eye(2), [Chunk("d", 0, "a", 1), Chunk("d", 1, "b", 1)])
        with pytest.raises(ValueError):
            search_vector(idx, np.ones(3), 1)
        with pytest.raises(ValueError):
            search_vector(idx, np.ones(2), 0)
        assert len(search_vector(idx, np.array([1.0, 0.0]), 10)) == 2
        with pytest.raises(EmptyIndexError):
            build_index([], FunctionBackend(lambda r: None))

    def test_text_search_prefers_overlap(self):
        backend = FunctionBackend(lambda r: None, embedder=HashingEmbedder(512))
        doc = ("The museum reopened in May after repairs. " * 3 + "Police recovered the painting in Vienna last week. "
               + "Tickets cost ten euros for adults. " * 3)
        idx = build_index(chunk_document("doc", doc, max_words=8), backend)
        (top,) = search(idx, "Where did police recover the painting?", 1, backend)
        assert "Vienna" in top.text or "recovered" in top.text
        assert IndexRetriever(idx, backend, k=2).retrieve("painting") and len(idx) > 3


class TestPassages:
    def test_render(self):
        assert Passage("1", "Body.", "T").render() == "Title: T. Article: Body."
        assert render_passages([Passage("1", "A"), Passage("2", "B", "t")]) == "Article: A\nTitle: t. Article: B"

    def test_merge_dedupes_in_order(self):
        a, b, c = Passage("a", "x"), Passage("b", "y"), Passage("c", "z")
        assert [p.id for p in merge_formulation_results([a, b], [b, c, a])] == ["a", "b", "c"]

    def test_off_the_shelf(self):
        assert OffTheShelfRetriever("  ", "i").retrieve("q") == []
        (p,) = OffTheShelfRetriever("Known fact.", "i").retrieve("anything")
        assert p.id == "i:0" and p.text == "Known fact."


class TestSearchService:
    def client(self, handler):
        return SearchClient("http://search.local/api/search", transport=httpx.MockTransport(handler))

    def test_request_and_parsing(self):
        seen = []

        def handler(req):
            seen.append(json.loads(req.content))
            return httpx.Response(200, json={"passages": [
                {"id": "1", "title": "T", "text": "A", "score": 0.9},
                {"id": "1", "text": "dup"},
                {"id": "2", "text": "  "},
                {"id": "3", "text": "C"},
                {"id": "4", "text": "D"},
            ]})

        hits = external_search(self.client(handler), "who?", 2)
        assert seen == [{"query": "who?", "k": 2}]
        assert [(h.id, h.title) for h in hits] == [("1", "T"), ("3", None)]

    def test_bare_list_payload(self):
        c = self.client(lambda req: httpx.Response(200, json=[{"text": "A"}, {"text": "B"}]))
        assert [h.id for h in c.search("q", 5)] == ["0", "1"]

    @pytest.mark.parametrize("code,exc", [(503, ServiceUnavailableError), (502, ServiceUnavailableError),
                                          (404, TransportError), (500, TransportError)])
    def test_status_errors(self, code, exc):
        with pytest.raises(exc):
            self.client(lambda req: httpx.Response(code)).search("q", 1)

    def test_connection_error(self):
        def handler(req):
            raise httpx.ConnectTimeout("slow")

        with pytest.raises(TransportError):
            self.client(handler).search("q", 1)

    def test_unexpected_payload(self):
        with pytest.raises(BackendError):
            self.client(lambda req: httpx.Response(200, json={"passages": "nope"})).search("q", 1)

    def test_k_validated(self):
        with pytest.raises(ValueError):
            external_search(ScriptedSearchService({}), "q", 0)

    def test_scripted_service(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"q": [{"id": "x", "text": "t"}]}))
        svc = ScriptedSearchService.load(p)
        assert [h.id for h in ServiceRetriever(svc, 2).retrieve("q")] == ["x"]
        assert svc.search("other", 2) == []
