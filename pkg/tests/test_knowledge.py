"""Embedding determinism, retrieval ordering, snapshots, case repo."""

from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vigil.knowledge import (
    CaseRecord,
    HashEmbeddingProvider,
    KnowledgeDoc,
    KnowledgeError,
    KnowledgeStore,
    SnapshotCorruptError,
    brute_force_top_k,
    cosine,
    load_case_repo,
)


class TestHashEmbeddings:
    def test_same_text_same_vector(self):
        p = HashEmbeddingProvider()
        a = p.embed_text("printer offline after sleep")
        b = p.embed_text("printer offline after sleep")
        assert np.array_equal(a, b)

    def test_unit_norm(self):
        p = HashEmbeddingProvider()
        vec = p.embed_text("vpn drops every hour on docked laptops")
        assert np.linalg.norm(vec) == pytest.approx(1.0)

    def test_case_and_tokenization_insensitive(self):
        p = HashEmbeddingProvider()
        assert np.array_equal(
            p.embed_text("VPN Drops"), p.embed_text("vpn   drops!!!")
        )

    def test_empty_text_maps_to_basis_vector(self):
        p = HashEmbeddingProvider()
        for text in ("", "   ", "!!! ---"):
            vec = p.embed_text(text)
            assert vec[0] == 1.0
            assert np.linalg.norm(vec) == 1.0

    def test_token_multiset_matters(self):
        p = HashEmbeddingProvider()
        once = p.embed_text("disk disk full")
        twice = p.embed_text("disk full")
        assert not np.array_equal(once, twice)

    def test_identical_texts_cosine_one(self):
        p = HashEmbeddingProvider()
        v = p.embed_text("audio device missing")
        assert cosine(v, v) == pytest.approx(1.0)

    @given(st.text(max_size=60), st.text(max_size=60))
    @settings(max_examples=50)
    def test_cosine_bounded(self, a, b):
        p = HashEmbeddingProvider(dimension=64)
        score = cosine(p.embed_text(a), p.embed_text(b))
        assert -1.0 - 1e-9 <= score <= 1.0 + 1e-9

    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            HashEmbeddingProvider(dimension=1)


def seeded_store(n_docs: int = 40, seed: int = 3) -> KnowledgeStore:
    import random

    rng = random.Random(seed)
    words = [f"w{i}" for i in range(80)]
    store = KnowledgeStore()
    for i in range(n_docs):
        body = " ".join(rng.choices(words, k=12))
        store.add_text(
            doc_id=f"doc-{i:03d}",
            kind="article" if i % 2 == 0 else "resolved_case",
            title=f"note {i}",
            body=body,
            updated_at=1000.0 + rng.randrange(0, 500),
        )
    return store


class TestRetrieval:
    def test_exact_match_scores_highest(self):
        store = KnowledgeStore()
        store.add_text("a", "article", "vpn drops", "vpn drops on docked laptops", 1.0)
        store.add_text("b", "article", "printer", "printer queue stuck after sleep", 1.0)
        pkg = store.retrieve("vpn drops on docked laptops", k=2, threshold=-1.0)
        assert pkg.hits[0].doc_id == "a"
        assert pkg.hits[0].score > pkg.hits[1].score
        assert pkg.hits[0].score > 0.9  # title tokens dilute a perfect match

    def test_threshold_excludes_weak_matches(self):
        store = KnowledgeStore()
        store.add_text("a", "article", "topic one", "alpha beta gamma", 1.0)
        pkg = store.retrieve("completely unrelated words here", threshold=0.55)
        assert pkg.hits == ()
        assert pkg.assembled_text == ""

    def test_empty_store(self):
        pkg = KnowledgeStore().retrieve("anything")
        assert pkg.hits == ()

    def test_matches_brute_force_oracle(self):
        store = seeded_store()
        import random

        rng = random.Random(99)
        words = [f"w{i}" for i in range(80)]
        for _ in range(25):
            query = " ".join(rng.choices(words, k=8))
            pkg = store.retrieve(query, k=5, threshold=0.2)
            oracle = brute_force_top_k(store, query, k=5, threshold=0.2)
            assert [h.doc_id for h in pkg.hits] == [h.doc_id for h in oracle]
            for got, want in zip(pkg.hits, oracle):
                assert got.score == pytest.approx(want.score, abs=1e-12)

    def test_tie_breaks_fresher_then_id(self):
        provider = HashEmbeddingProvider()
        store = KnowledgeStore(provider=provider)
        vec = provider.embed_text("identical body text")
        for doc_id, updated in (("b", 5.0), ("a", 5.0), ("c", 9.0)):
            store.add(
                KnowledgeDoc(
                    id=doc_id, kind="article", title="t", body="identical body text",
                    embedding=vec.copy(), updated_at=updated,
                )
            )
        pkg = store.retrieve("identical body text", k=3, threshold=0.5)
        assert [h.doc_id for h in pkg.hits] == ["c", "a", "b"]

    def test_assembled_text_contains_kind_id_title_body(self):
        store = KnowledgeStore()
        store.add_text("kb-7", "article", "Reset the spooler", "Open services and restart it.", 1.0)
        pkg = store.retrieve("reset the spooler services restart", threshold=0.3)
        assert "[article:kb-7] Reset the spooler" in pkg.assembled_text
        assert "Open services and restart it." in pkg.assembled_text

    def test_k_truncates(self):
        store = seeded_store()
        pkg = store.retrieve("w1 w2 w3 w4", k=3, threshold=-1.0)
        assert len(pkg.hits) == 3

    def test_remove_then_retrieve(self):
        store = KnowledgeStore()
        store.add_text("a", "article", "vpn", "vpn drops", 1.0)
        store.remove("a")
        assert len(store) == 0
        assert store.retrieve("vpn drops").hits == ()

    def test_k_validation(self):
        with pytest.raises(KnowledgeError):
            seeded_store(n_docs=2).retrieve("q", k=0)


class TestSnapshots:
    def test_round_trip_preserves_retrieval(self, tmp_path):
        store = seeded_store()
        path = tmp_path / "kb.snapshot"
        store.snapshot(path)
        reloaded = KnowledgeStore.load_snapshot(path)
        assert reloaded.doc_ids() == store.doc_ids()
        pkg_a = store.retrieve("w1 w5 w9 w13", k=5, threshold=0.1)
        pkg_b = reloaded.retrieve("w1 w5 w9 w13", k=5, threshold=0.1)
        assert pkg_a == pkg_b  # bit-exact: embeddings serialize losslessly

    def test_checksum_detects_corruption(self, tmp_path):
        store = seeded_store(n_docs=4)
        path = tmp_path / "kb.snapshot"
        store.snapshot(path)
        text = path.read_text("utf-8")
        path.write_text(text.replace("note 1", "note X"), "utf-8")
        with pytest.raises(SnapshotCorruptError):
            KnowledgeStore.load_snapshot(path)

    def test_doc_count_must_match(self, tmp_path):
        store = seeded_store(n_docs=3)
        path = tmp_path / "kb.snapshot"
        store.snapshot(path)
        lines = path.read_text("utf-8").splitlines()
        header = json.loads(lines[0])
        body = "\n".join(lines[1:-1]) + "\n"  # drop last doc
        import hashlib

        header["checksum"] = hashlib.sha256(body.encode()).hexdigest()
        header["doc_count"] = 3  # lie about the count
        path.write_text(json.dumps(header, sort_keys=True) + "\n" + body, "utf-8")
        with pytest.raises(SnapshotCorruptError):
            KnowledgeStore.load_snapshot(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "kb.snapshot"
        path.write_text("not a header\n", "utf-8")
        with pytest.raises(SnapshotCorruptError):
            KnowledgeStore.load_snapshot(path)

    def test_empty_store_round_trips(self, tmp_path):
        path = tmp_path / "kb.snapshot"
        KnowledgeStore().snapshot(path)
        assert len(KnowledgeStore.load_snapshot(path)) == 0


class TestDocs:
    def test_kind_validation(self):
        provider = HashEmbeddingProvider()
        with pytest.raises(KnowledgeError):
            KnowledgeDoc(
                id="x", kind="memo", title="t", body="b",
                embedding=provider.embed_text("b"), updated_at=0.0,
            )

    def test_unit_norm_enforced(self):
        with pytest.raises(KnowledgeError):
            KnowledgeDoc(
                id="x", kind="article", title="t", body="b",
                embedding=np.ones(256), updated_at=0.0,
            )

    def test_dimension_mismatch_rejected(self):
        store = KnowledgeStore()
        provider = HashEmbeddingProvider(dimension=64)
        with pytest.raises(KnowledgeError):
            store.add(
                KnowledgeDoc(
                    id="x", kind="article", title="t", body="b",
                    embedding=provider.embed_text("b"), updated_at=0.0,
                )
            )


class TestCaseRepo:
    def test_load_and_search_text(self, tmp_path):
        path = tmp_path / "cases.jsonl"
        rows = [
            {
                "id": "case-1",
                "issue_description": "laptop will not wake from sleep",
                "chat_transcript": "user: help\nagent: on it",
                "resolution_summary": "disabled fast startup",
                "root_cause": "power configuration conflict",
                "resolution_steps": ["powercfg /hibernate off"],
                "turn_count": 18,
                "contact_duration_minutes": 25.0,
            },
            {
                "id": "case-2",
                "issue_description": "vpn drops hourly",
                "turn_count": 9,
                "contact_duration_minutes": 12.5,
            },
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", "utf-8")
        cases = load_case_repo(path)
        assert set(cases) == {"case-1", "case-2"}
        text = cases["case-1"].searchable_text()
        assert "fast startup" in text
        assert "powercfg" in text

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "cases.jsonl"
        row = json.dumps(
            {"id": "c", "issue_description": "x", "turn_count": 1,
             "contact_duration_minutes": 1.0}
        )
        path.write_text(row + "\n" + row + "\n", "utf-8")
        with pytest.raises(KnowledgeError):
            load_case_repo(path)

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "cases.jsonl"
        path.write_text("{}\nnot json\n", "utf-8")
        with pytest.raises(KnowledgeError):
            load_case_repo(path)

    def test_negative_turns_rejected(self):
        with pytest.raises(KnowledgeError):
            CaseRecord(
                id="c", issue_description="x", chat_transcript="", resolution_summary="",
                root_cause="", resolution_steps=[], turn_count=-1,
                contact_duration_minutes=1.0,
            )
