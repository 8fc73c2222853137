import random

import pytest

from hsclassify.retrieval import (
    DocumentEntry,
    HashingEmbedder,
    HybridIndex,
    RankedList,
    RetrievalError,
    bm25_query,
    build_bm25,
    build_dense,
    dense_query,
    heading_documents,
    load_vectors,
    rrf_fuse,
    tokenize,
    write_vectors,
)
from support import golden_corpus
import oracles


@pytest.mark.parametrize("text, expected", [
    ("Self-Adhesive FILM", ["self", "adhesive", "film"]),
    ("", []),
    ("聚氨酯", ["聚氨", "氨酯"]),
    ("TPU聚氨酯film", ["tpu", "聚氨", "氨酯", "film"]),
    ("膜 3919.90", ["膜", "3919", "90"]),
    ("snake_case", ["snake", "case"]),
])
def test_tokenize(text, expected):
    assert tokenize(text) == expected


def docs(mapping):
    return [DocumentEntry(d, t) for d, t in mapping.items()]


def test_bm25_small_example():
    idx = build_bm25(docs({"d1": "plastic film", "d2": "steel rod", "d3": "plastic rod"}))
    assert idx.doc_count == 3
    assert abs(idx.avg_doc_length - 2.0) < 1e-12
    assert bm25_query(idx, "plastic rod", 3).ids[0] == "d3"
    assert all(tf > 0 for plist in idx.postings.values() for _, tf in plist)


def test_bm25_edge_cases():
    empty = build_bm25([])
    assert len(bm25_query(empty, "anything", 5)) == 0
    idx = build_bm25(docs({"a": "red box", "b": "blue box"}))
    assert len(bm25_query(idx, "zebra", 5)) == 0
    assert bm25_query(idx, "box", 10).ids == ["a", "b"]  # tie broken by id
    with pytest.raises(RetrievalError):
        build_bm25(docs({"a": "x"}) + docs({"a": "y"}))
    with pytest.raises(RetrievalError):
        bm25_query(idx, "box", 0)


def test_bm25_whole_document_query_ranks_first():
    body = {"a": "self adhesive plastic film", "b": "plastic sheets film", "c": "rubber tape"}
    idx = build_bm25(docs(body))
    assert bm25_query(idx, body["a"], 3).ids[0] == "a"


def test_dense_examples():
    idx = build_dense({"a": [1.0, 0.0, 0.0], "b": [0.0, 1.0, 0.0], "c": [1.0, 1.0, 0.0]})
    top = dense_query(idx, [0.0, 1.0, 0.0], 3)
    assert top.ids[0] == "b" and abs(top.entries[0][1] - 1.0) < 1e-9
    ortho = dense_query(idx, [0.0, 0.0, 1.0], 3)
    assert ortho.ids == ["a", "b", "c"] and all(s == 0.0 for _, s in ortho)
    assert dense_query(idx, [0.0, 0.0, 0.0], 2).ids == ["a", "b"]
    with pytest.raises(RetrievalError):
        dense_query(idx, [1.0, 0.0], 3)
    with pytest.raises(RetrievalError):
        build_dense({"a": [1.0, float("nan")]})


def test_rrf_examples():
    one = RankedList((("x", 9.0), ("y", 3.0)))
    fused = rrf_fuse([one], k=60)
    assert fused.ids == ["x", "y"]
    assert abs(fused.entries[0][1] - 1 / 61) < 1e-12
    assert len(rrf_fuse([RankedList(), RankedList()])) == 0
    a = RankedList((("A", 3.0), ("B", 2.0), ("C", 1.0)))
    b = RankedList((("C", 0.9), ("A", 0.1)))
    got = rrf_fuse([a, b], k=60).entries
    assert [d for d, _ in got] == ["A", "C", "B"]
    for (_, s), want in zip(got, (0.032522, 0.032266, 0.016129)):
        assert abs(s - want) < 1e-6


def test_rrf_ignores_scores():
    a = RankedList((("p", 10.0), ("q", 5.0), ("r", 1.0)))
    rescaled = RankedList(tuple((d, s ** 3 + 100) for d, s in a))
    b = RankedList((("r", 0.2), ("p", 0.1)))
    assert rrf_fuse([a, b]) == rrf_fuse([rescaled, b])


def test_ranked_list_invariants():
    with pytest.raises(RetrievalError):
        RankedList((("a", 1.0), ("a", 0.5)))
    with pytest.raises(RetrievalError):
        RankedList((("a", 1.0), ("b", 2.0)))
    with pytest.raises(RetrievalError):
        RankedList((("b", 1.0), ("a", 1.0)))


VOCAB = "plastic film sheet rod steel rubber tape adhesive self roll strip foil 膜 聚氨酯 pipe".split()


def random_corpus(rng):
    n = rng.randint(0, 20)
    return {f"d{i:02d}": " ".join(rng.choices(VOCAB, k=rng.randint(1, 12))) for i in range(n)}


def test_bm25_random_oracle_sample():
    rng = random.Random(7)
    for _ in range(20):
        body = random_corpus(rng)
        idx = build_bm25(docs(body))
        q = " ".join(rng.choices(VOCAB, k=rng.randint(1, 4)))
        got = bm25_query(idx, q, 50).entries
        want = oracles.bm25(body, q)
        assert [d for d, _ in got] == [d for d, _ in want]
        assert all(abs(a[1] - b[1]) <= 1e-9 for a, b in zip(got, want))


def test_vectors_file_round_trip(tmp_path):
    vecs = {"3919": [0.1, 0.2], "3920": [0.0, -1.5]}
    p = tmp_path / "v.jsonl"
    write_vectors(vecs, 2, p)
    loaded, dim = load_vectors(p)
    assert dim == 2 and loaded == vecs


def test_vectors_file_dimension_checked(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text('{"kind": "header", "dim": 3}\n{"doc_id": "3919", "vector": [1, 2]}\n')
    with pytest.raises(RetrievalError):
        load_vectors(p)


def test_hashing_embedder_deterministic():
    e = HashingEmbedder()
    a = e(["self-adhesive film"])[0]
    assert a == HashingEmbedder()(["self-adhesive film"])[0]
    assert len(a) == 512


def test_heading_documents_include_notes_and_children():
    corpus = golden_corpus()
    body = {d.doc_id: d.body for d in heading_documents(corpus)}
    assert set(body) == {str(h.code) for h in corpus.headings()}
    assert "In rolls of a width not exceeding 20 cm" in body["3919"]
    # 39-P1 redirects to 3919, so its text is indexed with that heading
    assert corpus.clauses["39-P1"].text in body["3919"]


def test_hybrid_index_with_supplied_vectors():
    corpus = golden_corpus()
    codes = [str(h.code) for h in corpus.headings()]
    vectors = {c: [1.0 if i == j else 0.0 for j in range(len(codes))] for i, c in enumerate(codes)}
    probe = codes.index("3919")
    embed = lambda texts: [[1.0 if j == probe else 0.0 for j in range(len(codes))] for _ in texts]
    idx = HybridIndex.from_corpus(corpus, embedder=embed, vectors=vectors)
    assert idx.semantic("anything", 3).ids[0] == "3919"
    with pytest.raises(RetrievalError):
        HybridIndex.from_corpus(corpus, embedder=embed, vectors={"9999": [1.0]})


def test_queries_are_deterministic():
    corpus = golden_corpus()
    idx = HybridIndex.from_corpus(corpus)
    q = "thermoplastic polyurethane self-adhesive film"
    assert idx.lexical(q, 10) == idx.lexical(q, 10)
    assert idx.semantic(q, 10) == idx.semantic(q, 10)
