"""Lexical (BM25) and dense (cosine) heading retrieval, fused by RRF."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import TariffCorpus

_RUN = re.compile(r"[^\W_]+")
_CJK = re.compile(r"([㐀-䶿一-鿿豈-﫿]+)")

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_RRF_K = 60.0


class RetrievalError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercased tokens; CJK runs become overlapping character bigrams."""
    tokens: list[str] = []
    for run in _RUN.findall(text.lower()):
        for i, part in enumerate(_CJK.split(run)):
            if not part:
                continue
            if i % 2 == 0:
                tokens.append(part)
            elif len(part) == 1:
                tokens.append(part)
            else:
                tokens.extend(part[j:j + 2] for j in range(len(part) - 1))
    return tokens


@dataclass(frozen=True)
class DocumentEntry:
    doc_id: str
    body: str
    tokens: tuple[str, ...] = field(default=None, repr=False)

    def __post_init__(self):
        if self.tokens is None:
            object.__setattr__(self, "tokens", tuple(tokenize(self.body)))


@dataclass(frozen=True)
class RankedList:
    """(doc_id, score) pairs, score descending then doc_id ascending."""

    entries: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        seen = set()
        prev = None
        for doc_id, score in self.entries:
            if doc_id in seen:
                raise RetrievalError(f"duplicate doc_id {doc_id!r} in ranked list")
            seen.add(doc_id)
            if prev is not None and (score > prev[1] or (score == prev[1] and doc_id < prev[0])):
                raise RetrievalError("ranked list is not sorted by (score desc, doc_id asc)")
            prev = (doc_id, score)

    @classmethod
    def from_scores(cls, scores: Mapping[str, float], top_n: int | None = None) -> RankedList:
        ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        if top_n is not None:
            ordered = ordered[:top_n]
        return cls(tuple(ordered))

    @property
    def ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


# -- BM25 ---------------------------------------------------------------------

@dataclass(frozen=True)
class Bm25Index:
    postings: Mapping[str, tuple[tuple[str, int], ...]]
    doc_lengths: Mapping[str, int]
    avg_doc_length: float
    doc_count: int
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    def idf(self, term: str) -> float:
        n = len(self.postings.get(term, ()))
        return math.log((self.doc_count - n + 0.5) / (n + 0.5) + 1.0)


def build_bm25(docs: Sequence[DocumentEntry], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    for doc in sorted(docs, key=lambda d: d.doc_id):
        if doc.doc_id in lengths:
            raise RetrievalError(f"duplicate doc_id {doc.doc_id!r}")
        lengths[doc.doc_id] = len(doc.tokens)
        for term, tf in Counter(doc.tokens).items():
            postings.setdefault(term, []).append((doc.doc_id, tf))
    avg = sum(lengths.values()) / len(lengths) if lengths else 0.0
    return Bm25Index(
        postings={t: tuple(p) for t, p in postings.items()},
        doc_lengths=lengths,
        avg_doc_length=avg,
        doc_count=len(lengths),
        k1=k1,
        b=b,
    )


def bm25_scores(index: Bm25Index, query: str) -> dict[str, float]:
    """Okapi BM25 score for every document sharing a term with ``query``."""
    scores: dict[str, float] = {}
    avgdl = index.avg_doc_length or 1.0
    # Accumulate in sorted term order so float sums are reproducible.
    for term in sorted(set(tokenize(query))):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths[doc_id] / avgdl)
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (index.k1 + 1.0) / (tf + norm)
    return scores


def bm25_query(index: Bm25Index, query: str, top_n: int) -> RankedList:
    if top_n < 1:
        raise RetrievalError("top_n must be >= 1")
    return RankedList.from_scores(bm25_scores(index, query), top_n)


# -- dense --------------------------------------------------------------------

@dataclass(frozen=True)
class DenseIndex:
    vectors: Mapping[str, tuple[float, ...]]
    dim: int
    _ids: tuple[str, ...] = field(default=(), repr=False, compare=False)
    _matrix: np.ndarray = field(default=None, repr=False, compare=False)


def build_dense(vectors: Mapping[str, Sequence[float]], dim: int | None = None) -> DenseIndex:
    items = sorted(vectors.items())
    if dim is None:
        dim = len(items[0][1]) if items else 0
    clean: dict[str, tuple[float, ...]] = {}
    for doc_id, vec in items:
        vec = tuple(float(x) for x in vec)
        if len(vec) != dim:
            raise RetrievalError(f"vector for {doc_id!r} has length {len(vec)}, expected {dim}")
        if not all(math.isfinite(x) for x in vec):
            raise RetrievalError(f"vector for {doc_id!r} has non-finite components")
        clean[doc_id] = vec
    ids = tuple(clean)
    matrix = np.array([clean[i] for i in ids], dtype=float).reshape(len(ids), dim)
    return DenseIndex(vectors=clean, dim=dim, _ids=ids, _matrix=matrix)


def dense_query(index: DenseIndex, query_vec: Sequence[float], top_n: int) -> RankedList:
    """Cosine ranking by brute-force scan; zero-norm vectors score 0."""
    if top_n < 1:
        raise RetrievalError("top_n must be >= 1")
    q = np.asarray(query_vec, dtype=float)
    if q.shape != (index.dim,):
        raise RetrievalError(f"query vector has length {q.size}, index dimension is {index.dim}")
    if not np.all(np.isfinite(q)):
        raise RetrievalError("query vector has non-finite components")
    if not index._ids:
        return RankedList()
    qn = float(np.linalg.norm(q))
    norms = np.linalg.norm(index._matrix, axis=1)
    dots = index._matrix @ q
    denom = norms * qn
    sims = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return RankedList.from_scores(dict(zip(index._ids, sims.tolist())), top_n)


# -- fusion -------------------------------------------------------------------

def rrf_fuse(lists: Iterable[RankedList], k: float = DEFAULT_RRF_K) -> RankedList:
    """Reciprocal rank fusion: sum of 1/(k + rank) over lists, ranks from 1."""
    if k <= 0:
        raise RetrievalError("RRF constant k must be positive")
    fused: dict[str, float] = {}
    for ranked in lists:
        for rank, (doc_id, _) in enumerate(ranked, start=1):
            fused[doc_id] = fused.get(doc_id, 0.0) + 1.0 / (k + rank)
    return RankedList.from_scores(fused)


# -- embeddings and vectors files -------------------------------------------

Embedder = Callable[[Sequence[str]], list[list[float]]]


class HashingEmbedder:
    """Deterministic character n-gram feature-hashing embedder.

    Stand-in for a neural encoder; stable across processes and platforms.
    """

    def __init__(self, dim: int = 512, ngram_range: tuple[int, int] = (3, 5)):
        from sklearn.feature_extraction.text import HashingVectorizer

        self.dim = dim
        self._vectorizer = HashingVectorizer(
            analyzer="char_wb", ngram_range=ngram_range, n_features=dim,
            alternate_sign=False, norm="l2", lowercase=True,
        )

    def __call__(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            return []
        return self._vectorizer.transform(list(texts)).toarray().tolist()


def load_vectors(path: str | Path) -> tuple[dict[str, list[float]], int]:
    """Read a vectors file: a ``{"kind": "header", "dim": N}`` line, then ``{doc_id, vector}`` lines."""
    vectors: dict[str, list[float]] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RetrievalError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            if rec.get("kind") == "header":
                if dim is not None:
                    raise RetrievalError(f"{path}:{lineno}: duplicate header")
                dim = int(rec["dim"])
                continue
            if dim is None:
                raise RetrievalError(f"{path}:{lineno}: vector before header record")
            doc_id, vec = rec.get("doc_id"), rec.get("vector")
            if not isinstance(doc_id, str) or not isinstance(vec, list):
                raise RetrievalError(f"{path}:{lineno}: expected doc_id and vector fields")
            if len(vec) != dim:
                raise RetrievalError(f"{path}:{lineno}: vector length {len(vec)} != header dim {dim}")
            if doc_id in vectors:
                raise RetrievalError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            vectors[doc_id] = vec
    if dim is None:
        raise RetrievalError(f"{path}: missing header record")
    return vectors, dim


def write_vectors(vectors: Mapping[str, Sequence[float]], dim: int, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "header", "dim": dim}) + "\n")
        for doc_id in sorted(vectors):
            fh.write(json.dumps({"doc_id": doc_id, "vector": list(vectors[doc_id])}) + "\n")


# -- corpus documents and the combined index --------------------------------

def heading_documents(corpus: TariffCorpus) -> list[DocumentEntry]:
    """One document per heading: its text, its subheading texts, and notes naming it."""
    naming: dict[str, list[str]] = {}
    for clause in corpus.clauses.values():
        for target in clause.redirect_targets:
            if len(target) >= 4:
                naming.setdefault(target[:4], []).append(clause.text)
    docs = []
    for heading in corpus.headings():
        parts = [heading.text]
        parts += [n.text for c, n in corpus.nodes.items() if c.is_descendant_of(heading.code)]
        parts += naming.get(heading.code, [])
        docs.append(DocumentEntry(doc_id=str(heading.code), body="\n".join(parts)))
    return docs


@dataclass
class HybridIndex:
    """BM25 and dense indices built over the same heading documents."""

    documents: dict[str, DocumentEntry]
    bm25: Bm25Index
    dense: DenseIndex
    embedder: Embedder

    @classmethod
    def from_corpus(
        cls,
        corpus: TariffCorpus,
        embedder: Embedder | None = None,
        vectors: Mapping[str, Sequence[float]] | None = None,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
    ) -> HybridIndex:
        docs = heading_documents(corpus)
        embedder = embedder or HashingEmbedder()
        if vectors is None:
            embedded = embedder([d.body for d in docs])
            vectors = {d.doc_id: v for d, v in zip(docs, embedded)}
        unknown = set(vectors) - {d.doc_id for d in docs}
        if unknown:
            raise RetrievalError(f"vectors for codes that are not corpus headings: {sorted(unknown)[:5]}")
        return cls(
            documents={d.doc_id: d for d in docs},
            bm25=build_bm25(docs, k1=k1, b=b),
            dense=build_dense(vectors),
            embedder=embedder,
        )

    def lexical(self, query: str, top_n: int) -> RankedList:
        return bm25_query(self.bm25, query, top_n)

    def semantic(self, query: str, top_n: int) -> RankedList:
        if not self.dense.vectors:
            return RankedList()
        return dense_query(self.dense, self.embedder([query])[0], top_n)
