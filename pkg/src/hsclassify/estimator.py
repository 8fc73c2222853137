"""scikit-learn style front end to the classification pipeline."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .codes import truncate_code
from .corpus import TariffCorpus, parse_corpus
from .evaluation import parse_gold_code
from .gateway import BackendConfig, make_backend
from .pipeline.engine import ClassificationEngine, load_synonyms
from .pipeline.stages import PipelineError
from .pipeline.types import PipelineConfig
from .retrieval import load_vectors


def _check_descriptions(X) -> list[str]:
    if isinstance(X, str):
        raise ValueError("expected a sequence of descriptions, got a single string")
    X = list(np.asarray(X, dtype=object).ravel())
    for i, x in enumerate(X):
        if not isinstance(x, str):
            raise ValueError(f"description {i} is {type(x).__name__}, expected str")
    return X


class TariffClassifier(ClassifierMixin, BaseEstimator):
    """Six-stage HS classifier.

    ``fit`` builds the knowledge base and retrieval indices from ``corpus``;
    there is nothing to learn from ``X``/``y``, which are accepted and ignored
    so the estimator drops into pipelines and ``cross_val_score``.

    Parameters
    ----------
    corpus : str, Path or TariffCorpus
    backend : BackendConfig or backend object
    embedder : callable mapping texts to vectors, optional (hashing embedder by default)
    vectors : str or Path, optional
        Vectors file with precomputed heading embeddings.
    synonyms : str, Path or dict, optional
        Recall-vocabulary table; the packaged default when None.
    n_jobs : int
        Concurrent queries in ``predict`` (outputs keep input order).
    """

    def __init__(self, corpus=None, backend=None, *, embedder=None, vectors=None, synonyms=None,
                 n_retrieve=40, n_l1=10, n_keep_final=3,
                 v7_recall_vocabulary=True, v7_l1_note_retention=True,
                 v7_stage6_self_exclusion=True, v7_broadened_l2_triggers=True,
                 rrf_k=60.0, bm25_k1=1.2, bm25_b=0.75, prompt_version="v1", n_jobs=1):
        self.corpus = corpus
        self.backend = backend
        self.embedder = embedder
        self.vectors = vectors
        self.synonyms = synonyms
        self.n_retrieve = n_retrieve
        self.n_l1 = n_l1
        self.n_keep_final = n_keep_final
        self.v7_recall_vocabulary = v7_recall_vocabulary
        self.v7_l1_note_retention = v7_l1_note_retention
        self.v7_stage6_self_exclusion = v7_stage6_self_exclusion
        self.v7_broadened_l2_triggers = v7_broadened_l2_triggers
        self.rrf_k = rrf_k
        self.bm25_k1 = bm25_k1
        self.bm25_b = bm25_b
        self.prompt_version = prompt_version
        self.n_jobs = n_jobs

    def _pipeline_config(self) -> PipelineConfig:
        params = self.get_params()
        return PipelineConfig(**{k: params[k] for k in PipelineConfig.field_names()})

    def fit(self, X=None, y=None):
        if self.corpus is None:
            raise ValueError("TariffClassifier requires a corpus")
        corpus = self.corpus if isinstance(self.corpus, TariffCorpus) else parse_corpus(self.corpus)
        backend = self.backend
        if backend is None:
            raise ValueError("TariffClassifier requires a backend")
        if isinstance(backend, BackendConfig):
            backend = make_backend(backend)
        vectors = None
        if self.vectors is not None:
            vectors, _ = load_vectors(self.vectors)
        synonyms = self.synonyms
        if synonyms is None or isinstance(synonyms, (str, Path)):
            synonyms = load_synonyms(synonyms)
        self.engine_ = ClassificationEngine.build(
            corpus, backend, self._pipeline_config(), embedder=self.embedder, vectors=vectors,
            synonyms=synonyms,
        )
        self.classes_ = np.array(sorted(c for c in corpus.nodes if len(c) == 6), dtype=object)
        return self

    def classify(self, description: str, query_id: str | None = None):
        """``(FinalDecision, PipelineTrace)`` for one description."""
        check_is_fitted(self, "engine_")
        return self.engine_.classify(description, query_id=query_id)

    def _run_all(self, X):
        X = _check_descriptions(X)
        check_is_fitted(self, "engine_")

        def one(desc):
            try:
                return self.engine_.classify(desc)[0]
            except PipelineError:
                return None

        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                return list(pool.map(one, X))
        return [one(x) for x in X]

    def predict_top3(self, X) -> list[list[str]]:
        """Up to three codes per description, best first; empty where the pipeline failed."""
        return [[str(c) for c in d.codes] if d else [] for d in self._run_all(X)]

    def predict(self, X) -> np.ndarray:
        """Top-1 six-digit code per description (None where the pipeline failed)."""
        out = [str(truncate_code(d.codes[0], 6)) if d else None for d in self._run_all(X)]
        return np.array(out, dtype=object)

    def score(self, X, y, sample_weight=None) -> float:
        """Six-digit top-1 accuracy (fraction) against gold codes in any display form."""
        gold = [str(parse_gold_code(str(g))[0])[:6] for g in y]
        pred = self.predict(X)
        hits = np.array([p == g for p, g in zip(pred, gold)], dtype=float)
        return float(np.average(hits, weights=sample_weight))
