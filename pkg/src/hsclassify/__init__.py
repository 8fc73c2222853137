"""Deterministic, rule-grounded HS tariff classification."""

from .codes import CodeError, HsCode, Level, normalize_code, render_code, truncate_code
from .corpus import (
    CorpusError,
    TariffCorpus,
    UnknownCodeError,
    exclusion_redirects,
    notes_for,
    parse_corpus,
    serialize_corpus,
)
from .estimator import TariffClassifier
from .gateway import BackendConfig, ChatRequest, complete_structured, fixture_key
from .pipeline import ClassificationEngine, FinalDecision, PipelineConfig, PipelineTrace, classify, verify_citations
from .retrieval import HybridIndex, bm25_query, build_bm25, dense_query, rrf_fuse, tokenize

__version__ = "0.1.0"
