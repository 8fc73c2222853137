"""Fixed-order orchestration of the six stages with trace recording."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from ..corpus import TariffCorpus
from ..gateway import GatewayError
from ..retrieval import Embedder, HybridIndex
from .prompts import PromptSet
from .stages import (
    NoSubheadingError,
    PipelineError,
    StageError,
    stage1_extract,
    stage2_retrieve,
    stage3_l1,
    stage4_l2,
    stage5_subheading,
    stage6_score,
)
from .trace import STAGE_NAMES, PipelineTrace, StageRecord
from .types import FinalDecision, PipelineConfig


def load_synonyms(path: str | Path | None = None) -> dict[str, list[str]]:
    """Recall-vocabulary table ``{term: [expansions]}``; the packaged default when ``path`` is None."""
    if path is None:
        text = (resources.files("hsclassify") / "data" / "synonyms.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = json.loads(text)
    if not isinstance(table, dict) or not all(
        isinstance(k, str) and isinstance(v, list) and all(isinstance(x, str) for x in v) for k, v in table.items()
    ):
        raise ValueError("synonym table must map strings to lists of strings")
    return table


def default_query_id(description: str) -> str:
    return "q-" + hashlib.sha256(description.encode("utf-8")).hexdigest()[:12]


@dataclass
class ClassificationEngine:
    """Immutable knowledge (corpus, indices) plus a backend; safe to share across runs."""

    corpus: TariffCorpus
    index: HybridIndex
    backend: object
    config: PipelineConfig = field(default_factory=PipelineConfig)
    synonyms: Mapping[str, Sequence[str]] = field(default_factory=dict)
    prompts: PromptSet | None = None

    @classmethod
    def build(cls, corpus: TariffCorpus, backend, config: PipelineConfig | None = None, *,
              embedder: Embedder | None = None, vectors=None,
              synonyms: Mapping[str, Sequence[str]] | None = None) -> ClassificationEngine:
        config = config or PipelineConfig()
        index = HybridIndex.from_corpus(corpus, embedder=embedder, vectors=vectors,
                                        k1=config.bm25_k1, b=config.bm25_b)
        return cls(
            corpus=corpus, index=index, backend=backend, config=config,
            synonyms=load_synonyms() if synonyms is None else synonyms,
            prompts=PromptSet(config.prompt_version),
        )

    def classify(self, description: str, query_id: str | None = None,
                 config: PipelineConfig | None = None) -> tuple[FinalDecision, PipelineTrace]:
        return classify(self, description, config=config, query_id=query_id)


class _Recorder:
    def __init__(self, trace: PipelineTrace):
        self.trace = trace
        self.stage = 0

    def run(self, stage: int, stage_input: dict, fn):
        """Run one stage; ``fn(calls)`` returns ``(result, output_snapshot)``."""
        self.stage = stage
        calls: list[dict] = []
        t0 = time.perf_counter()
        result, output = fn(calls)
        self.trace.add(StageRecord(
            stage=stage, name=STAGE_NAMES[stage], input=stage_input, output=output,
            calls=calls, wall_time_ms=(time.perf_counter() - t0) * 1000.0,
        ))
        return result


def _candidate_row(c) -> dict:
    return {"code": str(c.code), "score": c.retrieval_score, "note_tagged": c.note_tagged}


def classify(engine: ClassificationEngine, description: str, config: PipelineConfig | None = None,
             query_id: str | None = None) -> tuple[FinalDecision, PipelineTrace]:
    """Run stages 1 to 6 in order; no stage is skipped, repeated or re-planned."""
    config = config or engine.config
    corpus, backend = engine.corpus, engine.backend
    prompts = engine.prompts if engine.prompts and engine.prompts.version == config.prompt_version \
        else PromptSet(config.prompt_version)
    query_id = query_id or default_query_id(description)
    trace = PipelineTrace(query_id=query_id, description=description, corpus_version=corpus.version,
                          config=config.to_dict())
    rec = _Recorder(trace)

    try:
        def extract(calls):
            a = stage1_extract(backend, description, prompts=prompts, calls=calls)
            return a, a.to_dict()

        attrs = rec.run(1, {"description": description}, extract)

        def retrieve(calls):
            cands = stage2_retrieve(engine.index, corpus, description, attrs, config, engine.synonyms)
            return cands, {"candidates": [_candidate_row(c) for c in cands]}

        # An empty list is recorded; stage 3 then fails with NoCandidatesError.
        candidates = rec.run(2, {"attributes": attrs.to_dict()}, retrieve)

        def shortlist(calls):
            surv = stage3_l1(backend, candidates, attrs, config, prompts=prompts, calls=calls)
            return surv, {"survivors": [_candidate_row(c) for c in surv]}

        survivors = rec.run(3, {"candidates": [str(c.code) for c in candidates]}, shortlist)

        def rank(calls):
            v = stage4_l2(backend, corpus, survivors, attrs, config, prompts=prompts, calls=calls)
            return v, {
                "keep_final": [str(c.code) for c in v.keep_final],
                "demotions": [{"code": str(c), "clause_id": cid} for c, cid in v.demotions],
                "confirmed": v.confirmed,
                "confirmation": v.confirmation.to_dict(),
            }

        verdict = rec.run(4, {"survivors": [str(c.code) for c in survivors]}, rank)

        def resolve(calls):
            out, skipped = {}, []
            for cand in verdict.keep_final:
                try:
                    out[cand.code] = stage5_subheading(backend, corpus, cand.code, description, attrs,
                                                       prompts=prompts, calls=calls)
                except NoSubheadingError:
                    # Only the committed heading must resolve; others simply drop out.
                    if cand.code == verdict.chosen:
                        raise
                    skipped.append(str(cand.code))
            return out, {"resolutions": [r.to_dict() for r in out.values()], "skipped": skipped}

        resolutions = rec.run(5, {"keep_final": [str(c.code) for c in verdict.keep_final],
                                  "chosen": str(verdict.chosen)}, resolve)

        def score(calls):
            report: dict = {}
            d = stage6_score(backend, corpus, verdict, resolutions, attrs, config,
                             prompts=prompts, calls=calls, report=report)
            d = replace(d, query_id=query_id)
            return d, {**d.to_dict(), **report}

        decision = rec.run(6, {"resolved": [str(r.code) for r in resolutions.values()]}, score)
    except PipelineError as exc:
        _fail(trace, rec.stage, exc)
        exc.stage, exc.stage_name, exc.trace = rec.stage, STAGE_NAMES[rec.stage], trace
        raise
    except (GatewayError, ValueError, KeyError) as exc:
        _fail(trace, rec.stage, exc)
        raise StageError(f"stage {rec.stage} ({STAGE_NAMES[rec.stage]}) failed: {exc}",
                         stage=rec.stage, stage_name=STAGE_NAMES[rec.stage], trace=trace) from exc

    missing = [c for c in decision.codes if c not in corpus]
    if missing:  # unreachable while stage validation holds; never emit a fabricated code
        exc = StageError(f"decision contains codes absent from the corpus: {missing}", stage=6,
                         stage_name=STAGE_NAMES[6], trace=trace)
        _fail(trace, 6, exc)
        raise exc
    return decision, trace


def _fail(trace: PipelineTrace, stage: int, exc: BaseException) -> None:
    err = {"stage": stage, "stage_name": STAGE_NAMES.get(stage, "?"), "type": type(exc).__name__,
           "message": str(exc)}
    raw = getattr(exc, "raw_attempts", None)
    if raw:
        err["raw_attempts"] = list(raw)
    trace.error = err
