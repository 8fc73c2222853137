"""The six pipeline stages.

Every model-facing stage builds a plain-JSON stage input, renders it into a
prompt, and validates the reply against both its schema and the corpus, so a
code the model invents never leaves the stage: it is repaired or raised.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

from ..codes import CodeError, HsCode, normalize_code
from ..corpus import ClauseType, Scope, TariffCorpus, exclusion_redirects, notes_for
from ..gateway import ChatRequest, GatewayError, canonical_json, complete_structured
from ..retrieval import HybridIndex, RankedList, rrf_fuse, tokenize
from .prompts import PromptSet, default_prompts
from .types import (
    CandidateHeading,
    Citation,
    CitationCheck,
    CitationReport,
    Confirmation,
    FinalDecision,
    L2Verdict,
    PipelineConfig,
    ProductAttributes,
    ScoredCandidate,
    SubheadingResolution,
)


class PipelineError(RuntimeError):
    """Base for stage failures; ``classify`` fills in the stage and partial trace."""

    def __init__(self, message: str, stage: int | None = None, stage_name: str | None = None, trace=None):
        super().__init__(message)
        self.stage = stage
        self.stage_name = stage_name
        self.trace = trace


class EmptyDescriptionError(PipelineError):
    pass


class NoCandidatesError(PipelineError):
    pass


class NoSubheadingError(PipelineError):
    pass


class NoDecisionError(PipelineError):
    pass


class StageError(PipelineError):
    """A gateway or validation failure inside a stage (see ``__cause__``)."""


def _call(
    backend,
    prompts: PromptSet,
    call: str,
    schema_id: str,
    stage_input: dict,
    validator: Callable | None,
    calls: list | None,
    **extra,
):
    system, user = prompts.render(call, **stage_input, **extra)
    request = ChatRequest(
        stage_name=call,
        system_prompt=system,
        user_prompt=user,
        schema_id=schema_id,
        canonical_input=canonical_json(stage_input),
        temperature=0.0,
    )
    reply = complete_structured(backend, request, validator)
    if calls is not None:
        calls.append({"call": call, "key": reply.key, "attempts": reply.attempts, "raw_text": reply.raw_text})
    return reply.value


def _member(raw: str, allowed, what: str) -> HsCode:
    try:
        code = normalize_code(raw)
    except CodeError as exc:
        raise ValueError(f"{what} {raw!r} is not a valid code: {exc}") from None
    if code not in allowed:
        raise ValueError(f"{what} {raw!r} is not one of the permitted codes {sorted(allowed)}")
    return code


def _distinct(codes: Sequence[str], what: str) -> None:
    if len(set(codes)) != len(codes):
        raise ValueError(f"{what} contains duplicate codes")


def _check_gir(ids: Sequence[str], corpus: TariffCorpus) -> None:
    unknown = [g for g in ids if g not in corpus.gir_ids]
    if unknown:
        raise ValueError(f"unknown GIR clause id(s) {unknown}")


def _phrase_in(needle: Sequence[str], hay: Sequence[str]) -> bool:
    n = len(needle)
    return n > 0 and any(list(hay[i:i + n]) == list(needle) for i in range(len(hay) - n + 1))


# -- stage 1 -----------------------------------------------------------------

def stage1_extract(backend, description: str, *, prompts: PromptSet | None = None,
                   calls: list | None = None) -> ProductAttributes:
    if not description or not description.strip():
        raise EmptyDescriptionError("product description is empty")

    def validate(v):
        for key in ("material", "form", "function"):
            if not getattr(v, key).strip():
                raise ValueError(f"attribute {key!r} must be non-empty")

    out = _call(backend, prompts or default_prompts(), "stage1_extract", "attributes",
                {"description": description}, validate, calls)
    return ProductAttributes(
        material=out.material.strip(),
        form=out.form.strip(),
        function=out.function.strip(),
        end_use=out.end_use.strip(),
        features=tuple(f.strip() for f in out.features if f.strip()),
        origin_brand=out.origin_brand,
    )


# -- stage 2 -----------------------------------------------------------------

def expand_query(text: str, synonyms: Mapping[str, Sequence[str]]) -> str:
    """Append synonym expansions for every key phrase present in ``text``."""
    tokens = tokenize(text)
    extra = [e for key in sorted(synonyms) if _phrase_in(tokenize(key), tokens) for e in synonyms[key]]
    return " ".join([text, *extra]) if extra else text


def note_tagged_codes(corpus: TariffCorpus, codes: Sequence[str]) -> set[str]:
    """Candidates named as redirect targets by exclusion clauses of co-retrieved candidates' chapters."""
    tagged: set[str] = set()
    seen_chapters: set[str] = set()
    for code in codes:
        if code[:2] in seen_chapters:
            continue
        seen_chapters.add(code[:2])
        for _, target in exclusion_redirects(corpus, code):
            for other in codes:
                if other[:len(target)] == target or (len(target) > 4 and target[:4] == other):
                    tagged.add(other)
    return tagged


def stage2_retrieve(
    index: HybridIndex,
    corpus: TariffCorpus,
    description: str,
    attrs: ProductAttributes,
    config: PipelineConfig,
    synonyms: Mapping[str, Sequence[str]] | None = None,
) -> list[CandidateHeading]:
    """Fuse BM25 and dense rankings for the description and each attribute string."""
    n = config.n_retrieve
    lists: list[RankedList] = []
    queries = [(description, False)] + [(q, True) for q in attrs.query_strings()]
    for text, is_attr in queries:
        if not text.strip():
            continue
        lexical = expand_query(text, synonyms or {}) if (is_attr and config.v7_recall_vocabulary) else text
        lists.append(index.lexical(lexical, n))
        # Zero cosine carries no evidence; keep only positively similar headings.
        dense = index.semantic(text, n)
        lists.append(RankedList(tuple(e for e in dense if e[1] > 0)))
    fused = rrf_fuse(lists, k=config.rrf_k).entries[:n]
    codes = [d for d, _ in fused]
    tagged = note_tagged_codes(corpus, codes)
    return [
        CandidateHeading(code=HsCode(d), heading_text=corpus.node(d).text, retrieval_score=s,
                         note_tagged=d in tagged)
        for d, s in fused
    ]


# -- stage 3 -----------------------------------------------------------------

def stage3_l1(backend, candidates: Sequence[CandidateHeading], attrs: ProductAttributes,
              config: PipelineConfig, *, prompts: PromptSet | None = None,
              calls: list | None = None) -> list[CandidateHeading]:
    if not candidates:
        raise NoCandidatesError("L1 shortlisting needs at least one candidate")
    by_code = {c.code: c for c in candidates}

    def validate(v):
        if not v.keep:
            raise ValueError("keep must name at least one candidate")
        if len(v.keep) > config.n_l1:
            raise ValueError(f"keep has {len(v.keep)} codes; at most {config.n_l1} allowed")
        _distinct([_member(c, by_code, "kept code") for c in v.keep], "keep")

    stage_input = {
        "attributes": attrs.to_dict(),
        "candidates": [{"code": str(c.code), "text": c.heading_text} for c in candidates],
    }
    out = _call(backend, prompts or default_prompts(), "stage3_l1", "shortlist", stage_input,
                validate, calls, limit=str(config.n_l1))
    survivors = [by_code[normalize_code(c)] for c in out.keep]
    if config.v7_l1_note_retention:
        kept = {c.code for c in survivors}
        survivors += [c for c in candidates if c.note_tagged and c.code not in kept]
    return survivors


# -- stage 4 -----------------------------------------------------------------

def _clause_table(corpus: TariffCorpus, codes: Sequence[str]) -> dict[str, dict]:
    ids = sorted({cid for code in codes for cid in corpus.notes_by_code[code]})
    return {
        cid: {
            "type": corpus.clauses[cid].clause_type.value,
            "text": corpus.clauses[cid].text,
            "redirect_targets": [str(t) for t in corpus.clauses[cid].redirect_targets],
        }
        for cid in ids
    }


def confirmation_triggered(corpus: TariffCorpus, survivors: Sequence[CandidateHeading],
                           config: PipelineConfig) -> bool:
    for c in survivors:
        if any(n.clause_type in (ClauseType.PRIORITY, ClauseType.EXCLUSION) for n in notes_for(corpus, c.code)):
            return True
    if config.v7_broadened_l2_triggers:
        chapters = [c.code[:2] for c in survivors]
        return len(set(chapters)) < len(chapters)
    return False


def stage4_l2(backend, corpus: TariffCorpus, survivors: Sequence[CandidateHeading],
              attrs: ProductAttributes, config: PipelineConfig, *,
              prompts: PromptSet | None = None, calls: list | None = None) -> L2Verdict:
    if not survivors:
        raise NoCandidatesError("L2 ranking needs at least one survivor")
    prompts = prompts or default_prompts()
    by_code = {c.code: c for c in survivors}
    clauses = _clause_table(corpus, list(by_code))
    candidates = [
        {"code": str(c.code), "text": c.heading_text, "notes": list(corpus.notes_by_code[c.code])}
        for c in survivors
    ]

    def validate(v):
        if not v.keep_final:
            raise ValueError("keep_final must name at least one candidate")
        if len(v.keep_final) > config.n_keep_final:
            raise ValueError(f"keep_final has {len(v.keep_final)} codes; at most {config.n_keep_final} allowed")
        _distinct([_member(c, by_code, "kept code") for c in v.keep_final], "keep_final")
        for d in v.demotions:
            _member(d.code, by_code, "demoted code")
            if d.clause_id not in corpus.clauses:
                raise ValueError(f"demotion cites unknown clause {d.clause_id!r}")

    stage_input = {"attributes": attrs.to_dict(), "candidates": candidates, "clauses": clauses}
    ranked = _call(backend, prompts, "stage4_l2", "ranking", stage_input, validate, calls,
                   limit=str(config.n_keep_final))
    keep = [by_code[normalize_code(c)] for c in ranked.keep_final]
    demotions = tuple((normalize_code(d.code), d.clause_id) for d in ranked.demotions)

    if not confirmation_triggered(corpus, survivors, config):
        return L2Verdict(tuple(keep), demotions, Confirmation(chosen=keep[0].code), confirmed=False)

    keep_codes = {c.code for c in keep}

    def validate_confirm(v):
        _member(v.chosen, keep_codes, "chosen code")
        _check_gir(v.gir_clauses, corpus)

    confirm_input = {
        "attributes": attrs.to_dict(),
        "keep_final": [x for x in candidates if x["code"] in keep_codes],
        "clauses": _clause_table(corpus, list(keep_codes)),
        "gir": {r.id: r.text for r in corpus.gir},
    }
    conf = _call(backend, prompts, "stage4_confirm", "confirmation", confirm_input, validate_confirm, calls)
    chosen = normalize_code(conf.chosen)
    # The committed heading leads keep_final.
    keep.sort(key=lambda c: c.code != chosen)
    confirmation = Confirmation(chosen=chosen, pros=tuple(conf.pros), cons=tuple(conf.cons),
                                gir_clauses=tuple(conf.gir_clauses))
    return L2Verdict(tuple(keep), demotions, confirmation, confirmed=True)


# -- stage 5 -----------------------------------------------------------------

def stage5_subheading(backend, corpus: TariffCorpus, chosen: str, description: str,
                      attrs: ProductAttributes, *, prompts: PromptSet | None = None,
                      calls: list | None = None) -> SubheadingResolution:
    chosen = HsCode(chosen)
    below = [n for c, n in corpus.nodes.items() if c.is_descendant_of(chosen)]
    six = {n.code for n in below if len(n.code) == 6}
    if not six:
        raise NoSubheadingError(f"heading {chosen} has no subheadings in the corpus")
    eight = {n.code for n in below if len(n.code) == 8}

    def validate(v):
        six_code = _member(v.six_digit, six, "six-digit code")
        if v.eight_digit is not None:
            if v.ambiguous:
                raise ValueError("eight_digit must be null when ambiguous is true")
            eight_code = _member(v.eight_digit, eight, "eight-digit code")
            if not eight_code.is_descendant_of(six_code):
                raise ValueError(f"{eight_code} is not a subdivision of {six_code}")
        _check_gir(v.gir_clauses, corpus)

    stage_input = {
        "description": description,
        "attributes": attrs.to_dict(),
        "heading": {"code": str(chosen), "text": corpus.node(chosen).text},
        "subheadings": [{"code": str(n.code), "text": n.text} for n in below],
    }
    out = _call(backend, prompts or default_prompts(), "stage5_subheading", "subheading",
                stage_input, validate, calls)
    return SubheadingResolution(
        heading=chosen,
        six_digit=normalize_code(out.six_digit),
        eight_digit=normalize_code(out.eight_digit) if out.eight_digit else None,
        ambiguous=out.ambiguous,
        gir_clauses=tuple(out.gir_clauses),
    )


# -- stage 6 -----------------------------------------------------------------

def self_excluding_clause(corpus: TariffCorpus, heading: str, attrs: ProductAttributes) -> str | None:
    """Id of an exclusion clause in the heading's own chapter whose keywords hit the attributes."""
    hay = tokenize(attrs.classifying_text())
    for clause in notes_for(corpus, heading):
        if clause.clause_type is not ClauseType.EXCLUSION or clause.scope is not Scope.CHAPTER:
            continue
        if any(_phrase_in(tokenize(kw), hay) for kw in clause.keywords):
            return clause.id
    return None


def _check_citation(corpus: TariffCorpus, clause_id: str, quoted: str, span) -> None:
    try:
        source = corpus.citable_text(clause_id)
    except KeyError:
        raise ValueError(f"citation names unknown source {clause_id!r}") from None
    if not quoted or quoted not in source:
        raise ValueError(f"quoted text for {clause_id!r} is not a verbatim excerpt of that source")
    if span is not None:
        start, end = span
        if not 0 <= start < end <= len(quoted):
            raise ValueError(f"load_bearing_span {list(span)} out of bounds for quote of length {len(quoted)}")


def stage6_score(backend, corpus: TariffCorpus, verdict: L2Verdict,
                 resolutions: Mapping[str, SubheadingResolution], attrs: ProductAttributes,
                 config: PipelineConfig, *, prompts: PromptSet | None = None,
                 calls: list | None = None, report: dict | None = None) -> FinalDecision:
    prompts = prompts or default_prompts()
    report = report if report is not None else {}
    kept = [c for c in verdict.keep_final if c.code in resolutions]
    if not kept:
        raise NoDecisionError("no kept heading has a subheading resolution")

    excluded = {}
    if config.v7_stage6_self_exclusion:
        for c in kept:
            hit = self_excluding_clause(corpus, c.code, attrs)
            if hit:
                excluded[str(c.code)] = hit
        kept = [c for c in kept if str(c.code) not in excluded]
    report["self_excluded"] = excluded
    if not kept:
        raise NoDecisionError("every kept candidate is excluded by a note of its own chapter")

    allowed: set[HsCode] = set()
    for c in kept:
        res = resolutions[c.code]
        allowed.add(res.six_digit)
        if res.eight_digit:
            allowed.add(res.eight_digit)

    def validate(v):
        if not v.top3:
            raise ValueError("top3 must contain at least one code")
        if len(v.top3) > min(3, len(kept)):
            raise ValueError(f"top3 may hold at most {min(3, len(kept))} codes")
        codes = [_member(s.code, allowed, "final code") for s in v.top3]
        _distinct(codes, "top3")
        # One code per heading keeps the six-digit descendants of distinct kept headings.
        _distinct([c[:4] for c in codes], "top3 headings")
        for s in v.top3:
            if not math.isfinite(s.confidence):
                raise ValueError("confidence must be finite")
            _check_gir(s.gir_clauses, corpus)
            for cit in s.citations:
                _check_citation(corpus, cit.clause_id, cit.quoted_text, cit.load_bearing_span)

    sources = {}
    for c in kept:
        res = resolutions[c.code]
        for cid in corpus.notes_by_code[c.code]:
            sources[cid] = corpus.clauses[cid].text
        for code in (c.code, res.six_digit, res.eight_digit):
            if code:
                sources[f"node:{code}"] = corpus.node(code).text
    sources.update({r.id: r.text for r in corpus.gir})

    stage_input = {
        "attributes": attrs.to_dict(),
        "confirmation": verdict.confirmation.to_dict(),
        "candidates": [
            {**resolutions[c.code].to_dict(), "heading_text": c.heading_text,
             "notes": list(corpus.notes_by_code[c.code])}
            for c in kept
        ],
        "sources": dict(sorted(sources.items())),
    }
    out = _call(backend, prompts, "stage6_score", "final", stage_input, validate, calls)

    # Post-process: mark load-bearing spans the scorer left unmarked.
    flat = [cit for s in out.top3 for cit in s.citations]
    missing = [i for i, cit in enumerate(flat) if cit.load_bearing_span is None]
    spans: dict[int, tuple[int, int]] = {}
    report["span_fallback"] = False
    if missing:
        spans = _mark_spans(backend, prompts, [(i, flat[i]) for i in missing], calls)
        if spans is None:
            report["span_fallback"] = True
            spans = {i: (0, len(flat[i].quoted_text)) for i in missing}

    scored = []
    i = 0
    for s in out.top3:
        cits = []
        for cit in s.citations:
            span = cit.load_bearing_span if cit.load_bearing_span is not None else spans[i]
            cits.append(Citation(cit.clause_id, cit.quoted_text, (int(span[0]), int(span[1]))))
            i += 1
        scored.append(ScoredCandidate(
            code=normalize_code(s.code),
            confidence=min(1.0, max(0.0, float(s.confidence))),
            pros=tuple(s.pros), cons=tuple(s.cons), gir_clauses=tuple(s.gir_clauses),
            citations=tuple(cits),
        ))
    scored.sort(key=lambda s: -s.confidence)  # stable: model order breaks ties
    return FinalDecision(top3=tuple(scored))


def _mark_spans(backend, prompts, items, calls) -> dict[int, tuple[int, int]] | None:
    lengths = {i: len(cit.quoted_text) for i, cit in items}

    def validate(v):
        got = sorted(s.index for s in v.spans)
        if got != sorted(lengths):
            raise ValueError(f"spans must cover exactly indices {sorted(lengths)}")
        for s in v.spans:
            if not 0 <= s.start < s.end <= lengths[s.index]:
                raise ValueError(f"span {s.index} out of bounds")

    stage_input = {"citations": [
        {"index": i, "clause_id": cit.clause_id, "quoted_text": cit.quoted_text} for i, cit in items
    ]}
    try:
        out = _call(backend, prompts, "stage6_spans", "spans", stage_input, validate, calls)
    except GatewayError:
        return None
    return {s.index: (s.start, s.end) for s in out.spans}


# -- citation groundedness -----------------------------------------------------

def verify_citations(corpus: TariffCorpus, decision: FinalDecision) -> CitationReport:
    """Check each citation is a verbatim excerpt of its source with an in-bounds span."""
    report = CitationReport()
    for rank, cand in enumerate(decision.top3, start=1):
        for cit in cand.citations:
            try:
                source = corpus.citable_text(cit.clause_id)
            except KeyError:
                report.checks.append(CitationCheck(rank, str(cand.code), cit.clause_id, False,
                                                   error=f"unknown source {cit.clause_id!r}"))
                continue
            start, end = cit.load_bearing_span
            ok = bool(cit.quoted_text) and cit.quoted_text in source and 0 <= start < end <= len(cit.quoted_text)
            report.checks.append(CitationCheck(rank, str(cand.code), cit.clause_id, ok))
    return report
