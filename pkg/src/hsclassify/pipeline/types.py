"""Values flowing between pipeline stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..codes import HsCode
from ..retrieval import DEFAULT_B, DEFAULT_K1, DEFAULT_RRF_K


@dataclass(frozen=True)
class PipelineConfig:
    n_retrieve: int = 40
    n_l1: int = 10
    n_keep_final: int = 3
    v7_recall_vocabulary: bool = True
    v7_l1_note_retention: bool = True
    v7_stage6_self_exclusion: bool = True
    v7_broadened_l2_triggers: bool = True
    rrf_k: float = DEFAULT_RRF_K
    bm25_k1: float = DEFAULT_K1
    bm25_b: float = DEFAULT_B
    prompt_version: str = "v1"

    def __post_init__(self):
        if not (self.n_retrieve >= self.n_l1 >= self.n_keep_final >= 1):
            raise ValueError("require n_retrieve >= n_l1 >= n_keep_final >= 1")
        if self.rrf_k <= 0:
            raise ValueError("rrf_k must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class ProductAttributes:
    material: str
    form: str
    function: str
    end_use: str
    features: tuple[str, ...] = ()
    origin_brand: str | None = None

    def to_dict(self) -> dict:
        return {
            "material": self.material,
            "form": self.form,
            "function": self.function,
            "end_use": self.end_use,
            "features": list(self.features),
            "origin_brand": self.origin_brand,
        }

    def query_strings(self) -> list[str]:
        """Non-empty attribute strings used as retrieval queries."""
        parts = [self.material, self.form, self.function, self.end_use, " ".join(self.features)]
        return [p for p in parts if p.strip()]

    def classifying_text(self) -> str:
        """Attribute text that may trigger exclusions (features are decorations)."""
        return " ".join([self.material, self.form, self.function, self.end_use])


@dataclass(frozen=True)
class CandidateHeading:
    code: HsCode
    heading_text: str
    retrieval_score: float
    note_tagged: bool = False


@dataclass(frozen=True)
class Confirmation:
    chosen: HsCode
    pros: tuple[str, ...] = ()
    cons: tuple[str, ...] = ()
    gir_clauses: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"chosen": str(self.chosen), "pros": list(self.pros), "cons": list(self.cons),
                "gir_clauses": list(self.gir_clauses)}


@dataclass(frozen=True)
class L2Verdict:
    keep_final: tuple[CandidateHeading, ...]
    demotions: tuple[tuple[HsCode, str], ...]
    confirmation: Confirmation
    confirmed: bool = False

    def __post_init__(self):
        codes = [c.code for c in self.keep_final]
        if len(set(codes)) != len(codes):
            raise ValueError("keep_final codes must be distinct")
        if self.confirmation.chosen not in codes:
            raise ValueError("confirmation must choose a kept candidate")

    @property
    def chosen(self) -> HsCode:
        return self.confirmation.chosen


@dataclass(frozen=True)
class SubheadingResolution:
    heading: HsCode
    six_digit: HsCode
    eight_digit: HsCode | None = None
    ambiguous: bool = False
    gir_clauses: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.six_digit.is_descendant_of(self.heading) or len(self.six_digit) != 6:
            raise ValueError(f"{self.six_digit} is not a subheading of {self.heading}")
        if self.eight_digit is not None:
            if self.ambiguous:
                raise ValueError("an ambiguous resolution cannot carry an eight-digit code")
            if not self.eight_digit.is_descendant_of(self.six_digit):
                raise ValueError(f"{self.eight_digit} is not below {self.six_digit}")

    @property
    def code(self) -> HsCode:
        return self.eight_digit or self.six_digit

    def to_dict(self) -> dict:
        return {
            "heading": str(self.heading),
            "six_digit": str(self.six_digit),
            "eight_digit": str(self.eight_digit) if self.eight_digit else None,
            "ambiguous": self.ambiguous,
            "gir_clauses": list(self.gir_clauses),
        }


@dataclass(frozen=True)
class Citation:
    clause_id: str
    quoted_text: str
    load_bearing_span: tuple[int, int]

    def to_dict(self) -> dict:
        return {"clause_id": self.clause_id, "quoted_text": self.quoted_text,
                "load_bearing_span": list(self.load_bearing_span)}

    @property
    def load_bearing_text(self) -> str:
        start, end = self.load_bearing_span
        return self.quoted_text[start:end]


@dataclass(frozen=True)
class ScoredCandidate:
    code: HsCode
    confidence: float
    pros: tuple[str, ...] = ()
    cons: tuple[str, ...] = ()
    gir_clauses: tuple[str, ...] = ()
    citations: tuple[Citation, ...] = ()

    def to_dict(self) -> dict:
        return {
            "code": str(self.code),
            "confidence": self.confidence,
            "pros": list(self.pros),
            "cons": list(self.cons),
            "gir_clauses": list(self.gir_clauses),
            "citations": [c.to_dict() for c in self.citations],
        }


@dataclass(frozen=True)
class FinalDecision:
    top3: tuple[ScoredCandidate, ...]
    query_id: str = ""

    def __post_init__(self):
        if not 1 <= len(self.top3) <= 3:
            raise ValueError("a decision carries one to three codes")
        codes = [c.code for c in self.top3]
        if len(set(codes)) != len(codes):
            raise ValueError("decision codes must be distinct")
        confs = [c.confidence for c in self.top3]
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise ValueError("confidences must be non-increasing")

    @property
    def codes(self) -> list[HsCode]:
        return [c.code for c in self.top3]

    @property
    def top1(self) -> ScoredCandidate:
        return self.top3[0]

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "top3": [c.to_dict() for c in self.top3]}

    @classmethod
    def from_dict(cls, data: dict) -> FinalDecision:
        top = []
        for c in data["top3"]:
            top.append(ScoredCandidate(
                code=HsCode(c["code"]),
                confidence=float(c["confidence"]),
                pros=tuple(c.get("pros", ())),
                cons=tuple(c.get("cons", ())),
                gir_clauses=tuple(c.get("gir_clauses", ())),
                citations=tuple(
                    Citation(x["clause_id"], x["quoted_text"], tuple(x["load_bearing_span"]))
                    for x in c.get("citations", ())
                ),
            ))
        return cls(top3=tuple(top), query_id=data.get("query_id", ""))


@dataclass
class CitationCheck:
    rank: int
    code: str
    clause_id: str
    grounded: bool
    error: str | None = None


@dataclass
class CitationReport:
    checks: list[CitationCheck] = field(default_factory=list)

    @property
    def grounded(self) -> int:
        return sum(c.grounded for c in self.checks)

    @property
    def ungrounded(self) -> int:
        return sum(not c.grounded for c in self.checks)

    @property
    def errors(self) -> list[CitationCheck]:
        return [c for c in self.checks if c.error]

    @property
    def all_grounded(self) -> bool:
        return self.ungrounded == 0

    def to_dict(self) -> dict:
        return {
            "grounded": self.grounded,
            "ungrounded": self.ungrounded,
            "checks": [vars(c) for c in self.checks],
        }
