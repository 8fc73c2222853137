"""Output schemas for every structured model call, keyed by schema id."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AttributesOut(_Strict):
    material: str
    form: str
    function: str
    end_use: str
    features: list[str] = Field(default_factory=list)
    origin_brand: Optional[str] = None


class ShortlistOut(_Strict):
    keep: list[str]


class Demotion(_Strict):
    code: str
    clause_id: str


class RankingOut(_Strict):
    keep_final: list[str]
    demotions: list[Demotion] = Field(default_factory=list)


class ConfirmationOut(_Strict):
    chosen: str
    pros: list[str] = Field(default_factory=list)
    cons: list[str] = Field(default_factory=list)
    gir_clauses: list[str] = Field(default_factory=list)


class SubheadingOut(_Strict):
    six_digit: str
    eight_digit: Optional[str] = None
    ambiguous: bool = False
    gir_clauses: list[str] = Field(default_factory=list)


class CitationOut(_Strict):
    clause_id: str
    quoted_text: str
    load_bearing_span: Optional[tuple[int, int]] = None


class ScoredCode(_Strict):
    code: str
    confidence: float
    pros: list[str] = Field(default_factory=list)
    cons: list[str] = Field(default_factory=list)
    gir_clauses: list[str] = Field(default_factory=list)
    citations: list[CitationOut] = Field(default_factory=list)


class FinalOut(_Strict):
    top3: list[ScoredCode]


class SpanOut(_Strict):
    index: int
    start: int
    end: int


class SpansOut(_Strict):
    spans: list[SpanOut]


SCHEMAS: dict[str, type[BaseModel]] = {
    "attributes": AttributesOut,
    "shortlist": ShortlistOut,
    "ranking": RankingOut,
    "confirmation": ConfirmationOut,
    "subheading": SubheadingOut,
    "final": FinalOut,
    "spans": SpansOut,
}


def register_schema(schema_id: str, model: type[BaseModel]) -> None:
    SCHEMAS[schema_id] = model
