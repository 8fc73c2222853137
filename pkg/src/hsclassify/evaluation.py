"""Benchmark arithmetic: top-k accuracy, agreement, stage attribution, audit accounting.

Every percentage is computed once from an integer count with round-half-up
to one decimal, and the count is always kept next to it.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .codes import CodeError, HsCode, normalize_code, truncate_code
from .pipeline.trace import PipelineTrace


class EvaluationError(ValueError):
    pass


def percent(count: int, n: int) -> float:
    """``100 * count / n`` rounded half-up to one decimal."""
    if n <= 0:
        raise EvaluationError("cannot take a percentage of zero items")
    q = (Decimal(100 * count) / Decimal(n)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return float(q)


@dataclass(frozen=True)
class Ratio:
    count: int
    n: int

    @property
    def percent(self) -> float:
        return percent(self.count, self.n)

    def render(self) -> str:
        return f"{self.percent:.1f}% ({self.count}/{self.n})"

    def to_dict(self) -> dict:
        return {"count": self.count, "n": self.n, "percent": self.percent}


# -- records -------------------------------------------------------------------

@dataclass(frozen=True)
class GoldRecord:
    query_id: str
    description: str
    gold_code: HsCode
    provenance: str | None = None


@dataclass(frozen=True)
class PredictionRecord:
    query_id: str
    top3: tuple[HsCode, ...]
    trace_path: str | None = None

    def __post_init__(self):
        if not 1 <= len(self.top3) <= 3:
            raise EvaluationError(f"{self.query_id}: prediction must list 1-3 codes")
        if len(set(self.top3)) != len(self.top3):
            raise EvaluationError(f"{self.query_id}: predicted codes must be distinct")

    def to_dict(self) -> dict:
        out = {"query_id": self.query_id, "top3": [str(c) for c in self.top3]}
        if self.trace_path:
            out["trace_path"] = self.trace_path
        return out


def parse_gold_code(raw: str) -> tuple[HsCode, str | None]:
    """Normalize a gold label; ten-digit labels are cut to six digits."""
    digits = re.sub(r"[.\s]", "", str(raw))
    if len(digits) == 10 and digits.isdigit():
        return HsCode(digits[:6]), f"truncated from 10-digit {digits}"
    return normalize_code(digits), None


def _jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise EvaluationError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None


def load_gold(path: str | Path) -> list[GoldRecord]:
    out, seen = [], set()
    for lineno, rec in _jsonl(path):
        try:
            qid = str(rec["query_id"])
            code, note = parse_gold_code(rec["gold_code"])
        except (KeyError, CodeError) as exc:
            raise EvaluationError(f"{path}:{lineno}: bad gold record ({exc})") from None
        if qid in seen:
            raise EvaluationError(f"{path}:{lineno}: duplicate query_id {qid!r}")
        seen.add(qid)
        out.append(GoldRecord(qid, rec.get("description", ""), code, note))
    return out


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    out, seen = [], set()
    for lineno, rec in _jsonl(path):
        try:
            qid = str(rec["query_id"])
            top = tuple(normalize_code(c) for c in rec["top3"])
        except (KeyError, TypeError, CodeError) as exc:
            raise EvaluationError(f"{path}:{lineno}: bad prediction record ({exc})") from None
        if qid in seen:
            raise EvaluationError(f"{path}:{lineno}: duplicate query_id {qid!r}")
        seen.add(qid)
        out.append(PredictionRecord(qid, top, rec.get("trace_path")))
    return out


def write_jsonl(records: Iterable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict() if hasattr(r, "to_dict") else r, ensure_ascii=False) + "\n")


# -- accuracy and agreement -----------------------------------------------------

def _at(code: str, digits: int) -> str | None:
    return str(code)[:digits] if len(code) >= digits else None


def hit(pred: PredictionRecord | None, gold: HsCode, digits: int, k: int) -> bool:
    if pred is None:
        return False
    target = str(truncate_code(gold, digits))
    return any(_at(c, digits) == target for c in pred.top3[:k])


def topk_accuracy(preds: Sequence[PredictionRecord], golds: Sequence[GoldRecord],
                  digits: int, k: int) -> Ratio:
    """Share of gold queries with a match among the first ``k`` predictions at ``digits``.

    Queries without a prediction count as misses.
    """
    if digits not in (4, 6) or k not in (1, 3):
        raise EvaluationError("digits must be 4 or 6 and k must be 1 or 3")
    if not golds:
        raise EvaluationError("no gold records")
    by_id = {g.query_id: g for g in golds}
    pred_by_id = {}
    for p in preds:
        if p.query_id not in by_id:
            raise EvaluationError(f"prediction for unknown query_id {p.query_id!r}")
        pred_by_id[p.query_id] = p
    count = sum(hit(pred_by_id.get(g.query_id), g.gold_code, digits, k) for g in golds)
    return Ratio(count, len(golds))


def agreement(run_a: Sequence[PredictionRecord], run_b: Sequence[PredictionRecord], digits: int) -> Ratio:
    """Fraction of queries whose top-1 codes coincide at ``digits``."""
    a = {p.query_id: p for p in run_a}
    b = {p.query_id: p for p in run_b}
    if set(a) != set(b):
        raise EvaluationError(f"runs cover different queries ({len(set(a) ^ set(b))} ids differ)")
    if not a:
        raise EvaluationError("no predictions to compare")
    same = sum(_at(a[q].top3[0], digits) is not None and _at(a[q].top3[0], digits) == _at(b[q].top3[0], digits)
               for q in a)
    return Ratio(same, len(a))


@dataclass
class EvalReport:
    n: int
    top1_4d: Ratio
    top3_4d: Ratio
    top1_6d: Ratio
    top3_6d: Ratio
    verdicts: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "top1_4d": self.top1_4d.to_dict(),
            "top3_4d": self.top3_4d.to_dict(),
            "top1_6d": self.top1_6d.to_dict(),
            "top3_6d": self.top3_6d.to_dict(),
            "verdicts": self.verdicts,
        }

    def render(self) -> str:
        rows = [
            ("Metric", "top-1", "top-3"),
            ("Four-digit accuracy", self.top1_4d.render(), self.top3_4d.render()),
            ("Six-digit accuracy", self.top1_6d.render(), self.top3_6d.render()),
        ]
        return _table(rows) + f"\nn = {self.n}\n"


def evaluate(preds: Sequence[PredictionRecord], golds: Sequence[GoldRecord]) -> EvalReport:
    ratios = {f"top{k}_{d}d": topk_accuracy(preds, golds, d, k) for d in (4, 6) for k in (1, 3)}
    pred_by_id = {p.query_id: p for p in preds}
    verdicts = []
    for g in golds:
        p = pred_by_id.get(g.query_id)
        verdicts.append({
            "query_id": g.query_id,
            "gold": str(g.gold_code),
            "top3": [str(c) for c in p.top3] if p else [],
            **{key: hit(p, g.gold_code, d, k) for key, (d, k) in
               {"top1_4d": (4, 1), "top3_4d": (4, 3), "top1_6d": (6, 1), "top3_6d": (6, 3)}.items()},
        })
    return EvalReport(n=len(golds), verdicts=verdicts, **ratios)


# -- stage attribution --------------------------------------------------------

class AttributionBucket(str, enum.Enum):
    RECALL_MISS = "RecallMiss"
    L1_DROP = "L1Drop"
    L2_NOT_KEPT = "L2NotKept"
    L2_KEPT_NOT_TOP1 = "L2KeptNotTop1"
    FINAL_OVERRIDE = "FinalOverride"


BUCKET_LABELS = {
    AttributionBucket.RECALL_MISS: "Recall miss (Stage 2)",
    AttributionBucket.L1_DROP: "L1 drop (Stage 3)",
    AttributionBucket.L2_NOT_KEPT: "L2 not in keep_final (Stage 4)",
    AttributionBucket.L2_KEPT_NOT_TOP1: "L2 keeps gold but not top-1 (Stage 4)",
    AttributionBucket.FINAL_OVERRIDE: "Final ranking override (Stage 6)",
}


def _heads(codes: Sequence[str] | None) -> set[str]:
    return {str(c)[:4] for c in codes or () if len(c) >= 4}


def final_top1_4d(trace: PipelineTrace) -> str | None:
    final = trace.final_codes()
    return str(final[0])[:4] if final else None


def attribute_error(trace: PipelineTrace | dict, gold4: str) -> AttributionBucket:
    """First stage, in pipeline order, at which the gold heading is lost.

    A stage that never ran (the run failed earlier or there) counts as losing it.
    """
    if isinstance(trace, dict):
        trace = PipelineTrace.from_dict(trace)
    gold4 = str(truncate_code(normalize_code(str(gold4)), 4))
    if final_top1_4d(trace) == gold4:
        raise EvaluationError(f"trace {trace.query_id!r} is correct at four digits; nothing to attribute")
    if gold4 not in _heads(trace.retrieved_codes()):
        return AttributionBucket.RECALL_MISS
    if gold4 not in _heads(trace.shortlisted_codes()):
        return AttributionBucket.L1_DROP
    if gold4 not in _heads(trace.keep_final_codes()):
        return AttributionBucket.L2_NOT_KEPT
    if trace.l2_top1() != gold4:
        return AttributionBucket.L2_KEPT_NOT_TOP1
    return AttributionBucket.FINAL_OVERRIDE


def attribution_table(traces: Sequence[PipelineTrace | dict],
                      golds: Mapping[str, str]) -> dict[AttributionBucket, int]:
    """Bucket counts over four-digit top-1 error traces; ``golds`` maps query_id to gold code."""
    table = {b: 0 for b in AttributionBucket}
    for t in traces:
        if isinstance(t, dict):
            t = PipelineTrace.from_dict(t)
        if t.query_id not in golds:
            raise EvaluationError(f"no gold code for trace {t.query_id!r}")
        table[attribute_error(t, golds[t.query_id])] += 1
    return table


def render_attribution(table: Mapping[AttributionBucket, int]) -> str:
    rows = [("Stage at which the gold heading is lost", "Cases")]
    rows += [(BUCKET_LABELS[b], str(table[b])) for b in AttributionBucket]
    rows.append(("Total", str(sum(table.values()))))
    return _table(rows) + "\n"


# -- audit accounting ------------------------------------------------------------

AUDIT_BUCKETS = ("A", "B", "C", "D")
AUDIT_LABELS = {
    "A": "Agent better supported by HS rules",
    "B": "Ground truth better supported (agent wrong)",
    "C": "HS boundary, professional disagreement plausible",
    "D": "Data-quality issue in query or label",
}


@dataclass(frozen=True)
class AuditRecord:
    query_id: str
    gt_code: HsCode
    agent_code: HsCode
    bucket: str
    rationale: str = ""

    def __post_init__(self):
        if self.bucket not in AUDIT_BUCKETS:
            raise EvaluationError(f"{self.query_id}: bucket must be one of A/B/C/D")
        if len(self.gt_code) < 6 or len(self.agent_code) < 6 or self.gt_code[:6] == self.agent_code[:6]:
            raise EvaluationError(f"{self.query_id}: audit records are six-digit disagreements")

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "gt_code": str(self.gt_code), "agent_code": str(self.agent_code),
                "bucket": self.bucket, "rationale": self.rationale}


def load_audit(path: str | Path) -> list[AuditRecord]:
    out = []
    for lineno, rec in _jsonl(path):
        try:
            out.append(AuditRecord(
                query_id=str(rec["query_id"]),
                gt_code=parse_gold_code(rec["gt_code"])[0],
                agent_code=normalize_code(rec["agent_code"]),
                bucket=rec["bucket"],
                rationale=rec.get("rationale", ""),
            ))
        except (KeyError, CodeError, EvaluationError) as exc:
            raise EvaluationError(f"{path}:{lineno}: bad audit record ({exc})") from None
    return out


def audit_shares(records: Sequence[AuditRecord]) -> dict[str, Ratio]:
    if not records:
        raise EvaluationError("no audit records")
    return {b: Ratio(sum(r.bucket == b for r in records), len(records)) for b in AUDIT_BUCKETS}


def corrected_accuracy(base_correct: int, total: int, records: Sequence[AuditRecord],
                       credited: Iterable[str]) -> Ratio:
    """(base_correct + disagreements in credited buckets) / total."""
    credited = set(credited)
    if not credited <= set(AUDIT_BUCKETS):
        raise EvaluationError(f"unknown audit bucket(s) {sorted(credited - set(AUDIT_BUCKETS))}")
    if base_correct + len(records) != total:
        raise EvaluationError(
            f"base_correct ({base_correct}) + audited disagreements ({len(records)}) != total ({total})")
    return Ratio(base_correct + sum(r.bucket in credited for r in records), total)


def render_audit(shares: Mapping[str, Ratio]) -> str:
    rows = [("Bucket", "Cases", "Share")]
    rows += [(f"{b}. {AUDIT_LABELS[b]}", str(shares[b].count), f"{shares[b].percent:.1f}%") for b in AUDIT_BUCKETS]
    n = next(iter(shares.values())).n
    rows.append(("Total", str(n), "100%"))
    return _table(rows) + "\n"


def _table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
