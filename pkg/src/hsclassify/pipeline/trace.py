"""Per-run audit record of every stage's input, output and model calls."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

STAGE_NAMES = {
    1: "extract",
    2: "retrieve",
    3: "l1_shortlist",
    4: "l2_rank",
    5: "subheading",
    6: "final_score",
}
TRACE_FORMAT = "hsclassify.trace/1"


@dataclass
class StageRecord:
    stage: int
    name: str
    input: dict
    output: dict
    calls: list[dict] = field(default_factory=list)
    wall_time_ms: float = 0.0

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "stage": self.stage,
            "name": self.name,
            "input": self.input,
            "output": self.output,
            "calls": self.calls,
        }
        if include_timings:
            out["wall_time_ms"] = round(self.wall_time_ms, 3)
        return out


@dataclass
class PipelineTrace:
    query_id: str
    description: str
    corpus_version: str
    config: dict
    stages: list[StageRecord] = field(default_factory=list)
    error: dict | None = None

    def add(self, record: StageRecord) -> None:
        expected = len(self.stages) + 1
        if record.stage != expected:
            raise ValueError(f"stage {record.stage} recorded out of order (expected {expected})")
        self.stages.append(record)

    def stage(self, number: int) -> StageRecord | None:
        for rec in self.stages:
            if rec.stage == number:
                return rec
        return None

    @property
    def ok(self) -> bool:
        return self.error is None and len(self.stages) == 6

    def to_dict(self, include_timings: bool = False) -> dict:
        return {
            "format": TRACE_FORMAT,
            "query_id": self.query_id,
            "description": self.description,
            "corpus_version": self.corpus_version,
            "config": self.config,
            "stages": [s.to_dict(include_timings) for s in self.stages],
            "error": self.error,
        }

    def to_json(self, include_timings: bool = False) -> str:
        # Insertion-ordered dicts give a stable field order; wall times are
        # left out by default so identical runs serialize identically.
        return json.dumps(self.to_dict(include_timings), indent=2, ensure_ascii=False) + "\n"

    def write(self, path: str | Path, include_timings: bool = False) -> None:
        Path(path).write_text(self.to_json(include_timings), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineTrace:
        trace = cls(
            query_id=data["query_id"],
            description=data.get("description", ""),
            corpus_version=data.get("corpus_version", ""),
            config=data.get("config", {}),
            error=data.get("error"),
        )
        for s in data.get("stages", []):
            trace.stages.append(StageRecord(
                stage=s["stage"], name=s["name"], input=s.get("input", {}),
                output=s.get("output", {}), calls=s.get("calls", []),
                wall_time_ms=s.get("wall_time_ms", 0.0),
            ))
        return trace

    @classmethod
    def load(cls, path: str | Path) -> PipelineTrace:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    # Accessors used by stage attribution; None when the stage never ran.

    def retrieved_codes(self) -> list[str] | None:
        rec = self.stage(2)
        return None if rec is None else [c["code"] for c in rec.output["candidates"]]

    def shortlisted_codes(self) -> list[str] | None:
        rec = self.stage(3)
        return None if rec is None else [c["code"] for c in rec.output["survivors"]]

    def keep_final_codes(self) -> list[str] | None:
        rec = self.stage(4)
        return None if rec is None else list(rec.output["keep_final"])

    def l2_top1(self) -> str | None:
        rec = self.stage(4)
        return None if rec is None else rec.output["confirmation"]["chosen"]

    def final_codes(self) -> list[str] | None:
        rec = self.stage(6)
        return None if rec is None else [c["code"] for c in rec.output["top3"]]
