"""Regenerate the scripted-backend fixtures for the packaged TPU screen-film example.

Run from the repository root:

    python3 scripts/build_golden_fixtures.py

The responder below plays the model for each stage. Its replies are recorded
keyed by (stage, canonical input) so the scripted backend replays them exactly.
"""

from __future__ import annotations

import json
import sys
from importlib import resources

from hsclassify.corpus import parse_corpus
from hsclassify.gateway import FunctionBackend, RecordingBackend
from hsclassify.pipeline import ClassificationEngine

DESCRIPTION = "50 pcs HD hydrogel film for all phones, matte / anti-blue-ray / UV / privacy, TPU material"
PREFERRED_L1 = ["3919", "3920", "3926", "3916", "3909", "8517", "8524", "4008", "4016", "3907"]


def _reply(obj) -> str:
    return json.dumps(obj, ensure_ascii=False)


def respond(request, attempt: int) -> str:
    data = json.loads(request.canonical_input)
    name = request.stage_name
    if name == "stage1_extract":
        return _reply({
            "material": "thermoplastic polyurethane (TPU)",
            "form": "self-adhesive thin film",
            "function": "screen protection",
            "end_use": "mobile phone screen",
            "features": ["HD", "matte", "anti-blue-ray", "UV", "privacy", "50 pcs", "fits all phones"],
            "origin_brand": None,
        })
    if name == "stage3_l1":
        present = [c["code"] for c in data["candidates"]]
        keep = [c for c in PREFERRED_L1 if c in present]
        keep += [c for c in present if c not in keep]
        return _reply({"keep": keep[:10]})
    if name == "stage4_l2":
        return _reply({
            "keep_final": ["3919", "3920", "3926"],
            "demotions": [{"code": "3926", "clause_id": "39-P1"}],
        })
    if name == "stage4_confirm":
        return _reply({
            "chosen": "3919",
            "pros": ["the film is self-adhesive, which heading 39.19 names expressly",
                     "the chapter priority note sends self-adhesive flat shapes to 39.19"],
            "cons": ["39.20 also covers plastic film, but without the self-adhesive qualifier"],
            "gir_clauses": ["GIR1", "GIR3a"],
        })
    if name == "stage5_subheading":
        heading = data["heading"]["code"]
        pick = {
            "3919": {"six_digit": "391990", "eight_digit": None, "ambiguous": True,
                     "gir_clauses": ["GIR6"]},
            "3920": {"six_digit": "392099", "eight_digit": None, "ambiguous": False,
                     "gir_clauses": ["GIR6"]},
            "3926": {"six_digit": "392690", "eight_digit": None, "ambiguous": False,
                     "gir_clauses": ["GIR6"]},
        }[heading]
        return _reply(pick)
    if name == "stage6_score":
        src = data["sources"]
        p1 = src["39-P1"]
        return _reply({"top3": [
            {
                "code": "391990", "confidence": 0.86,
                "pros": ["self-adhesive plastic film", "not presented in rolls of width 20 cm or less"],
                "cons": ["the eight-digit split depends on the polymer, which the listing does not state"],
                "gir_clauses": ["GIR1", "GIR3a", "GIR6"],
                "citations": [
                    {"clause_id": "node:3919", "quoted_text": src["node:3919"]},
                    {"clause_id": "GIR3a", "quoted_text": src["GIR3a"],
                     "load_bearing_span": [0, len(src["GIR3a"])]},
                    {"clause_id": "39-P1", "quoted_text": p1,
                     "load_bearing_span": [0, p1.index(" in preference")]},
                ],
            },
            {
                "code": "392099", "confidence": 0.09,
                "pros": ["plastic film of other plastics"],
                "cons": ["39.20 covers film that is not self-adhesive"],
                "gir_clauses": ["GIR3a"], "citations": [],
            },
            {
                "code": "392690", "confidence": 0.05,
                "pros": ["residual heading for articles of plastics"],
                "cons": ["residual heading yields to the specific 39.19"],
                "gir_clauses": ["GIR3a"], "citations": [],
            },
        ]})
    if name == "stage6_spans":
        spans = []
        for c in data["citations"]:
            text = c["quoted_text"]
            end = text.find(", of plastics")
            spans.append({"index": c["index"], "start": 0, "end": end if end > 0 else len(text)})
        return _reply({"spans": spans})
    raise KeyError(f"no scripted reply for {name}")


def main(out_path: str | None = None) -> int:
    data = resources.files("hsclassify") / "data"
    corpus = parse_corpus(data / "corpus_fixture.jsonl")
    recorder = RecordingBackend(FunctionBackend(respond))
    engine = ClassificationEngine.build(corpus, recorder)
    decision, trace = engine.classify(DESCRIPTION, query_id="tpu-screen-film")
    print("stage 2:", trace.retrieved_codes())
    print("top-1:", decision.top3[0].code, decision.top3[0].confidence)
    recorder.dump(out_path or str(data / "golden_fixtures.jsonl"))
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
