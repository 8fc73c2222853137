"""Shared helpers for the test suite."""

from __future__ import annotations

import importlib.util
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

from hsclassify.corpus import parse_corpus
from hsclassify.gateway import BackendConfig, FunctionBackend, ScriptedBackend
from hsclassify.pipeline import ClassificationEngine

ROOT = Path(__file__).resolve().parent.parent
TESTDATA = Path(__file__).resolve().parent / "data"
EVAL = TESTDATA / "eval"
PACKAGED = Path(str(resources.files("hsclassify") / "data"))
GOLDEN_CORPUS = PACKAGED / "corpus_fixture.jsonl"
GOLDEN_FIXTURES = PACKAGED / "golden_fixtures.jsonl"
MINI_CORPUS = TESTDATA / "corpus_ch39.jsonl"


@lru_cache(maxsize=None)
def golden_script():
    """The fixture builder script, imported as a module (its ``respond`` plays the model)."""
    path = ROOT / "scripts" / "build_golden_fixtures.py"
    spec = importlib.util.spec_from_file_location("build_golden_fixtures", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def golden_description() -> str:
    return golden_script().DESCRIPTION


@lru_cache(maxsize=None)
def golden_corpus():
    return parse_corpus(GOLDEN_CORPUS)


def scripted_engine(fixture_path=GOLDEN_FIXTURES, **config_overrides):
    from hsclassify.pipeline import PipelineConfig

    backend = ScriptedBackend(BackendConfig(kind="scripted", fixture_path=str(fixture_path)))
    return ClassificationEngine.build(golden_corpus(), backend, PipelineConfig(**config_overrides))


def function_engine(fn, max_repair_retries: int = 2, corpus=None, **config_overrides):
    from hsclassify.pipeline import PipelineConfig

    return ClassificationEngine.build(corpus or golden_corpus(), FunctionBackend(fn, max_repair_retries),
                                      PipelineConfig(**config_overrides))


def write_jsonl(path: Path, records) -> Path:
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8")
    return path


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").split("\n") if line.strip()]
