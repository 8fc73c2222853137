"""``hsclassify`` command-line entry point.

Exit codes: 0 success, 1 domain failure (bad corpus, failed stage, bad
records), 2 usage error (unknown subcommand, bad flag, bad config key).
"""

from __future__ import annotations

import argparse
import configparser
import json
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from importlib import resources
from itertools import combinations
from pathlib import Path

from .codes import render_code
from .corpus import CorpusError, TariffCorpus, parse_corpus
from .evaluation import (
    AUDIT_BUCKETS,
    EvaluationError,
    PredictionRecord,
    agreement,
    attribution_table,
    audit_shares,
    corrected_accuracy,
    evaluate,
    final_top1_4d,
    load_audit,
    load_gold,
    load_predictions,
    render_attribution,
    render_audit,
    write_jsonl,
)
from .gateway import BackendConfig, GatewayError, make_backend
from .pipeline import ClassificationEngine, FinalDecision, PipelineConfig, PipelineError, PipelineTrace
from .pipeline.engine import load_synonyms
from .pipeline.stages import verify_citations
from .retrieval import RetrievalError, load_vectors

class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------------

_PATH_KEYS = ("corpus", "vectors", "synonyms", "output_dir")
_BACKEND_KEYS = tuple(f.name for f in fields(BackendConfig))
_PIPELINE_KEYS = tuple(PipelineConfig.field_names())
_RETRIEVAL_KEYS = ("embedder",)
SECTIONS = {"paths": _PATH_KEYS, "backend": _BACKEND_KEYS, "pipeline": _PIPELINE_KEYS,
            "retrieval": _RETRIEVAL_KEYS}


def _packaged(name: str) -> str:
    return str(resources.files("hsclassify") / "data" / name)


def _defaults() -> dict[str, dict[str, str]]:
    return {
        "paths": {"corpus": _packaged("corpus_fixture.jsonl"), "output_dir": "hsclassify-out"},
        "backend": {"kind": "scripted", "fixture_path": _packaged("golden_fixtures.jsonl")},
        "pipeline": {},
        "retrieval": {"embedder": "hashing"},
    }


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError:
        raise UsageError(f"expected a number, got {value!r}") from None
    return value


@dataclass
class CliConfig:
    corpus_path: Path
    output_dir: Path
    backend: BackendConfig
    pipeline: PipelineConfig
    vectors_path: Path | None = None
    synonyms_path: Path | None = None
    embedder: str = "hashing"

    @property
    def fixture_path(self) -> str | None:
        return self.backend.fixture_path


def load_config(path: str | None, overrides: list[str]) -> CliConfig:
    """Merge defaults, then the config file, then ``--set section.key=value`` flags."""
    merged = _defaults()
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read(path, encoding="utf-8")
        base = Path(path).parent
        for section in parser.sections():
            if section not in SECTIONS:
                raise UsageError(f"{path}: unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in SECTIONS[section]:
                    raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
                if section == "paths" or key == "fixture_path":
                    value = str((base / value).resolve()) if value else value
                merged[section][key] = value
    for item in overrides:
        m = re.fullmatch(r"(\w+)\.(\w+)=(.*)", item, flags=re.S)
        if not m:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        section, key, value = m.groups()
        if section not in SECTIONS or key not in SECTIONS[section]:
            raise UsageError(f"--set: unknown key {section}.{key}")
        merged[section][key] = value

    p = merged["paths"]
    backend_defaults = BackendConfig(kind="scripted", fixture_path="-")
    backend_kw = {k: _coerce(v, getattr(backend_defaults, k) if getattr(backend_defaults, k) is not None else "")
                  for k, v in merged["backend"].items()}
    pipe_defaults = PipelineConfig()
    pipe_kw = {k: _coerce(v, getattr(pipe_defaults, k)) for k, v in merged["pipeline"].items()}
    embedder = merged["retrieval"].get("embedder", "hashing")
    if embedder not in ("hashing", "http"):
        raise UsageError("retrieval.embedder must be 'hashing' or 'http'")
    try:
        backend = BackendConfig(**backend_kw)
        pipeline = PipelineConfig(**pipe_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return CliConfig(
        corpus_path=Path(p["corpus"]),
        output_dir=Path(p.get("output_dir") or "hsclassify-out"),
        backend=backend,
        pipeline=pipeline,
        vectors_path=Path(p["vectors"]) if p.get("vectors") else None,
        synonyms_path=Path(p["synonyms"]) if p.get("synonyms") else None,
        embedder=embedder,
    )


def _require(path: Path | str | None, what: str) -> None:
    if path is not None and not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def _check_paths(cfg: CliConfig) -> None:
    _require(cfg.corpus_path, "corpus file")
    _require(cfg.vectors_path, "vectors file")
    _require(cfg.synonyms_path, "synonym table")
    if cfg.backend.kind == "scripted":
        _require(cfg.backend.fixture_path, "fixture file")


def build_engine(cfg: CliConfig, corpus: TariffCorpus | None = None) -> ClassificationEngine:
    _check_paths(cfg)
    corpus = corpus or parse_corpus(cfg.corpus_path)
    backend = make_backend(cfg.backend)
    vectors = load_vectors(cfg.vectors_path)[0] if cfg.vectors_path else None
    embedder = None
    if cfg.embedder == "http":
        if not hasattr(backend, "embed"):
            raise UsageError("retrieval.embedder = http needs backend.kind = http")
        embedder = backend.embed
    return ClassificationEngine.build(corpus, backend, cfg.pipeline, embedder=embedder, vectors=vectors,
                                      synonyms=load_synonyms(cfg.synonyms_path))


# -- output helpers -----------------------------------------------------------------

def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _safe_name(query_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", query_id) or "query"


def _print_decision(decision: FinalDecision, corpus: TariffCorpus, out) -> None:
    for rank, cand in enumerate(decision.top3, start=1):
        path = " > ".join(corpus.node(c).text for c in cand.code.ancestors()[1:] + [cand.code])
        print(f"{rank}. {render_code(cand.code)}  confidence {cand.confidence:.2f}  {path}", file=out)
        if cand.gir_clauses:
            print(f"   GIR: {', '.join(cand.gir_clauses)}", file=out)
        for cit in cand.citations:
            print(f"   [{cit.clause_id}] \"{cit.quoted_text}\"", file=out)
            if cit.load_bearing_span != (0, len(cit.quoted_text)):
                print(f"      load-bearing: \"{cit.load_bearing_text}\"", file=out)


# -- subcommands ------------------------------------------------------------------------

def cmd_ingest(args, cfg: CliConfig, out) -> int:
    path = Path(args.corpus) if args.corpus else cfg.corpus_path
    _require(path, "corpus file")
    corpus = parse_corpus(path)
    summary = {"path": str(path), "version": corpus.version, **corpus.summary()}
    print(f"corpus {corpus.version}", file=out)
    for key, value in corpus.summary().items():
        print(f"  {key:<12}{value:>6}", file=out)
    dest = _write_json(cfg.output_dir / "corpus_summary.json", summary)
    print(f"summary: {dest}", file=out)
    return 0


def cmd_classify(args, cfg: CliConfig, out) -> int:
    engine = build_engine(cfg)
    try:
        decision, trace = engine.classify(args.description, query_id=args.query_id)
    except PipelineError as exc:
        if exc.trace is not None:
            dest = cfg.output_dir / "traces" / f"{_safe_name(exc.trace.query_id)}.json"
            dest.parent.mkdir(parents=True, exist_ok=True)
            exc.trace.write(dest, include_timings=args.timings)
            print(f"partial trace: {dest}", file=sys.stderr)
        raise
    name = _safe_name(trace.query_id)
    trace_path = cfg.output_dir / "traces" / f"{name}.json"
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    trace.write(trace_path, include_timings=args.timings)
    decision_path = _write_json(cfg.output_dir / "decisions" / f"{name}.json", decision.to_dict())
    print(f"query {trace.query_id}", file=out)
    _print_decision(decision, engine.corpus, out)
    print(f"decision: {decision_path}", file=out)
    print(f"trace: {trace_path}", file=out)
    return 0


def cmd_batch(args, cfg: CliConfig, out) -> int:
    golds = load_gold(args.gold)
    engine = build_engine(cfg)
    trace_dir = cfg.output_dir / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)

    def run(gold):
        try:
            decision, trace = engine.classify(gold.description, query_id=gold.query_id)
            return decision, trace, None
        except PipelineError as exc:
            return None, exc.trace, f"stage {exc.stage} ({exc.stage_name}): {exc}"

    jobs = max(1, args.jobs)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(run, golds))
    else:
        results = [run(g) for g in golds]

    preds, errors = [], []
    for gold, (decision, trace, err) in zip(golds, results):
        trace_path = trace_dir / f"{_safe_name(gold.query_id)}.json"
        if trace is not None:
            trace.write(trace_path)
        if decision is None:
            errors.append({"query_id": gold.query_id, "error": err})
            continue
        preds.append(PredictionRecord(gold.query_id, tuple(decision.codes), str(trace_path)))
    write_jsonl(preds, cfg.output_dir / "predictions.jsonl")
    write_jsonl(errors, cfg.output_dir / "errors.jsonl")
    print(f"classified {len(preds)}/{len(golds)} queries ({len(errors)} failed)", file=out)
    for e in errors:
        print(f"  {e['query_id']}: {e['error']}", file=out)
    print(f"predictions: {cfg.output_dir / 'predictions.jsonl'}", file=out)
    return 0


def cmd_evaluate(args, cfg: CliConfig, out) -> int:
    report = evaluate(load_predictions(args.predictions), load_gold(args.gold))
    print(report.render(), end="", file=out)
    _write_json(cfg.output_dir / "eval_report.json", report.to_dict())
    return 0


def cmd_agree(args, cfg: CliConfig, out) -> int:
    a, b = load_predictions(args.run_a), load_predictions(args.run_b)
    result = {}
    for digits, label in ((4, "Four-digit"), (6, "Six-digit")):
        ratio = agreement(a, b, digits)
        result[f"{digits}d"] = ratio.to_dict()
        print(f"{label} top-1 agreement: {ratio.render()}", file=out)
    _write_json(cfg.output_dir / "agreement.json", result)
    return 0


def cmd_attribute(args, cfg: CliConfig, out) -> int:
    golds = {g.query_id: g.gold_code for g in load_gold(args.gold)}
    trace_files = sorted(Path(args.traces).glob("*.json"))
    if not trace_files:
        raise EvaluationError(f"no trace files in {args.traces}")
    errors, correct = [], 0
    for path in trace_files:
        trace = PipelineTrace.load(path)
        gold = golds.get(trace.query_id)
        if gold is None:
            raise EvaluationError(f"{path}: no gold record for {trace.query_id!r}")
        if final_top1_4d(trace) == gold[:4]:
            correct += 1
        else:
            errors.append(trace)
    table = attribution_table(errors, golds)
    print(render_attribution(table), end="", file=out)
    print(f"({correct} traces correct at four digits, not attributed)", file=out)
    _write_json(cfg.output_dir / "attribution.json", {
        "buckets": {b.value: n for b, n in table.items()},
        "total": sum(table.values()),
        "correct_skipped": correct,
    })
    return 0


def _parse_compare(items: list[str]) -> dict[str, float]:
    out = {}
    for item in items:
        m = re.fullmatch(r"([A-Da-d]*)=([0-9.]+)", item)
        if not m:
            raise UsageError(f"--compare expects BUCKETS=PERCENT (e.g. AD=85.8), got {item!r}")
        out["".join(sorted(m.group(1).upper()))] = float(m.group(2))
    return out


def cmd_audit(args, cfg: CliConfig, out) -> int:
    records = load_audit(args.audit)
    shares = audit_shares(records)
    print(render_audit(shares), end="", file=out)
    result: dict = {"shares": {b: r.to_dict() for b, r in shares.items()}}
    if args.base_correct is not None:
        total = args.total if args.total is not None else args.base_correct + len(records)
        reported = _parse_compare(args.compare)
        rows = []
        for size in range(len(AUDIT_BUCKETS) + 1):
            for credited in combinations(AUDIT_BUCKETS, size):
                ratio = corrected_accuracy(args.base_correct, total, records, credited)
                rows.append({"credited": "".join(credited), **ratio.to_dict()})
        result["corrected"] = rows
        print("\nCorrected accuracy (credited buckets)", file=out)
        for row in rows:
            label = row["credited"] or "none"
            line = f"  {label:<5}{row['percent']:>6.1f}% ({row['count']}/{row['n']})"
            if row["credited"] in reported:
                line += f"   reported elsewhere: {reported[row['credited']]:.1f}%"
            print(line, file=out)
        if reported:
            result["reported"] = reported
    _write_json(cfg.output_dir / "audit.json", result)
    return 0


def cmd_verify(args, cfg: CliConfig, out) -> int:
    _require(cfg.corpus_path, "corpus file")
    corpus = parse_corpus(cfg.corpus_path)
    try:
        data = json.loads(Path(args.decision).read_text(encoding="utf-8"))
        decision = FinalDecision.from_dict(data)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise EvaluationError(f"{args.decision}: unreadable decision ({exc})") from None
    report = verify_citations(corpus, decision)
    for check in report.checks:
        status = "grounded" if check.grounded else "UNGROUNDED"
        extra = f" ({check.error})" if check.error else ""
        print(f"{check.rank}. {render_code(check.code)} [{check.clause_id}] {status}{extra}", file=out)
    print(f"{report.grounded} grounded, {report.ungrounded} ungrounded", file=out)
    _write_json(cfg.output_dir / "citation_report.json", report.to_dict())
    return 0 if report.all_grounded else 1


# -- dispatch -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (see docs/config.md)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--output-dir", help="where machine-readable output goes")

    parser = argparse.ArgumentParser(prog="hsclassify", description="Rule-grounded HS code classification.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="validate and summarize a corpus file")
    p.add_argument("corpus", nargs="?", help="corpus file (default: configured corpus)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("classify", parents=[common], help="classify one product description")
    p.add_argument("description")
    p.add_argument("--query-id")
    p.add_argument("--timings", action="store_true", help="include wall times in the trace")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("batch", parents=[common], help="classify every query in a gold file")
    p.add_argument("gold")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("evaluate", parents=[common], help="top-1/top-3 accuracy at four and six digits")
    p.add_argument("predictions")
    p.add_argument("gold")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("agree", parents=[common], help="top-1 agreement between two prediction files")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.set_defaults(func=cmd_agree)

    p = sub.add_parser("attribute", parents=[common], help="stage attribution of four-digit errors")
    p.add_argument("traces", help="directory of trace files")
    p.add_argument("gold")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("audit", parents=[common], help="audit bucket shares and corrected accuracy")
    p.add_argument("audit")
    p.add_argument("--base-correct", type=int, help="queries already correct at six digits")
    p.add_argument("--total", type=int, help="total queries (default: base-correct + audited)")
    p.add_argument("--compare", action="append", default=[], metavar="BUCKETS=PERCENT",
                   help="externally reported value to print next to ours, e.g. AD=85.8")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify", parents=[common], help="check citation groundedness of a decision file")
    p.add_argument("decision")
    p.set_defaults(func=cmd_verify)
    return parser


DOMAIN_ERRORS = (CorpusError, EvaluationError, PipelineError, GatewayError, RetrievalError,
                 FileNotFoundError, OSError, ValueError, KeyError)


def dispatch(argv: list[str], out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    if not argv:
        parser.print_usage(err)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if not getattr(args, "func", None):
        parser.print_usage(err)
        return 2
    try:
        overrides = list(args.overrides)
        if args.output_dir:
            overrides.append(f"paths.output_dir={args.output_dir}")
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg, out)
    except UsageError as exc:
        print(f"hsclassify: {exc}", file=err)
        return 2
    except PipelineError as exc:
        print(f"hsclassify: stage {exc.stage} ({exc.stage_name}) failed: {exc}", file=err)
        return 1
    except DOMAIN_ERRORS as exc:
        print(f"hsclassify: {exc}", file=err)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
