"""Tariff knowledge base: parsing, validation and note lookup.

The corpus file is UTF-8 JSON Lines. Each record carries a ``kind`` of
``node``, ``note_clause`` or ``gir_rule`` (plus an optional single ``meta``
record holding the tariff version). See ``docs/corpus_schema.json``.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .codes import CodeError, HsCode, Level

GIR_ORDER = ("GIR1", "GIR2a", "GIR2b", "GIR3a", "GIR3b", "GIR3c", "GIR4", "GIR5", "GIR6")
NODE_REF_PREFIX = "node:"


class CorpusError(ValueError):
    """Malformed or inconsistent corpus content."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownCodeError(KeyError):
    def __init__(self, code: str):
        self.code = code
        super().__init__(f"code {code!r} not in corpus")

    def __str__(self) -> str:
        return self.args[0]


class Scope(str, enum.Enum):
    SECTION = "section"
    CHAPTER = "chapter"


class ClauseType(str, enum.Enum):
    INCLUSION = "inclusion"
    EXCLUSION = "exclusion"
    PRIORITY = "priority"


class PriorityKind(str, enum.Enum):
    FORM_PRIORITY = "form_priority"
    PART_VS_WHOLE = "part_vs_whole"
    SPECIFIC_OVER_GENERIC = "specific_over_generic"
    OTHER = "other"


@dataclass(frozen=True)
class TariffNode:
    code: HsCode
    text: str
    parent: HsCode | None
    section_id: int
    note_refs: tuple[str, ...] = ()

    @property
    def level(self) -> Level:
        return self.code.level


@dataclass(frozen=True)
class NoteClause:
    id: str
    scope: Scope
    scope_id: str  # section number as decimal string, or a chapter code
    clause_type: ClauseType
    text: str
    redirect_targets: tuple[HsCode, ...] = ()
    priority_kind: PriorityKind | None = None
    # Phrases whose presence in extracted attributes signals the exclusion applies.
    keywords: tuple[str, ...] = ()


@dataclass(frozen=True)
class GirRule:
    id: str
    text: str
    precedence: int


@dataclass(frozen=True)
class TariffCorpus:
    version: str
    nodes: Mapping[HsCode, TariffNode]
    clauses: Mapping[str, NoteClause]
    gir: tuple[GirRule, ...]
    notes_by_code: Mapping[HsCode, tuple[str, ...]] = field(repr=False)

    def __contains__(self, code: object) -> bool:
        return code in self.nodes

    def node(self, code: str) -> TariffNode:
        try:
            return self.nodes[code]
        except KeyError:
            raise UnknownCodeError(code) from None

    def children(self, code: str) -> list[TariffNode]:
        return [n for c, n in sorted(self.nodes.items()) if n.parent == code]

    def headings(self) -> list[TariffNode]:
        return [n for c, n in sorted(self.nodes.items()) if n.level is Level.HEADING]

    def gir_rule(self, rule_id: str) -> GirRule:
        for rule in self.gir:
            if rule.id == rule_id:
                return rule
        raise KeyError(rule_id)

    @property
    def gir_ids(self) -> frozenset[str]:
        return frozenset(r.id for r in self.gir)

    def citable_text(self, ref: str) -> str:
        """Verbatim text behind a citation reference.

        A reference is a note clause id, a GIR id, or ``node:<digits>`` for
        the heading/subheading text itself.
        """
        if ref in self.clauses:
            return self.clauses[ref].text
        if ref.startswith(NODE_REF_PREFIX):
            return self.node(ref[len(NODE_REF_PREFIX):]).text
        for rule in self.gir:
            if rule.id == ref:
                return rule.text
        raise KeyError(ref)

    def summary(self) -> dict[str, int]:
        counts = {lvl.value: 0 for lvl in Level}
        for node in self.nodes.values():
            counts[node.level.value] += 1
        counts["clauses"] = len(self.clauses)
        counts["gir_rules"] = len(self.gir)
        return counts


def notes_for(corpus: TariffCorpus, code: str) -> list[NoteClause]:
    """Section and chapter notes constraining ``code`` (precomputed, one lookup)."""
    try:
        ids = corpus.notes_by_code[code]
    except KeyError:
        raise UnknownCodeError(code) from None
    return [corpus.clauses[i] for i in ids]


def exclusion_redirects(corpus: TariffCorpus, code: str) -> list[tuple[str, HsCode]]:
    """(clause id, target) pairs from exclusion clauses of the code's chapter."""
    if code not in corpus.nodes:
        raise UnknownCodeError(code)
    chapter = code[:2]
    pairs = [
        (clause.id, target)
        for clause in notes_for(corpus, code)
        if clause.clause_type is ClauseType.EXCLUSION
        and clause.scope is Scope.CHAPTER
        and clause.scope_id == chapter
        for target in clause.redirect_targets
    ]
    return sorted(pairs)


# -- parsing -----------------------------------------------------------------

_NODE_FIELDS = {"kind", "code", "text", "parent", "section_id", "note_refs"}
_CLAUSE_FIELDS = {
    "kind", "id", "scope", "scope_id", "clause_type", "text",
    "redirect_targets", "priority_kind", "keywords",
}
_GIR_FIELDS = {"kind", "id", "text", "precedence"}
_META_FIELDS = {"kind", "version"}


def _check_fields(rec: dict, allowed: set[str], required: set[str], line: int) -> None:
    extra = set(rec) - allowed
    if extra:
        raise CorpusError(f"unknown field(s) {sorted(extra)} in {rec['kind']} record", line)
    missing = required - set(rec)
    if missing:
        raise CorpusError(f"missing field(s) {sorted(missing)} in {rec['kind']} record", line)


def _code(raw, line: int, what: str) -> HsCode:
    try:
        return HsCode(raw)
    except CodeError as exc:
        raise CorpusError(f"bad {what}: {exc}", line) from None


def _parse_node(rec: dict, line: int) -> tuple[dict, int]:
    _check_fields(rec, _NODE_FIELDS, {"code", "text"}, line)
    code = _code(rec["code"], line, "code")
    text = rec["text"]
    if not isinstance(text, str) or not text.strip():
        raise CorpusError(f"node {code} has empty text", line)
    parent = rec.get("parent")
    if parent is not None:
        parent = _code(parent, line, "parent")
        if parent != code.parent:
            raise CorpusError(f"node {code} declares parent {parent}, expected {code.parent}", line)
    elif code.parent is not None and "parent" in rec:
        raise CorpusError(f"node {code} has null parent but is not a chapter", line)
    section = rec.get("section_id")
    if section is not None and (not isinstance(section, int) or not 1 <= section <= 21):
        raise CorpusError(f"node {code} section_id must be an integer 1-21", line)
    if section is None and code.parent is None:
        raise CorpusError(f"chapter {code} requires section_id", line)
    refs = rec.get("note_refs") or []
    if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
        raise CorpusError(f"node {code} note_refs must be a list of strings", line)
    return {"code": code, "text": text, "section_id": section, "note_refs": tuple(refs)}, line


def _parse_clause(rec: dict, line: int) -> NoteClause:
    _check_fields(rec, _CLAUSE_FIELDS, {"id", "scope", "scope_id", "clause_type", "text"}, line)
    cid = rec["id"]
    if not isinstance(cid, str) or not cid:
        raise CorpusError("clause id must be a non-empty string", line)
    if cid in GIR_ORDER or cid.startswith(NODE_REF_PREFIX):
        raise CorpusError(f"clause id {cid!r} collides with a reserved reference form", line)
    try:
        scope = Scope(rec["scope"])
        ctype = ClauseType(rec["clause_type"])
    except ValueError as exc:
        raise CorpusError(f"clause {cid}: {exc}", line) from None
    raw_scope_id = rec["scope_id"]
    if scope is Scope.SECTION:
        if isinstance(raw_scope_id, bool) or not isinstance(raw_scope_id, int) or not 1 <= raw_scope_id <= 21:
            raise CorpusError(f"clause {cid}: section scope_id must be an integer 1-21", line)
        scope_id = str(raw_scope_id)
    else:
        scope_id = _code(raw_scope_id, line, f"scope_id of clause {cid}")
        if len(scope_id) != 2:
            raise CorpusError(f"clause {cid}: chapter scope_id must be a 2-digit chapter", line)
        scope_id = str(scope_id)
    text = rec["text"]
    if not isinstance(text, str) or not text.strip():
        raise CorpusError(f"clause {cid} has empty text", line)
    targets = tuple(_code(t, line, f"redirect target of {cid}") for t in rec.get("redirect_targets") or [])
    if targets and ctype is ClauseType.INCLUSION:
        raise CorpusError(f"inclusion clause {cid} cannot carry redirect targets", line)
    pk = rec.get("priority_kind")
    if (pk is not None) != (ctype is ClauseType.PRIORITY):
        raise CorpusError(f"clause {cid}: priority_kind is required exactly for priority clauses", line)
    try:
        pk = PriorityKind(pk) if pk is not None else None
    except ValueError as exc:
        raise CorpusError(f"clause {cid}: {exc}", line) from None
    keywords = rec.get("keywords") or []
    if not isinstance(keywords, list) or not all(isinstance(k, str) and k.strip() for k in keywords):
        raise CorpusError(f"clause {cid}: keywords must be non-empty strings", line)
    return NoteClause(
        id=cid, scope=scope, scope_id=scope_id, clause_type=ctype, text=text,
        redirect_targets=targets, priority_kind=pk, keywords=tuple(keywords),
    )


def _parse_gir(rec: dict, line: int) -> GirRule:
    _check_fields(rec, _GIR_FIELDS, _GIR_FIELDS - {"kind"}, line)
    if rec["id"] not in GIR_ORDER:
        raise CorpusError(f"unknown GIR id {rec['id']!r}", line)
    if not isinstance(rec["precedence"], int) or isinstance(rec["precedence"], bool):
        raise CorpusError(f"{rec['id']}: precedence must be an integer", line)
    if not isinstance(rec["text"], str) or not rec["text"].strip():
        raise CorpusError(f"{rec['id']}: empty text", line)
    return GirRule(id=rec["id"], text=rec["text"], precedence=rec["precedence"])


def build_corpus(records: Iterable[tuple[int, dict]], default_version: str = "unversioned") -> TariffCorpus:
    """Validate ``(line_number, record)`` pairs into a corpus (order-independent)."""
    raw_nodes: dict[HsCode, tuple[dict, int]] = {}
    clauses: dict[str, NoteClause] = {}
    gir: dict[str, GirRule] = {}
    version = None

    for line, rec in records:
        if not isinstance(rec, dict) or "kind" not in rec:
            raise CorpusError("record must be an object with a 'kind' field", line)
        kind = rec["kind"]
        if kind == "node":
            data, _ = _parse_node(rec, line)
            if data["code"] in raw_nodes:
                raise CorpusError(f"duplicate code {data['code']}", line)
            raw_nodes[data["code"]] = (data, line)
        elif kind == "note_clause":
            clause = _parse_clause(rec, line)
            if clause.id in clauses:
                raise CorpusError(f"duplicate clause id {clause.id!r}", line)
            clauses[clause.id] = clause
        elif kind == "gir_rule":
            rule = _parse_gir(rec, line)
            if rule.id in gir:
                raise CorpusError(f"duplicate GIR id {rule.id!r}", line)
            gir[rule.id] = rule
        elif kind == "meta":
            _check_fields(rec, _META_FIELDS, {"version"}, line)
            if version is not None:
                raise CorpusError("more than one meta record", line)
            version = str(rec["version"])
        else:
            raise CorpusError(f"unknown record kind {kind!r}", line)

    # GIR precedence must order the rules as they are numbered.
    by_prec = sorted(gir.values(), key=lambda r: r.precedence)
    if len({r.precedence for r in by_prec}) != len(by_prec):
        raise CorpusError("GIR precedences must be distinct")
    if [r.id for r in by_prec] != [g for g in GIR_ORDER if g in gir]:
        raise CorpusError("GIR precedence order is inconsistent with rule numbering")

    nodes: dict[HsCode, TariffNode] = {}

    def resolve(code: HsCode) -> TariffNode:
        if code in nodes:
            return nodes[code]
        data, line = raw_nodes[code]
        parent = code.parent
        if parent is not None and parent not in raw_nodes:
            raise CorpusError(f"node {code}: dangling parent {parent}", line)
        section = data["section_id"]
        if parent is not None:
            parent_section = resolve(parent).section_id
            if section is None:
                section = parent_section
            elif section != parent_section:
                raise CorpusError(f"node {code}: section {section} differs from parent's {parent_section}", line)
        for ref in data["note_refs"]:
            if ref not in clauses:
                raise CorpusError(f"node {code}: dangling note_ref {ref!r}", line)
        node = TariffNode(code=code, text=data["text"], parent=parent, section_id=section,
                          note_refs=data["note_refs"])
        nodes[code] = node
        return node

    for code in sorted(raw_nodes, key=len):
        resolve(code)
    nodes = dict(sorted(nodes.items()))

    by_section: dict[str, list[str]] = {}
    by_chapter: dict[str, list[str]] = {}
    for cid in sorted(clauses):
        c = clauses[cid]
        (by_section if c.scope is Scope.SECTION else by_chapter).setdefault(c.scope_id, []).append(cid)

    notes_by_code = {
        code: tuple(by_section.get(str(node.section_id), []) + by_chapter.get(code[:2], []))
        for code, node in nodes.items()
    }

    if version is None:
        version = default_version
    return TariffCorpus(
        version=version,
        nodes=nodes,
        clauses=dict(sorted(clauses.items())),
        gir=tuple(by_prec),
        notes_by_code=notes_by_code,
    )


def _read_records(lines: Iterable[str]) -> Iterable[tuple[int, dict]]:
    for lineno, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            yield lineno, json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"invalid JSON: {exc.msg}", lineno) from None


def parse_corpus(path: str | Path) -> TariffCorpus:
    """Load and validate a corpus file.

    Without a ``meta`` record the version is a digest of the file bytes.
    """
    data = Path(path).read_bytes()
    text = data.decode("utf-8")
    digest = "sha256:" + hashlib.sha256(data).hexdigest()[:16]
    try:
        return build_corpus(_read_records(text.split("\n")), default_version=digest)
    except CorpusError as exc:
        raise CorpusError(f"{path}: {exc}") from None


def corpus_records(corpus: TariffCorpus) -> list[dict]:
    """Records in canonical order: meta, GIR rules, nodes, clauses."""
    out: list[dict] = [{"kind": "meta", "version": corpus.version}]
    for r in corpus.gir:
        out.append({"kind": "gir_rule", "id": r.id, "text": r.text, "precedence": r.precedence})
    for code, n in corpus.nodes.items():
        rec = {"kind": "node", "code": str(code), "text": n.text,
               "parent": str(n.parent) if n.parent else None, "section_id": n.section_id}
        if n.note_refs:
            rec["note_refs"] = list(n.note_refs)
        out.append(rec)
    for cid, c in corpus.clauses.items():
        rec = {
            "kind": "note_clause", "id": cid, "scope": c.scope.value,
            "scope_id": int(c.scope_id) if c.scope is Scope.SECTION else c.scope_id,
            "clause_type": c.clause_type.value, "text": c.text,
            "redirect_targets": [str(t) for t in c.redirect_targets],
            "priority_kind": c.priority_kind.value if c.priority_kind else None,
        }
        if c.keywords:
            rec["keywords"] = list(c.keywords)
        out.append(rec)
    return out


def serialize_corpus(corpus: TariffCorpus) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in corpus_records(corpus))


def write_corpus(corpus: TariffCorpus, path: str | Path) -> None:
    Path(path).write_text(serialize_corpus(corpus), encoding="utf-8")
