import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsclassify.corpus import (
    ClauseType,
    CorpusError,
    Scope,
    UnknownCodeError,
    exclusion_redirects,
    notes_for,
    parse_corpus,
    serialize_corpus,
    write_corpus,
)
from support import GOLDEN_CORPUS, MINI_CORPUS, write_jsonl

GIR = [{"kind": "gir_rule", "id": "GIR1", "text": "Terms of the headings.", "precedence": 1}]


def node(code, text="x", **kw):
    rec = {"kind": "node", "code": code, "text": text}
    if len(code) > 2:
        rec["parent"] = code[:-2]
    rec.update(kw)
    return rec


def clause(cid, scope, scope_id, ctype, text="note text", **kw):
    return {"kind": "note_clause", "id": cid, "scope": scope, "scope_id": scope_id,
            "clause_type": ctype, "text": text, **kw}


def test_mini_fixture_counts():
    c = parse_corpus(MINI_CORPUS)
    s = c.summary()
    assert (s["chapter"], s["heading"], s["subheading"]) == (1, 4, 2)
    assert [h.code for h in c.headings()] == ["3916", "3919", "3920", "3926"]
    assert c.version == "ch39-mini"


def test_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    c = parse_corpus(p)
    assert len(c.nodes) == 0 and len(c.clauses) == 0
    assert c.version.startswith("sha256:")


def test_dangling_parent_named(tmp_path):
    p = write_jsonl(tmp_path / "c.jsonl", [node("40", section_id=7), node("400011", parent="4000")])
    with pytest.raises(CorpusError, match="4000"):
        parse_corpus(p)


def test_dangling_note_ref(tmp_path):
    p = write_jsonl(tmp_path / "c.jsonl", [node("39", section_id=7, note_refs=["nope"])])
    with pytest.raises(CorpusError, match="nope"):
        parse_corpus(p)


@pytest.mark.parametrize("records, needle", [
    ([node("39", section_id=7), node("39", section_id=7)], "duplicate"),
    ([clause("a", "chapter", "39", "inclusion"), clause("a", "chapter", "39", "inclusion")], "duplicate"),
    ([node("39", section_id=7, colour="red")], "unknown field"),
    ([node("39", text="", section_id=7)], "text"),
    ([clause("p", "chapter", "39", "priority")], "priority_kind"),
    ([clause("i", "chapter", "39", "inclusion", redirect_targets=["3919"])], "redirect"),
    ([clause("GIR1", "chapter", "39", "inclusion")], "reserved"),
    ([{"kind": "widget"}], "kind"),
    ([GIR[0], {"kind": "gir_rule", "id": "GIR3a", "text": "t", "precedence": 0}], "precedence"),
])
def test_violations_rejected(tmp_path, records, needle):
    p = write_jsonl(tmp_path / "c.jsonl", records)
    with pytest.raises(CorpusError, match=needle):
        parse_corpus(p)


def test_malformed_line_number(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(node("39", section_id=7)) + "\n{not json\n")
    with pytest.raises(CorpusError, match="line 2"):
        parse_corpus(p)


def test_order_independent(tmp_path):
    lines = MINI_CORPUS.read_text().splitlines()
    p = tmp_path / "rev.jsonl"
    p.write_text("\n".join(reversed(lines)) + "\n")
    assert parse_corpus(p) == parse_corpus(MINI_CORPUS)


def test_section_inherited_from_chapter():
    c = parse_corpus(MINI_CORPUS)
    assert c.node("391990").section_id == 7


def test_notes_for_chapter_and_section():
    c = parse_corpus(MINI_CORPUS)
    ids = [n.id for n in notes_for(c, "3919")]
    assert sorted(ids) == ["39-P1", "VII-N1"]
    with pytest.raises(UnknownCodeError, match="9999"):
        notes_for(c, "9999")


def test_notes_for_chapter_without_notes():
    c = parse_corpus(GOLDEN_CORPUS)
    assert notes_for(c, "4911") == []


def test_exclusion_redirects(tmp_path):
    recs = [node("39", section_id=7), node("3919"), node("3920"), node("49", section_id=10), node("4911"),
            clause("39-N1", "chapter", "39", "exclusion", "excluded; see heading 39.19", redirect_targets=["3919"]),
            clause("39-N2", "chapter", "39", "exclusion", "excluded", redirect_targets=["4911", "49"]),
            clause("49-N1", "chapter", "49", "inclusion")]
    c = parse_corpus(write_jsonl(tmp_path / "c.jsonl", recs))
    assert exclusion_redirects(c, "3920") == [("39-N1", "3919"), ("39-N2", "49"), ("39-N2", "4911")]
    assert exclusion_redirects(c, "4911") == []
    with pytest.raises(UnknownCodeError):
        exclusion_redirects(c, "8517")


def brute_force_notes(corpus, code):
    node = corpus.nodes[code]
    return sorted(
        cid for cid, c in corpus.clauses.items()
        if (c.scope is Scope.CHAPTER and c.scope_id == code[:2])
        or (c.scope is Scope.SECTION and node.section_id is not None and c.scope_id == str(node.section_id))
    )


@pytest.mark.parametrize("path", [MINI_CORPUS, GOLDEN_CORPUS])
def test_notes_for_matches_scan(path):
    c = parse_corpus(path)
    for code in c.nodes:
        assert sorted(n.id for n in notes_for(c, code)) == brute_force_notes(c, code)


@pytest.mark.parametrize("path", [MINI_CORPUS, GOLDEN_CORPUS])
def test_round_trip(tmp_path, path):
    c = parse_corpus(path)
    out = tmp_path / "rt.jsonl"
    write_corpus(c, out)
    again = parse_corpus(out)
    assert again == c
    assert serialize_corpus(again) == serialize_corpus(c)


def test_clause_text_preserved_exactly(tmp_path):
    text = "Excludes  “smart” films — see 39.19 (a)."
    recs = [node("39", section_id=7), clause("39-N1", "chapter", "39", "exclusion", text, redirect_targets=["39"])]
    c = parse_corpus(write_jsonl(tmp_path / "c.jsonl", recs))
    assert c.clauses["39-N1"].text == text
    assert c.clauses["39-N1"].clause_type is ClauseType.EXCLUSION


def test_citable_text():
    c = parse_corpus(GOLDEN_CORPUS)
    assert c.citable_text("node:3919").startswith("Self-adhesive")
    assert c.citable_text("GIR3a").startswith("The heading which provides")
    assert c.citable_text("39-P1") == c.clauses["39-P1"].text
    with pytest.raises(KeyError):
        c.citable_text("zz")


# Random well-formed corpora: round trip and closure oracle.

@st.composite
def corpora(draw):
    chapters = draw(st.lists(st.sampled_from(["39", "40", "49", "84", "85"]), min_size=1, max_size=4, unique=True))
    recs = []
    for ch in chapters:
        recs.append(node(ch, f"chapter {ch}", section_id=draw(st.integers(1, 3))))
        for h in draw(st.lists(st.sampled_from(["01", "10", "19", "20"]), max_size=3, unique=True)):
            recs.append(node(ch + h, f"heading {ch}{h}"))
            for s in draw(st.lists(st.sampled_from(["10", "90"]), max_size=2, unique=True)):
                recs.append(node(ch + h + s, "Other"))
    for i in range(draw(st.integers(0, 6))):
        scope = draw(st.sampled_from(["section", "chapter"]))
        sid = draw(st.integers(1, 3)) if scope == "section" else draw(st.sampled_from(chapters))
        ctype = draw(st.sampled_from(["inclusion", "exclusion", "priority"]))
        extra = {}
        if ctype != "inclusion":
            extra["redirect_targets"] = draw(st.lists(st.sampled_from(chapters), max_size=2, unique=True))
        if ctype == "priority":
            extra["priority_kind"] = draw(st.sampled_from(["form_priority", "part_vs_whole", "other"]))
        recs.append(clause(f"N{i}", scope, sid, ctype, draw(st.text(min_size=1).filter(str.strip)), **extra))
    return draw(st.permutations(recs))


@settings(max_examples=60, deadline=None)
@given(corpora())
def test_random_corpora_properties(tmp_path_factory, recs):
    d = tmp_path_factory.mktemp("rc")
    c = parse_corpus(write_jsonl(d / "c.jsonl", recs))
    out = d / "rt.jsonl"
    write_corpus(c, out)
    assert parse_corpus(out) == c
    for code in c.nodes:
        assert sorted(n.id for n in notes_for(c, code)) == brute_force_notes(c, code)
