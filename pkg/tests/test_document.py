from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proofloop.document import (
    ParseError,
    extract_problem_restatement,
    lint_key_steps,
    normalize_text,
    parse_proof_document,
    serialize_proof_document,
    slugify,
    validate_subgoal_tree,
)

from conftest import DOCS

CORPUS = sorted(DOCS.glob("*.md"))


def doc_with_tree(records: str, extra: str = "") -> str:
    return (
        "# Problem Restatement\n\nProve P.\n\n"
        '<key-original-step id="k">Because Q.</key-original-step> <a id="a"></a>\n\n'
        f"{extra}```subgoal-tree\n{records}```\n"
    )


def tree_records(nodes: list[tuple[str, str | None, str]]) -> str:
    out = []
    for nid, parent, res in nodes:
        lines = [f"id: {nid}", f"claim: claim {nid}"]
        if parent is not None:
            lines.append(f"parent: {parent}")
        if res:
            lines.append(f"resolution: {res}")
        out.append("\n".join(lines) + "\n")
    return "\n".join(out)


# --- corpus -----------------------------------------------------------------


def test_corpus_has_ten_documents():
    assert len(CORPUS) == 10


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.stem)
def test_round_trip_is_byte_exact(path):
    raw = path.read_text(encoding="utf-8")
    doc = parse_proof_document(raw)
    assert serialize_proof_document(doc) == raw
    assert parse_proof_document(path.read_bytes()) == doc


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.stem)
def test_spans_are_utf8_byte_offsets(path):
    doc = parse_proof_document(path.read_text(encoding="utf-8"))
    data = doc.raw_bytes
    for step in doc.key_steps:
        a, b = step.content_span
        assert data[a:b].decode() == step.content
        s, e = step.span
        assert data[s:e].decode().startswith("<key-original-step")
        assert data[s:e].decode().endswith("</key-original-step>")
    for c in doc.citations:
        assert data[c.span[0]:c.span[1]].decode().startswith("```citation")
    for sec in doc.body:
        assert data[sec.start:sec.end].decode() == sec.text


def test_unicode_offsets_count_bytes():
    doc = parse_proof_document((DOCS / "05_unicode.md").read_text(encoding="utf-8"))
    step = doc.key_steps[0]
    text = doc.raw_text
    char_index = text.index("Ist x")
    assert step.content_span[0] <= len(text[:char_index].encode()) < step.content_span[1]
    assert len(text[:char_index].encode()) > char_index  # multibyte characters precede it


def test_restatement_stops_at_first_structural_element():
    doc = parse_proof_document((DOCS / "06_fenced_noise.md").read_text(encoding="utf-8"))
    assert extract_problem_restatement(doc) == "Show that 1 + 1 = 2."
    assert [k.id for k in doc.key_steps] == ["ks1"]  # the tag inside the code fence is ignored
    assert doc.citations == ()


def test_anchors_cover_headings_tags_and_explicit_ids():
    doc = parse_proof_document((DOCS / "01_parity.md").read_text(encoding="utf-8"))
    assert {"problem-restatement", "setup", "main-argument", "parity", "factor"} <= doc.anchors
    assert slugify("Main  Argument!") == "main-argument"


def test_citation_fields():
    doc = parse_proof_document((DOCS / "07_two_citations.md").read_text(encoding="utf-8"))
    lub = doc.citation("lub")
    assert lub.url == "https://example.org/rudin"
    assert lub.location == "Theorem 1.19"
    assert doc.citation("mono").url is None


# --- parse errors --------------------------------------------------------------


@pytest.mark.parametrize(
    "body, kind",
    [
        ("<key-original-step>open", "UnclosedTag"),
        ("<key-original-step><key-original-step>x</key-original-step></key-original-step>", "NestedTag"),
        ("stray </key-original-step>", "StrayCloseTag"),
        ("<key-original-step>  \n </key-original-step>", "EmptyKeyStep"),
        ('<key-original-step id="k">a</key-original-step><key-original-step id="k">b</key-original-step>', "DuplicateId"),
        ("```citation\nid: c\nstatement: s\n```\n", "MalformedCitation"),
    ],
)
def test_parse_errors_name_kind(body, kind):
    raw = f"# Problem Restatement\n\nP.\n\n{body}\n\n```subgoal-tree\nid: r\nclaim: r\nresolution: anchor:x\n```\n"
    with pytest.raises(ParseError) as exc:
        parse_proof_document(raw)
    assert exc.value.kind == kind
    assert 0 <= exc.value.offset <= len(raw.encode())


def test_missing_subgoal_tree_is_missing_section():
    with pytest.raises(ParseError) as exc:
        parse_proof_document("# Problem Restatement\n\nP.\n")
    assert exc.value.kind == "MissingSection"


def test_duplicate_restatement_section():
    raw = "# Problem Restatement\nA\n# Problem Restatement\nB\n```subgoal-tree\nid: r\nclaim: c\nresolution: #r\n```\n"
    with pytest.raises(ParseError) as exc:
        parse_proof_document(raw)
    assert exc.value.kind == "DuplicateSection"


def test_error_offset_points_at_tag():
    raw = "# Problem Restatement\n\nΣ P.\n\n<key-original-step>open\n"
    with pytest.raises(ParseError) as exc:
        parse_proof_document(raw)
    assert raw.encode()[exc.value.offset:].startswith(b"<key-original-step>")


# --- lint ----------------------------------------------------------------------


def test_vague_phrase_inside_tag_only():
    raw = doc_with_tree("id: r\nclaim: c\nresolution: #k\n", extra="Clearly this prose is outside.\n\n")
    raw = raw.replace("Because Q.", "Clearly, Q holds. It is easy\nto see that R.")
    doc = parse_proof_document(raw)
    found = lint_key_steps(doc)
    assert [(f.code, f.phrase) for f in found] == [("vague_phrase", "clearly"), ("vague_phrase", "it is easy to see")]
    data = doc.raw_bytes
    assert data[found[0].offset:found[0].end] == b"Clearly"
    assert data[found[1].offset:found[1].end] == b"It is easy\nto see"


def test_lint_is_word_bounded():
    raw = doc_with_tree("id: r\nclaim: c\nresolution: #k\n").replace("Because Q.", "Unclearly, obviousness.")
    assert lint_key_steps(parse_proof_document(raw)) == []


def test_custom_lexicon():
    raw = doc_with_tree("id: r\nclaim: c\nresolution: #k\n").replace("Because Q.", "Note that Q.")
    found = lint_key_steps(parse_proof_document(raw), ["note that"])
    assert [f.phrase for f in found] == ["note that"]


def test_missing_key_step():
    found = lint_key_steps(parse_proof_document((DOCS / "03_no_key_step.md").read_text()))
    assert [f.code for f in found] == ["missing_key_step"]


# --- subgoal tree validation ----------------------------------------------------


def test_tree_fixture_findings():
    orphan = validate_subgoal_tree(parse_proof_document((DOCS / "08_orphan_tree.md").read_text()))
    assert [(f.code, f.ids) for f in orphan] == [("orphan", ("stray",)), ("unresolved", ("open",))]
    cyc = validate_subgoal_tree(parse_proof_document((DOCS / "09_cycle_tree.md").read_text()))
    assert [(f.code, f.ids) for f in cyc] == [("cycle", ("b", "c"))]


def test_resolution_kinds():
    records = tree_records([
        ("r", None, "children"),
        ("x", "r", "anchor:nowhere"),
        ("y", "r", "citation:none"),
        ("z", "r", "magic"),
        ("w", "r", "children"),
    ])
    found = validate_subgoal_tree(parse_proof_document(doc_with_tree(records)))
    assert [(f.code, f.ids) for f in found] == [
        ("bad_resolution", ("z",)),
        ("dangling_resolution", ("x",)),
        ("dangling_resolution", ("y",)),
        ("empty_composition", ("w",)),
    ]


def test_citation_coverage_is_configurable():
    cite = "```citation\nid: c1\nstatement: s\nsource_title: t\nlocation: l\n```\n\n"
    doc = parse_proof_document(doc_with_tree("id: r\nclaim: c\nresolution: #k\n", extra=cite))
    assert [f.code for f in validate_subgoal_tree(doc)] == ["uncited_citation"]
    assert validate_subgoal_tree(doc, require_citation_coverage=False) == []


def tree_oracle(nodes: list[tuple[str, str | None, str]]) -> set[tuple[str, tuple[str, ...]]]:
    """Brute force: follow parent pointers from every node."""
    parent = {n: p for n, p, _ in nodes}
    ids = set(parent)
    out: set[tuple[str, tuple[str, ...]]] = set()
    roots = sorted(n for n in ids if parent[n] is None)
    if not roots:
        out.add(("no_root", ()))
    elif len(roots) > 1:
        out.add(("multiple_roots", tuple(roots)))
    for n in ids:
        if parent[n] is not None and parent[n] not in ids:
            out.add(("orphan", (n,)))
        walk, cur = [], n
        for _ in range(len(ids)):
            cur = parent.get(cur)
            if cur is None or cur not in ids:
                break
            walk.append(cur)
            if cur == n:
                loop, x = [min(walk)], parent[min(walk)]
                while x != loop[0]:
                    loop.append(x)
                    x = parent[x]
                out.add(("cycle", tuple(loop)))
                break
    for n, _, res in nodes:
        if res == "":
            out.add(("unresolved", (n,)))
        elif res == "children" and not any(parent[m] == n for m in ids):
            out.add(("empty_composition", (n,)))
    return out


NAMES = [f"n{i}" for i in range(8)]


@st.composite
def random_trees(draw):
    k = draw(st.integers(1, 8))
    ids = NAMES[:k]
    nodes = []
    for nid in ids:
        parent = draw(st.sampled_from([None, "ghost", *ids]))
        res = draw(st.sampled_from(["", "children", "anchor:a", "#k"]))
        nodes.append((nid, parent, res))
    return draw(st.permutations(nodes))


@settings(max_examples=300, deadline=None)
@given(random_trees())
def test_tree_validator_matches_brute_force(nodes):
    doc = parse_proof_document(doc_with_tree(tree_records(list(nodes))))
    got = {(f.code, f.ids) for f in validate_subgoal_tree(doc)}
    assert got == tree_oracle(list(nodes))


# --- properties --------------------------------------------------------------------

_chunks = st.sampled_from([
    "## Step {#s}\n\n",
    "Some prose with ünïcödé — and $x^2$.\n",
    '<key-original-step id="{}">detail {}</key-original-step>\n',
    "```python\n<key-original-step>\n# not a heading\n```\n",
    "```citation\nid: c{}\nstatement: s\nsource_title: t\nlocation: l\n```\n",
    "\n",
    "> quoted line\n",
])


@settings(max_examples=200, deadline=None)
@given(st.lists(_chunks, max_size=12))
def test_round_trip_property(chunks):
    parts = ["# Problem Restatement\n\nProve P.\n\n"]
    for i, c in enumerate(chunks):
        parts.append(c.format(f"x{i}", i) if "{}" in c else c)
    raw = "".join(parts) + "```subgoal-tree\nid: r\nclaim: c\nresolution: children\n```\n"
    doc = parse_proof_document(raw)
    assert serialize_proof_document(doc) == raw
    assert [k.id for k in doc.key_steps] == [f"x{i}" for i, c in enumerate(chunks) if c.startswith("<key")]


@given(st.text())
def test_normalize_text_is_idempotent(s):
    once = normalize_text(s)
    assert normalize_text(once) == once
    assert "  " not in once
