"""Parser and deterministic checks for prover proof documents.

A proof document is UTF-8 markdown with three structured elements:

* a level-1 ``# Problem Restatement`` section,
* ``<key-original-step>`` tags around the novel parts of the argument,
* fenced ``citation`` blocks and exactly one fenced ``subgoal-tree`` block,
  both written as ``key: value`` lines.

All spans are UTF-8 byte offsets into the raw text. See docs/proof_document.md
for the grammar.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Iterable

RESTATEMENT_TITLE = "problem restatement"
KEY_STEP_TAG = "key-original-step"

DEFAULT_VAGUE_LEXICON: tuple[str, ...] = (
    "clearly",
    "obviously",
    "straightforward",
    "it is easy to see",
    "trivially",
    "evidently",
)

CITATION_KEYS = ("id", "statement", "source_title", "authors", "location", "url", "conditions_check")
_CITATION_REQUIRED = ("id", "statement", "source_title", "location")
SUBGOAL_KEYS = ("id", "claim", "parent", "resolution")

_OPEN_RE = re.compile(r'<key-original-step(?:\s+id\s*=\s*"([^"]*)")?\s*>')
_CLOSE_RE = re.compile(r"</key-original-step\s*>")
_HEADING_RE = re.compile(r"^(#{1,6})[ \t]+(.*?)[ \t]*#*[ \t]*$")
_FENCE_RE = re.compile(r"^(`{3,}|~{3,})[ \t]*([^\s`]*)[^\n]*$")
_KV_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_-]*)[ \t]*:[ \t]?(.*)$")
_ANCHOR_RE = re.compile(r'<a\s+(?:id|name)\s*=\s*"([^"]+)"\s*/?>|\{#([A-Za-z0-9_.:-]+)\}')


class ParseError(ValueError):
    """Raised when a proof document violates the grammar.

    ``kind`` is one of UnclosedTag, NestedTag, StrayCloseTag, EmptyKeyStep,
    DuplicateId, DuplicateSection, MissingSection, MalformedCitation,
    MalformedSubgoalTree. ``offset`` is a byte offset into the input.
    """

    def __init__(self, kind: str, offset: int, detail: str = ""):
        self.kind = kind
        self.offset = offset
        self.detail = detail
        msg = f"{kind} at byte {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass(frozen=True)
class Section:
    title: str
    level: int  # 0 for the preamble before the first heading
    start: int
    end: int
    text: str


@dataclass(frozen=True)
class KeyOriginalStep:
    id: str
    span: tuple[int, int]
    content_span: tuple[int, int]
    content: str


@dataclass(frozen=True)
class CitationBlock:
    id: str
    statement: str
    source_title: str
    authors: str = ""
    location: str = ""
    url: str | None = None
    conditions_check: str = ""
    span: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class SubgoalNode:
    id: str
    claim: str
    parent: str | None = None
    resolution: str = ""

    @property
    def resolution_kind(self) -> str:
        """One of ``children``, ``anchor``, ``citation``, ``empty`` or ``invalid``."""
        res = self.resolution.strip()
        if not res:
            return "empty"
        if res == "children":
            return "children"
        if res.startswith("#") and len(res) > 1:
            return "anchor"
        kind, sep, target = res.partition(":")
        if sep and kind in ("anchor", "citation") and target.strip():
            return kind
        return "invalid"

    @property
    def resolution_target(self) -> str:
        res = self.resolution.strip()
        if res.startswith("#"):
            return res[1:]
        return res.partition(":")[2].strip()


@dataclass(frozen=True)
class SubgoalTree:
    nodes: tuple[SubgoalNode, ...]
    root_id: str | None

    def node(self, node_id: str) -> SubgoalNode | None:
        for n in self.nodes:
            if n.id == node_id:
                return n
        return None

    def children(self, node_id: str) -> list[SubgoalNode]:
        return [n for n in self.nodes if n.parent == node_id]


@dataclass(frozen=True)
class ProofDocument:
    raw_text: str
    body: tuple[Section, ...]
    key_steps: tuple[KeyOriginalStep, ...]
    citations: tuple[CitationBlock, ...]
    subgoal_tree: SubgoalTree
    restatement_span: tuple[int, int] | None
    anchors: frozenset[str] = field(default_factory=frozenset)

    @property
    def problem_restatement(self) -> str:
        if self.restatement_span is None:
            return ""
        return self.slice(*self.restatement_span)

    @property
    def raw_bytes(self) -> bytes:
        return self.raw_text.encode("utf-8")

    def slice(self, start: int, end: int) -> str:
        return self.raw_bytes[start:end].decode("utf-8")

    def citation(self, cid: str) -> CitationBlock | None:
        for c in self.citations:
            if c.id == cid:
                return c
        return None

    def line_col(self, offset: int) -> tuple[int, int]:
        """1-based (line, column) for a byte offset, for display only."""
        prefix = self.raw_bytes[:offset].decode("utf-8", errors="replace")
        line = prefix.count("\n") + 1
        col = len(prefix) - (prefix.rfind("\n") + 1) + 1
        return line, col


class _Offsets:
    """Maps str indices to UTF-8 byte offsets."""

    def __init__(self, text: str):
        if text.isascii():
            self._table = None
        else:
            self._table = [0, *accumulate(len(ch.encode("utf-8")) for ch in text)]

    def __call__(self, i: int) -> int:
        return i if self._table is None else self._table[i]


@dataclass
class _Fence:
    tag: str
    start: int  # str index of the opening fence line
    end: int  # str index just past the closing fence line (or EOF)
    body_start: int
    body_end: int
    closed: bool


def _lines(text: str) -> Iterable[tuple[int, str]]:
    pos = 0
    for line in text.splitlines(keepends=True):
        yield pos, line
        pos += len(line)


def _scan_fences(text: str) -> list[_Fence]:
    fences: list[_Fence] = []
    current: tuple[str, int, str, int] | None = None  # marker, start, tag, body_start
    for pos, line in _lines(text):
        stripped = line.rstrip("\r\n")
        if current is None:
            m = _FENCE_RE.match(stripped)
            if m:
                current = (m.group(1), pos, m.group(2).lower(), pos + len(line))
        else:
            marker, start, tag, body_start = current
            s = stripped.strip()
            if s and s[0] == marker[0] and set(s) == {marker[0]} and len(s) >= len(marker):
                fences.append(_Fence(tag, start, pos + len(line), body_start, pos, True))
                current = None
    if current is not None:
        marker, start, tag, body_start = current
        fences.append(_Fence(tag, start, len(text), body_start, len(text), False))
    return fences


def _inside(pos: int, fences: list[_Fence]) -> bool:
    return any(f.start <= pos < f.end for f in fences)


def slugify(title: str) -> str:
    s = re.sub(r"[^\w\s-]", "", title.strip().lower())
    return re.sub(r"\s+", "-", s)


def _headings(text: str, fences: list[_Fence]) -> list[tuple[int, int, int, str]]:
    """(start, line_end, level, title) for every ATX heading outside fences."""
    out = []
    for pos, line in _lines(text):
        if _inside(pos, fences):
            continue
        m = _HEADING_RE.match(line.rstrip("\r\n"))
        if m:
            out.append((pos, pos + len(line), len(m.group(1)), m.group(2)))
    return out


def _parse_kv(body: str, block_start: int, off: _Offsets, *, on_error) -> list[tuple[int, dict[str, str]]]:
    """Parse ``key: value`` records separated by blank lines.

    A leading ``- `` starts a new record; indented lines continue the previous
    value. Returns (byte offset, record) pairs.
    """
    records: list[tuple[int, dict[str, str]]] = []
    current: dict[str, str] | None = None
    last_key: str | None = None
    for pos, line in _lines(body):
        raw = line.rstrip("\r\n")
        at = off(block_start + pos)
        if not raw.strip():
            current, last_key = None, None
            continue
        if raw[:1] in (" ", "\t") and current is not None and last_key is not None:
            current[last_key] = (current[last_key] + "\n" + raw.strip()).strip("\n")
            continue
        if raw.startswith("- "):
            current, last_key = None, None
            raw = raw[2:]
        m = _KV_RE.match(raw)
        if not m:
            on_error(at, f"expected 'key: value', got {raw!r}")
        key, value = m.group(1), m.group(2).strip()
        if current is None:
            current = {}
            records.append((at, current))
        if key in current:
            on_error(at, f"repeated key {key!r}")
        current[key] = value
        last_key = key
    return records


def _parse_citation(fence: _Fence, text: str, off: _Offsets) -> CitationBlock:
    at = off(fence.start)

    def fail(where: int, detail: str, cid: str = "?"):
        raise ParseError("MalformedCitation", where, f"citation {cid}: {detail}")

    if not fence.closed:
        fail(at, "unclosed citation fence")
    records = _parse_kv(text[fence.body_start:fence.body_end], fence.body_start, off, on_error=fail)
    merged: dict[str, str] = {}
    for _, rec in records:
        for k, v in rec.items():
            if k in merged:
                fail(at, f"repeated key {k!r}")
            merged[k] = v
    cid = merged.get("id", "?") or "?"
    unknown = sorted(set(merged) - set(CITATION_KEYS))
    if unknown:
        fail(at, f"unknown key {unknown[0]!r}", cid)
    for key in _CITATION_REQUIRED:
        if not merged.get(key, "").strip():
            fail(at, f"missing {key}", cid)
    return CitationBlock(
        id=merged["id"].strip(),
        statement=merged["statement"],
        source_title=merged["source_title"],
        authors=merged.get("authors", ""),
        location=merged["location"],
        url=merged.get("url") or None,
        conditions_check=merged.get("conditions_check", ""),
        span=(off(fence.start), off(fence.end)),
    )


def _parse_subgoal_tree(fence: _Fence, text: str, off: _Offsets) -> SubgoalTree:
    def fail(where: int, detail: str):
        raise ParseError("MalformedSubgoalTree", where, detail)

    if not fence.closed:
        fail(off(fence.start), "unclosed subgoal-tree fence")
    records = _parse_kv(text[fence.body_start:fence.body_end], fence.body_start, off, on_error=fail)
    nodes: list[SubgoalNode] = []
    seen: set[str] = set()
    for at, rec in records:
        unknown = sorted(set(rec) - set(SUBGOAL_KEYS))
        if unknown:
            fail(at, f"unknown key {unknown[0]!r}")
        nid = rec.get("id", "").strip()
        if not nid:
            fail(at, "node without id")
        if not rec.get("claim", "").strip():
            fail(at, f"node {nid} has no claim")
        if nid in seen:
            raise ParseError("DuplicateId", at, f"subgoal {nid}")
        seen.add(nid)
        parent = rec.get("parent", "").strip() or None
        nodes.append(SubgoalNode(nid, rec["claim"], parent, rec.get("resolution", "").strip()))
    if not nodes:
        fail(off(fence.start), "empty subgoal tree")
    roots = [n.id for n in nodes if n.parent is None]
    return SubgoalTree(tuple(nodes), roots[0] if roots else None)


def _parse_key_steps(text: str, fences: list[_Fence], off: _Offsets) -> list[KeyOriginalStep]:
    events = []
    for m in _OPEN_RE.finditer(text):
        if not _inside(m.start(), fences):
            events.append((m.start(), "open", m))
    for m in _CLOSE_RE.finditer(text):
        if not _inside(m.start(), fences):
            events.append((m.start(), "close", m))
    events.sort(key=lambda e: e[0])

    steps: list[KeyOriginalStep] = []
    ids: set[str] = set()
    open_m: re.Match | None = None
    for _, kind, m in events:
        if kind == "open":
            if open_m is not None:
                raise ParseError("NestedTag", off(m.start()), f"opened inside tag at byte {off(open_m.start())}")
            open_m = m
            continue
        if open_m is None:
            raise ParseError("StrayCloseTag", off(m.start()))
        content = text[open_m.end():m.start()]
        if not content.strip():
            raise ParseError("EmptyKeyStep", off(open_m.start()))
        sid = (open_m.group(1) or "").strip() or f"ks{len(steps) + 1}"
        if sid in ids:
            raise ParseError("DuplicateId", off(open_m.start()), f"key step {sid}")
        ids.add(sid)
        steps.append(
            KeyOriginalStep(
                id=sid,
                span=(off(open_m.start()), off(m.end())),
                content_span=(off(open_m.end()), off(m.start())),
                content=content,
            )
        )
        open_m = None
    if open_m is not None:
        raise ParseError("UnclosedTag", off(open_m.start()))
    return steps


def _restatement_span(
    text: str, headings: list[tuple[int, int, int, str]], off: _Offsets
) -> tuple[int, int] | None:
    found = [i for i, h in enumerate(headings) if h[2] == 1 and h[3].strip().lower() == RESTATEMENT_TITLE]
    if not found:
        return None
    if len(found) > 1:
        raise ParseError("DuplicateSection", off(headings[found[1]][0]), "Problem Restatement")
    i = found[0]
    start = headings[i][1]
    # The restated claim runs to the next heading of any level, fenced block
    # or key-step tag, whichever comes first.
    fences = _scan_fences(text)
    candidates = [h[0] for h in headings[i + 1:]]
    candidates += [f.start for f in fences if f.start >= start]
    candidates += [m.start() for m in _OPEN_RE.finditer(text, start) if not _inside(m.start(), fences)]
    end = min(candidates, default=len(text))
    chunk = text[start:end]
    lead = len(chunk) - len(chunk.lstrip())
    trail = len(chunk.rstrip())
    if trail <= lead:
        return (off(start), off(start))
    return (off(start + lead), off(start + trail))


def parse_proof_document(raw: str | bytes) -> ProofDocument:
    """Parse prover output into a :class:`ProofDocument`.

    Raises :class:`ParseError` naming the byte offset of the first problem.
    """
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    off = _Offsets(text)
    fences = _scan_fences(text)
    headings = _headings(text, fences)

    starts = [h[0] for h in headings]
    bounds = ([0] if not starts or starts[0] != 0 else []) + starts + [len(text)]
    sections = []
    for a, b in zip(bounds, bounds[1:]):
        h = next((h for h in headings if h[0] == a), None)
        title, level = (h[3], h[2]) if h else ("", 0)
        sections.append(Section(title, level, off(a), off(b), text[a:b]))

    key_steps = _parse_key_steps(text, fences, off)

    citations: list[CitationBlock] = []
    tree: SubgoalTree | None = None
    for f in fences:
        if f.tag == "citation":
            c = _parse_citation(f, text, off)
            if any(x.id == c.id for x in citations):
                raise ParseError("DuplicateId", off(f.start), f"citation {c.id}")
            citations.append(c)
        elif f.tag == "subgoal-tree":
            if tree is not None:
                raise ParseError("MalformedSubgoalTree", off(f.start), "more than one subgoal-tree block")
            tree = _parse_subgoal_tree(f, text, off)
    if tree is None:
        raise ParseError("MissingSection", len(text.encode("utf-8")), "subgoal-tree")

    anchors = {slugify(h[3]) for h in headings}
    anchors.update(s.id for s in key_steps)
    for m in _ANCHOR_RE.finditer(text):
        if not _inside(m.start(), fences):
            anchors.add(m.group(1) or m.group(2))

    return ProofDocument(
        raw_text=text,
        body=tuple(sections),
        key_steps=tuple(key_steps),
        citations=tuple(citations),
        subgoal_tree=tree,
        restatement_span=_restatement_span(text, headings, off),
        anchors=frozenset(anchors),
    )


def serialize_proof_document(doc: ProofDocument) -> str:
    return "".join(s.text for s in doc.body)


def extract_problem_restatement(doc: ProofDocument) -> str:
    return doc.problem_restatement


# --- subgoal tree --------------------------------------------------------


@dataclass(frozen=True, order=True)
class TreeFinding:
    code: str
    ids: tuple[str, ...] = ()
    detail: str = ""


def _tree_cycles(nodes: dict[str, SubgoalNode]) -> list[tuple[str, ...]]:
    # Each node has at most one parent, so cycles are disjoint simple loops.
    state: dict[str, int] = {}
    cycles = []
    for start in nodes:
        path: list[str] = []
        cur: str | None = start
        while cur is not None and cur in nodes and cur not in state:
            state[cur] = 1
            path.append(cur)
            cur = nodes[cur].parent
        if cur is not None and state.get(cur) == 1 and cur in path:
            loop = path[path.index(cur):]
            i = loop.index(min(loop))
            cycles.append(tuple(loop[i:] + loop[:i]))
        for p in path:
            state[p] = 2
    return sorted(cycles)


def validate_subgoal_tree(doc: ProofDocument, *, require_citation_coverage: bool = True) -> list[TreeFinding]:
    """Structural findings for the declared subgoal tree; empty means well-formed."""
    tree = doc.subgoal_tree
    nodes = {n.id: n for n in tree.nodes}
    findings: list[TreeFinding] = []

    roots = sorted(n.id for n in tree.nodes if n.parent is None)
    if not roots:
        findings.append(TreeFinding("no_root"))
    elif len(roots) > 1:
        findings.append(TreeFinding("multiple_roots", tuple(roots)))

    for n in tree.nodes:
        if n.parent is not None and n.parent not in nodes:
            findings.append(TreeFinding("orphan", (n.id,), f"parent {n.parent} does not exist"))

    findings.extend(TreeFinding("cycle", c) for c in _tree_cycles(nodes))

    citation_ids = {c.id for c in doc.citations}
    for n in tree.nodes:
        kind = n.resolution_kind
        target = n.resolution_target
        if kind == "empty":
            findings.append(TreeFinding("unresolved", (n.id,)))
        elif kind == "invalid":
            findings.append(TreeFinding("bad_resolution", (n.id,), n.resolution))
        elif kind == "anchor" and target not in doc.anchors:
            findings.append(TreeFinding("dangling_resolution", (n.id,), f"anchor {target}"))
        elif kind == "citation" and target not in citation_ids:
            findings.append(TreeFinding("dangling_resolution", (n.id,), f"citation {target}"))
        elif kind == "children" and not tree.children(n.id):
            findings.append(TreeFinding("empty_composition", (n.id,)))

    if require_citation_coverage:
        for c in doc.citations:
            if not any(_references(n, c.id) for n in tree.nodes):
                findings.append(TreeFinding("uncited_citation", (c.id,)))

    return sorted(findings)


def _references(node: SubgoalNode, cid: str) -> bool:
    if node.resolution_kind == "citation" and node.resolution_target == cid:
        return True
    return re.search(rf"(?<![\w-]){re.escape(cid)}(?![\w-])", node.claim) is not None


# --- key-step lint -------------------------------------------------------


@dataclass(frozen=True, order=True)
class LintFinding:
    code: str  # vague_phrase | missing_key_step
    step_id: str = ""
    phrase: str = ""
    offset: int = 0
    end: int = 0


def _phrase_pattern(phrase: str) -> re.Pattern:
    words = [re.escape(w) for w in phrase.split()]
    return re.compile(r"(?<!\w)" + r"\s+".join(words) + r"(?!\w)", re.IGNORECASE)


def lint_key_steps(doc: ProofDocument, lexicon: Iterable[str] = DEFAULT_VAGUE_LEXICON) -> list[LintFinding]:
    phrases = [p.lower() for p in lexicon]
    if not phrases:
        raise ValueError("lexicon must not be empty")
    if not doc.key_steps:
        return [LintFinding("missing_key_step")]
    findings = []
    for step in doc.key_steps:
        base = step.content_span[0]
        content = step.content
        off = _Offsets(content)
        for phrase in phrases:
            for m in _phrase_pattern(phrase).finditer(content):
                findings.append(
                    LintFinding("vague_phrase", step.id, phrase, base + off(m.start()), base + off(m.end()))
                )
    return sorted(findings, key=lambda f: (f.offset, f.phrase))


def normalize_text(text: str) -> str:
    """NFC, collapse whitespace runs to one space, trim."""
    return " ".join(unicodedata.normalize("NFC", text).split())
