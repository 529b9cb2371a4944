"""Decomposition plans: the decomposer's YAML DAG of claim-steps."""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import yaml

TOP_LEVEL_KEYS = ("steps", "sources", "self_critique")
_OPTIONAL_TOP = ("version",)
STEP_KEYS = ("id", "statement", "depends_on", "difficulty", "key_step")
SOURCE_KEYS = ("title", "authors", "url", "location")


class Difficulty(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


class PlanParseError(ValueError):
    """``kind`` is Syntax, MissingField, UnknownField or InvalidValue; ``path`` locates it."""

    def __init__(self, kind: str, path: str = "", detail: str = ""):
        self.kind = kind
        self.path = path
        self.detail = detail
        super().__init__(f"{kind}({path})" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class PlanStep:
    id: str
    statement: str
    depends_on: tuple[str, ...] = ()
    difficulty: Difficulty = Difficulty.MEDIUM
    key_step: bool = False


@dataclass(frozen=True)
class CitedSource:
    title: str
    authors: str = ""
    url: str | None = None
    location: str = ""


@dataclass(frozen=True)
class DecompositionPlan:
    steps: tuple[PlanStep, ...]
    sources: tuple[CitedSource, ...]
    self_critique: str
    version: tuple[int, int] = (1, 0)  # (attempt, revision)

    def step(self, step_id: str) -> PlanStep | None:
        return next((s for s in self.steps if s.id == step_id), None)


def _require_str(value: Any, path: str, *, allow_empty: bool = True) -> str:
    if value is None:
        value = ""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = str(value)
    if not isinstance(value, str):
        raise PlanParseError("InvalidValue", path, "expected text")
    return value


def _check_keys(mapping: Any, allowed: tuple[str, ...], required: tuple[str, ...], path: str) -> dict:
    if not isinstance(mapping, dict):
        raise PlanParseError("InvalidValue", path or "<root>", "expected a mapping")
    for key in mapping:
        if key not in allowed:
            raise PlanParseError("UnknownField", f"{path}.{key}" if path else str(key))
    for key in required:
        if key not in mapping:
            raise PlanParseError("MissingField", f"{path}.{key}" if path else key)
    return mapping


def parse_plan(raw: str | bytes, version: tuple[int, int] | None = None) -> DecompositionPlan:
    """Strictly parse ``plan.yaml`` text. Unknown keys are rejected."""
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise PlanParseError("Syntax", "", str(exc)) from None
    data = _check_keys(data, TOP_LEVEL_KEYS + _OPTIONAL_TOP, TOP_LEVEL_KEYS, "")

    steps_raw = data["steps"]
    if not isinstance(steps_raw, list):
        raise PlanParseError("InvalidValue", "steps", "expected a list")
    steps = []
    for i, s in enumerate(steps_raw):
        path = f"steps[{i}]"
        s = _check_keys(s, STEP_KEYS, ("id", "statement", "difficulty"), path)
        deps = s.get("depends_on") or []
        if isinstance(deps, str):
            deps = [deps]
        if not isinstance(deps, list):
            raise PlanParseError("InvalidValue", f"{path}.depends_on", "expected a list")
        try:
            difficulty = Difficulty(str(s["difficulty"]).lower())
        except ValueError:
            raise PlanParseError("InvalidValue", f"{path}.difficulty", "expected easy, medium or hard") from None
        key_step = s.get("key_step", False)
        if not isinstance(key_step, bool):
            raise PlanParseError("InvalidValue", f"{path}.key_step", "expected a boolean")
        steps.append(
            PlanStep(
                id=_require_str(s["id"], f"{path}.id"),
                statement=_require_str(s["statement"], f"{path}.statement"),
                depends_on=tuple(_require_str(d, f"{path}.depends_on") for d in deps),
                difficulty=difficulty,
                key_step=key_step,
            )
        )

    sources_raw = data["sources"] or []
    if not isinstance(sources_raw, list):
        raise PlanParseError("InvalidValue", "sources", "expected a list")
    sources = []
    for i, src in enumerate(sources_raw):
        path = f"sources[{i}]"
        src = _check_keys(src, SOURCE_KEYS, ("title",), path)
        title = _require_str(src["title"], f"{path}.title")
        if not title.strip():
            raise PlanParseError("InvalidValue", f"{path}.title", "title must not be empty")
        sources.append(
            CitedSource(
                title=title,
                authors=_require_str(src.get("authors"), f"{path}.authors"),
                url=_require_str(src.get("url"), f"{path}.url") or None,
                location=_require_str(src.get("location"), f"{path}.location"),
            )
        )

    if version is None and "version" in data:
        v = _check_keys(data["version"], ("attempt", "revision"), ("attempt", "revision"), "version")
        version = (int(v["attempt"]), int(v["revision"]))

    return DecompositionPlan(
        steps=tuple(steps),
        sources=tuple(sources),
        self_critique=_require_str(data["self_critique"], "self_critique"),
        version=version or (1, 0),
    )


def serialize_plan(plan: DecompositionPlan, *, include_version: bool = False) -> str:
    data: dict[str, Any] = {
        "steps": [
            {
                "id": s.id,
                "statement": s.statement,
                "depends_on": list(s.depends_on),
                "difficulty": s.difficulty.value,
                "key_step": s.key_step,
            }
            for s in plan.steps
        ],
        "sources": [
            {k: v for k, v in (("title", c.title), ("authors", c.authors), ("url", c.url), ("location", c.location)) if v}
            for c in plan.sources
        ],
        "self_critique": plan.self_critique,
    }
    if include_version:
        data["version"] = {"attempt": plan.version[0], "revision": plan.version[1]}
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True)


@dataclass(frozen=True, order=True)
class PlanFinding:
    code: str
    ids: tuple[str, ...] = ()
    detail: str = ""


def _strongly_connected(graph: dict[str, list[str]]) -> list[list[str]]:
    """Tarjan's algorithm, iterative."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    out: list[list[str]] = []
    counter = 0
    for root in graph:
        if root in index:
            continue
        work = [(root, iter(graph[root]))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            for nxt in it:
                if nxt not in index:
                    index[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(graph[nxt])))
                    break
                if nxt in on_stack:
                    low[node] = min(low[node], index[nxt])
            else:
                work.pop()
                if work:
                    parent = work[-1][0]
                    low[parent] = min(low[parent], low[node])
                if low[node] == index[node]:
                    comp = []
                    while True:
                        w = stack.pop()
                        on_stack.discard(w)
                        comp.append(w)
                        if w == node:
                            break
                    out.append(comp)
    return out


def _dependency_graph(plan: DecompositionPlan) -> dict[str, list[str]]:
    ids = {s.id for s in plan.steps}
    graph: dict[str, list[str]] = {}
    for s in plan.steps:
        graph.setdefault(s.id, [])
        graph[s.id].extend(d for d in s.depends_on if d in ids)
    return graph


def validate_plan(plan: DecompositionPlan) -> list[PlanFinding]:
    findings: list[PlanFinding] = []
    seen: set[str] = set()
    for s in plan.steps:
        if s.id in seen:
            findings.append(PlanFinding("duplicate_step", (s.id,)))
        seen.add(s.id)
        if not s.statement.strip():
            findings.append(PlanFinding("empty_statement", (s.id,)))
        for d in s.depends_on:
            if d not in {x.id for x in plan.steps}:
                findings.append(PlanFinding("unknown_dependency", (s.id,), d))
    graph = _dependency_graph(plan)
    for comp in _strongly_connected(graph):
        if len(comp) > 1 or comp[0] in graph[comp[0]]:
            findings.append(PlanFinding("cycle", tuple(sorted(comp))))
    if not any(s.key_step for s in plan.steps):
        findings.append(PlanFinding("no_key_step"))
    if not plan.self_critique.strip():
        findings.append(PlanFinding("empty_self_critique"))
    return sorted(set(findings))


def topological_order(plan: DecompositionPlan) -> list[str]:
    """Dependencies first. Raises ``graphlib.CycleError`` on cycles."""
    sorter = graphlib.TopologicalSorter(_dependency_graph(plan))
    return list(sorter.static_order())


@dataclass(frozen=True)
class PlanDiff:
    added: frozenset[str] = field(default_factory=frozenset)
    removed: frozenset[str] = field(default_factory=frozenset)
    modified: frozenset[str] = field(default_factory=frozenset)
    other: frozenset[str] = field(default_factory=frozenset)  # changed top-level fields

    @property
    def empty(self) -> bool:
        return not (self.added or self.removed or self.modified or self.other)


def plan_diff(old: DecompositionPlan, new: DecompositionPlan) -> PlanDiff:
    a = {s.id: s for s in old.steps}
    b = {s.id: s for s in new.steps}
    other = set()
    if old.sources != new.sources:
        other.add("sources")
    if old.self_critique.strip() != new.self_critique.strip():
        other.add("self_critique")
    return PlanDiff(
        added=frozenset(b.keys() - a.keys()),
        removed=frozenset(a.keys() - b.keys()),
        modified=frozenset(k for k in a.keys() & b.keys() if a[k] != b[k]),
        other=frozenset(other),
    )
