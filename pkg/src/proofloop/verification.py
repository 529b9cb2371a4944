"""Two-stage, six-phase verification.

Stage A (phases 1-5) is structural, stage B (phase 6) is step-by-step and runs
only on a structural pass. Everything that can be checked without judgement
(restatement integrity, tag lint, subgoal-tree shape, URL resolution) is
checked in-process and dominates whatever the agent reports for that phase.
"""

from __future__ import annotations

import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

import yaml

from .agents import AgentRole, AgentRunner, VerdictParseError, parse_verdict_line
from .document import (
    DEFAULT_VAGUE_LEXICON,
    CitationBlock,
    ParseError,
    ProofDocument,
    lint_key_steps,
    normalize_text,
    parse_proof_document,
    validate_subgoal_tree,
)

log = logging.getLogger(__name__)

OFFLINE_ENV = "PROOFLOOP_OFFLINE"


class PhaseId(str, Enum):
    P1_INTEGRITY = "P1_integrity"
    P2_COMPLETENESS = "P2_completeness"
    P3_CITATIONS = "P3_citations"
    P4_SUBGOAL_TREE = "P4_subgoal_tree"
    P5_HUMAN_RULES = "P5_human_rules"
    P6_DETAILED = "P6_detailed"

    @property
    def order(self) -> int:
        return int(self.value[1])


STRUCTURAL_PHASES = tuple(p for p in PhaseId if p is not PhaseId.P6_DETAILED)


class Verdict(str, Enum):
    PASS = "pass"
    UNCERTAIN = "uncertain"
    FAIL = "fail"

    @property
    def severity(self) -> int:
        return {"pass": 0, "uncertain": 1, "fail": 2}[self.value]


def worst(*verdicts: Verdict) -> Verdict:
    return max(verdicts, key=lambda v: v.severity)


@dataclass(frozen=True)
class Finding:
    code: str
    message: str = ""
    location: str = ""


@dataclass(frozen=True)
class PhaseResult:
    phase: PhaseId
    verdict: Verdict
    findings: tuple[Finding, ...] = ()

    def __post_init__(self):
        if self.verdict is Verdict.FAIL and not self.findings:
            raise ValueError(f"{self.phase.value}: a failing phase needs at least one finding")


@dataclass(frozen=True)
class VerificationReport:
    proof_id: str
    verifier_label: str
    phase_results: tuple[PhaseResult, ...]
    stage: str = "structural"
    appendix: str = ""

    def __post_init__(self):
        phases = [r.phase for r in self.phase_results]
        if phases != sorted(phases, key=lambda p: p.order) or len(set(phases)) != len(phases):
            raise ValueError("phase results must be sorted by phase and unique")
        if PhaseId.P6_DETAILED in phases:
            early = [r for r in self.phase_results if r.phase is not PhaseId.P6_DETAILED]
            if len(early) != 5 or any(r.verdict is not Verdict.PASS for r in early):
                if self.stage != "standalone":
                    raise ValueError("phase 6 present without phases 1-5 passing")

    @property
    def overall(self) -> Verdict:
        if self.phase_results and all(r.verdict is Verdict.PASS for r in self.phase_results):
            return Verdict.PASS
        return Verdict.FAIL

    @property
    def passed(self) -> bool:
        return self.overall is Verdict.PASS

    def phase(self, pid: PhaseId) -> PhaseResult | None:
        return next((r for r in self.phase_results if r.phase is pid), None)

    @property
    def passing_phases(self) -> int:
        return sum(r.verdict is Verdict.PASS for r in self.phase_results)

    def to_dict(self) -> dict[str, Any]:
        return {
            "proof_id": self.proof_id,
            "verifier_label": self.verifier_label,
            "stage": self.stage,
            "overall": self.overall.value,
            "phases": [
                {
                    "phase": r.phase.value,
                    "verdict": r.verdict.value,
                    "findings": [
                        {"code": f.code, "message": f.message, "location": f.location} for f in r.findings
                    ],
                }
                for r in self.phase_results
            ],
            "appendix": self.appendix,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True, width=100)

    @classmethod
    def from_yaml(cls, text: str) -> "VerificationReport":
        data = yaml.safe_load(text)
        phases = tuple(
            PhaseResult(
                PhaseId(p["phase"]),
                Verdict(p["verdict"]),
                tuple(Finding(**f) for f in p.get("findings") or ()),
            )
            for p in data["phases"]
        )
        return cls(data["proof_id"], data["verifier_label"], phases, data.get("stage", ""), data.get("appendix", ""))


@dataclass(frozen=True)
class CitationVerdict:
    citation_id: str
    url_resolves: str  # yes | no | skipped
    # (b)-(e) are read and judged by the verifier agent.
    title_author_match: Verdict | None = None
    statement_exists: Verdict | None = None
    statement_verbatim: Verdict | None = None
    conditions_applied: Verdict | None = None


# --- deterministic pre-checks --------------------------------------------


def integrity_prefilter(original_problem: str, doc: ProofDocument | None) -> PhaseResult:
    """Word-by-word comparison of the restatement against the original problem."""
    restated = normalize_text(doc.problem_restatement) if doc is not None else ""
    if not restated:
        return PhaseResult(
            PhaseId.P1_INTEGRITY,
            Verdict.FAIL,
            (Finding("missing_restatement", "the proof has no Problem Restatement section"),),
        )
    original = normalize_text(original_problem)
    if restated == original:
        return PhaseResult(PhaseId.P1_INTEGRITY, Verdict.PASS)
    a, b = original.split(" "), restated.split(" ")
    i = next((k for k, (x, y) in enumerate(zip(a, b)) if x != y), min(len(a), len(b)))
    want = a[i] if i < len(a) else "<end>"
    got = b[i] if i < len(b) else "<end>"
    return PhaseResult(
        PhaseId.P1_INTEGRITY,
        Verdict.FAIL,
        (Finding("integrity_mismatch", f"word {i + 1}: original {want!r}, restatement {got!r}", f"word {i + 1}"),),
    )


class _LimitedRedirects(urllib.request.HTTPRedirectHandler):
    max_redirections = 3


def _url_ok(url: str, timeout: float) -> bool:
    if not url.lower().startswith(("http://", "https://")):
        return False
    opener = urllib.request.build_opener(_LimitedRedirects())
    req = urllib.request.Request(url, headers={"User-Agent": "proofloop-citation-check"})
    try:
        with opener.open(req, timeout=timeout) as resp:
            return resp.status < 400
    except urllib.error.HTTPError:
        return False  # 4xx/5xx, or a 3xx once the redirect limit is exceeded
    except (urllib.error.URLError, OSError, ValueError):
        return False


def offline_forced() -> bool:
    return os.environ.get(OFFLINE_ENV, "").strip().lower() not in ("", "0", "false", "no")


def resolve_citation_urls(
    citations: Iterable[CitationBlock], network_allowed: bool, timeout: float = 10.0
) -> list[CitationVerdict]:
    online = network_allowed and not offline_forced()
    out = []
    for c in citations:
        if not online or not c.url:
            out.append(CitationVerdict(c.id, "skipped"))
        else:
            out.append(CitationVerdict(c.id, "yes" if _url_ok(c.url, timeout) else "no"))
    return out


def _phase(pid: PhaseId, findings: list[Finding]) -> PhaseResult:
    return PhaseResult(pid, Verdict.FAIL if findings else Verdict.PASS, tuple(findings))


def structural_prechecks(
    problem: str,
    doc: ProofDocument,
    *,
    network_allowed: bool = False,
    url_timeout: float = 10.0,
    lexicon: Iterable[str] = DEFAULT_VAGUE_LEXICON,
    require_citation_coverage: bool = True,
) -> dict[PhaseId, PhaseResult]:
    lint = [
        Finding(f.code, f"vague phrase {f.phrase!r} in key step {f.step_id}" if f.phrase else "no key-original-step", f"byte {f.offset}")
        for f in lint_key_steps(doc, lexicon)
    ]
    urls = [
        Finding("url_unresolved", f"citation {v.citation_id}: URL does not resolve", v.citation_id)
        for v in resolve_citation_urls(doc.citations, network_allowed, url_timeout)
        if v.url_resolves == "no"
    ]
    tree = [
        Finding(t.code, t.detail or ", ".join(t.ids), ",".join(t.ids))
        for t in validate_subgoal_tree(doc, require_citation_coverage=require_citation_coverage)
    ]
    return {
        PhaseId.P1_INTEGRITY: integrity_prefilter(problem, doc),
        PhaseId.P2_COMPLETENESS: _phase(PhaseId.P2_COMPLETENESS, lint),
        PhaseId.P3_CITATIONS: _phase(PhaseId.P3_CITATIONS, urls),
        PhaseId.P4_SUBGOAL_TREE: _phase(PhaseId.P4_SUBGOAL_TREE, tree),
        PhaseId.P5_HUMAN_RULES: PhaseResult(PhaseId.P5_HUMAN_RULES, Verdict.PASS),
    }


# --- agent reports ---------------------------------------------------------


@dataclass
class AgentReport:
    phases: dict[PhaseId, PhaseResult] = field(default_factory=dict)
    appendix: str = ""
    problems: list[Finding] = field(default_factory=list)


def _finding(raw: Any) -> Finding:
    if isinstance(raw, dict):
        return Finding(str(raw.get("code", "agent")), str(raw.get("message", "")), str(raw.get("location", "")))
    return Finding("agent", str(raw))


def parse_agent_report(report_text: str, transcript: str, phases: Iterable[PhaseId]) -> AgentReport:
    """Read a verifier's ``report.yaml``, keeping only ``phases``.

    Missing phases become uncertain; a missing or contradicting VERDICT line
    marks the last phase uncertain.
    """
    wanted = list(phases)
    out = AgentReport()
    try:
        data = yaml.safe_load(report_text) or {}
        if not isinstance(data, dict):
            raise ValueError("report is not a mapping")
        entries = data.get("phases") or []
        out.appendix = str(data.get("appendix") or "")
    except (yaml.YAMLError, ValueError) as exc:
        out.problems.append(Finding("malformed_report", str(exc).splitlines()[0]))
        entries = []
    for e in entries:
        try:
            pid = PhaseId(e["phase"])
            verdict = Verdict(str(e["verdict"]).lower())
        except (KeyError, TypeError, ValueError):
            out.problems.append(Finding("malformed_phase", repr(e)[:200]))
            continue
        if pid not in wanted or pid in out.phases:
            continue
        findings = tuple(_finding(f) for f in e.get("findings") or ())
        if verdict is Verdict.FAIL and not findings:
            findings = (Finding("agent_fail", "verifier failed this phase without itemized findings"),)
        out.phases[pid] = PhaseResult(pid, verdict, findings)
    for pid in wanted:
        if pid not in out.phases:
            out.phases[pid] = PhaseResult(pid, Verdict.UNCERTAIN, (Finding("phase_missing", "verifier did not report this phase"),))

    last = wanted[-1]
    try:
        token, _ = parse_verdict_line(out.appendix + "\n" + report_text + "\n" + transcript)
    except VerdictParseError:
        token = None
    note = None
    if token is None:
        note = Finding("missing_verdict_line", "report has no VERDICT line")
    elif token not in ("PASS", "FAIL"):
        note = Finding("unknown_verdict", f"VERDICT: {token}")
    elif token == "FAIL" and all(r.verdict is Verdict.PASS for r in out.phases.values()):
        note = Finding("verdict_mismatch", "VERDICT: FAIL but every phase passed")
    if note is not None:
        r = out.phases[last]
        out.phases[last] = PhaseResult(last, worst(r.verdict, Verdict.UNCERTAIN), r.findings + (note,))
    return out


def merge_phase(deterministic: PhaseResult | None, agent: PhaseResult) -> PhaseResult:
    if deterministic is None:
        return agent
    verdict = worst(deterministic.verdict, agent.verdict)
    return PhaseResult(agent.phase, verdict, deterministic.findings + agent.findings)


def backend_failure_report(
    proof_id: str, label: str, phases: Iterable[PhaseId], detail: str, stage: str,
    base: dict[PhaseId, PhaseResult] | None = None,
) -> VerificationReport:
    results = []
    for i, pid in enumerate(phases):
        found = (Finding("backend_failure", detail),) if i == 0 else ()
        det = (base or {}).get(pid)
        verdict = worst(det.verdict, Verdict.UNCERTAIN) if det else Verdict.UNCERTAIN
        if i == 0:
            verdict = Verdict.FAIL
        results.append(PhaseResult(pid, verdict, (det.findings if det else ()) + found))
    return VerificationReport(proof_id, label, tuple(results), stage)


def parse_error_report(proof_id: str, label: str, error: ParseError, stage: str = "structural") -> VerificationReport:
    return VerificationReport(
        proof_id,
        label,
        (PhaseResult(PhaseId.P2_COMPLETENESS, Verdict.FAIL, (Finding("parse_error", str(error), f"byte {error.offset}"),)),),
        stage,
    )


# --- stages ----------------------------------------------------------------


def run_structural_verification(
    problem: str,
    doc: ProofDocument,
    plan_text: str | None,
    rules: list[str],
    runner: AgentRunner,
    *,
    proof_id: str = "proof",
    slot: int = 0,
    call_index: int | None = None,
    network_allowed: bool = False,
    require_citation_coverage: bool = True,
    lexicon: Iterable[str] = DEFAULT_VAGUE_LEXICON,
) -> VerificationReport:
    """Phases 1-5: deterministic pre-checks, one structural-verifier call, merge."""
    det = structural_prechecks(
        problem, doc, network_allowed=network_allowed, require_citation_coverage=require_citation_coverage,
        lexicon=lexicon,
    )
    inputs = {"problem": problem, "proof": doc.raw_text, "rules": "\n".join(f"- {r}" for r in rules)}
    if plan_text is not None:
        inputs["plan"] = plan_text
    label = runner.label(AgentRole.STRUCTURAL_VERIFIER, slot)
    result = runner.call(AgentRole.STRUCTURAL_VERIFIER, inputs, slot=slot, call_index=call_index)
    if result.error is not None:
        return backend_failure_report(proof_id, label, STRUCTURAL_PHASES, result.error, "structural", det)
    agent = parse_agent_report(result.output_files["report.yaml"], result.transcript, STRUCTURAL_PHASES)
    merged = [merge_phase(det.get(p), agent.phases[p]) for p in STRUCTURAL_PHASES]
    if agent.problems:
        first = merged[0]
        merged[0] = PhaseResult(first.phase, worst(first.verdict, Verdict.UNCERTAIN), first.findings + tuple(agent.problems))
    return VerificationReport(proof_id, label, tuple(merged), "structural", agent.appendix)


def run_detailed_verification(
    problem: str,
    doc: ProofDocument,
    structural: VerificationReport,
    runner: AgentRunner,
    *,
    plan_text: str | None = None,
    slot: int = 0,
    call_index: int | None = None,
) -> VerificationReport:
    """Phase 6. Only valid on a structural pass."""
    assert structural.passed, "detailed verification requires a passing structural report"
    inputs = {"problem": problem, "proof": doc.raw_text, "structural_report": structural.to_yaml()}
    if plan_text is not None:
        inputs["plan"] = plan_text
    label = runner.label(AgentRole.DETAILED_VERIFIER, slot)
    result = runner.call(AgentRole.DETAILED_VERIFIER, inputs, slot=slot, call_index=call_index)
    if result.error is not None:
        p6 = PhaseResult(PhaseId.P6_DETAILED, Verdict.FAIL, (Finding("backend_failure", result.error),))
        appendix = ""
    else:
        agent = parse_agent_report(result.output_files["report.yaml"], result.transcript, [PhaseId.P6_DETAILED])
        p6 = agent.phases[PhaseId.P6_DETAILED]
        if agent.problems:
            p6 = PhaseResult(p6.phase, worst(p6.verdict, Verdict.UNCERTAIN), p6.findings + tuple(agent.problems))
        appendix = agent.appendix
    return replace(
        structural,
        verifier_label=label,
        phase_results=structural.phase_results + (p6,),
        stage="detailed",
        appendix=(structural.appendix + "\n" + appendix).strip("\n") if appendix else structural.appendix,
    )


@dataclass
class StandaloneResult:
    report: VerificationReport
    difficulty: str  # EASY | HARD | unknown
    agent_calls: int


def run_standalone_verifier(
    problem: str, proof_raw: str, runner: AgentRunner, *, network_allowed: bool = False, proof_id: str = "proof"
) -> StandaloneResult:
    """Difficulty-adaptive verification of an existing problem/proof pair."""
    try:
        doc: ProofDocument | None = parse_proof_document(proof_raw)
        parse_err = None
    except ParseError as exc:
        doc, parse_err = None, exc

    judge_label = runner.label(AgentRole.DIFFICULTY_JUDGE, 0)
    judged = runner.call(AgentRole.DIFFICULTY_JUDGE, {"problem": problem, "proof": proof_raw})
    calls = 1
    if judged.error is not None:
        return StandaloneResult(
            backend_failure_report(proof_id, judge_label, STRUCTURAL_PHASES, judged.error, "standalone"), "unknown", calls
        )
    try:
        token, _ = parse_verdict_line(judged.output_files["decision.md"] + "\n" + judged.transcript)
    except VerdictParseError:
        token = "HARD"
    if token not in ("EASY", "HARD"):
        token = "HARD"

    if token == "EASY":
        text = judged.output_files.get("report.yaml", "")
        if not text.strip():
            rep = VerificationReport(
                proof_id, judge_label,
                (PhaseResult(PhaseId.P1_INTEGRITY, Verdict.FAIL, (Finding("missing_report", "judge said EASY but wrote no report.yaml"),)),),
                "standalone",
            )
            return StandaloneResult(rep, token, calls)
        present = _phases_in(text) or list(PhaseId)
        agent = parse_agent_report(text, judged.transcript, present)
        det = structural_prechecks(problem, doc, network_allowed=network_allowed) if doc is not None else {}
        merged = [merge_phase(det.get(p), agent.phases[p]) for p in present]
        if parse_err is not None:
            merged = _with_parse_error(merged, parse_err)
        return StandaloneResult(VerificationReport(proof_id, judge_label, tuple(merged), "standalone", agent.appendix), token, calls)

    if parse_err is not None:
        return StandaloneResult(parse_error_report(proof_id, judge_label, parse_err, "standalone"), token, calls)
    structural = run_structural_verification(problem, doc, None, [], runner, proof_id=proof_id, network_allowed=network_allowed)
    calls += 1
    if not structural.passed:
        return StandaloneResult(structural, token, calls)
    detailed = run_detailed_verification(problem, doc, structural, runner)
    calls += 1
    return StandaloneResult(detailed, token, calls)


def _phases_in(report_text: str) -> list[PhaseId]:
    try:
        data = yaml.safe_load(report_text) or {}
        ids = {PhaseId(e["phase"]) for e in data.get("phases") or () if isinstance(e, dict) and e.get("phase") in PhaseId._value2member_map_}
    except (yaml.YAMLError, AttributeError, TypeError):
        return []
    return sorted(ids, key=lambda p: p.order)


def _with_parse_error(results: list[PhaseResult], err: ParseError) -> list[PhaseResult]:
    finding = Finding("parse_error", str(err), f"byte {err.offset}")
    out = [r for r in results if r.phase is not PhaseId.P2_COMPLETENESS]
    old = next((r for r in results if r.phase is PhaseId.P2_COMPLETENESS), None)
    out.append(PhaseResult(PhaseId.P2_COMPLETENESS, Verdict.FAIL, (old.findings if old else ()) + (finding,)))
    return sorted(out, key=lambda r: r.phase.order)
