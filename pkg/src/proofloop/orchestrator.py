"""Simple-mode round loop and decomposition-mode retry hierarchy.

The pipeline is written as a deterministic walk over the run directory. Each
step names the artifact it produces; if that artifact is already complete the
stored copy is used, otherwise the step runs and persists it. Resume is the
same walk started again, and progress scanning is the same walk with a probe
that stops at the first artifact it would have to create.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import yaml

from .agents import AgentRole, AgentRunner, BackendConfig, VerdictParseError, make_backend, parse_verdict_line
from .config import ConfigError, RunConfig, config_from_dict
from .document import ParseError, ProofDocument, parse_proof_document
from .plan import PlanParseError, parse_plan, plan_diff, validate_plan
from .runstate import ProgressPoint, RunState, check_layout, run_lock
from .verification import (
    VerificationReport,
    parse_error_report,
    run_detailed_verification,
    run_structural_verification,
)

log = logging.getLogger(__name__)

R = AgentRole


# --- retry budget ----------------------------------------------------------


class RegulatorDecision(str, Enum):
    REVISE_PROOF = "revise_proof"
    REVISE_PLAN = "revise_plan"
    REWRITE = "rewrite"

    @property
    def token(self) -> str:
        return self.value.upper()


class EffectiveAction(str, Enum):
    REVISE_PROOF = "revise_proof"
    REVISE_PLAN = "revise_plan"
    REWRITE = "rewrite"
    EXHAUSTED = "exhausted"


@dataclass(frozen=True, order=True)
class RetryBudget:
    attempt_d: int = 1
    revision_r: int = 0
    proof_p: int = 1

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.attempt_d, self.revision_r, self.proof_p)


def apply_budget(
    budget: RetryBudget, decision: RegulatorDecision, config: RunConfig
) -> tuple[RetryBudget, EffectiveAction]:
    """Route a regulator decision through the configured limits.

    A level that is out of budget escalates to the next one up; past the last
    decomposition the run is exhausted.
    """
    d, r, p = budget.as_tuple()
    level = decision
    if level is RegulatorDecision.REVISE_PROOF:
        if p + 1 <= config.max_proofs_per_plan:
            return RetryBudget(d, r, p + 1), EffectiveAction.REVISE_PROOF
        level = RegulatorDecision.REVISE_PLAN
    if level is RegulatorDecision.REVISE_PLAN:
        if r + 1 <= config.max_plan_revisions:
            return RetryBudget(d, r + 1, 1), EffectiveAction.REVISE_PLAN
    if d + 1 <= config.max_decompositions:
        return RetryBudget(d + 1, 0, 1), EffectiveAction.REWRITE
    return budget, EffectiveAction.EXHAUSTED


@dataclass(frozen=True)
class RetryTally:
    """Per-run accounting in the form the retry tables report it.

    ``attempts`` counts decompositions, ``revisions`` the plan versions of the
    final decomposition, ``proofs`` the proofs written under it.
    """

    attempts: int
    revisions: int
    proofs: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.attempts, self.revisions, self.proofs)


# --- steering --------------------------------------------------------------

HINTS_FILE = "steering/hints.md"
RULES_FILE = "steering/verifier_rules.md"


@dataclass(frozen=True)
class SteeringInput:
    hints: str = ""
    extra_rules: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()


def read_steering(run_dir: str | Path) -> SteeringInput:
    run_dir = Path(run_dir)
    warnings = []
    texts = {}
    for key, rel in (("hints", HINTS_FILE), ("rules", RULES_FILE)):
        p = run_dir / rel
        if not p.exists():
            texts[key] = ""
            continue
        try:
            texts[key] = p.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            warnings.append(f"cannot read {rel}: {exc}")
            texts[key] = ""
    rules = []
    for line in texts["rules"].splitlines():
        line = re.sub(r"^\s*(?:[-*]|\d+[.)])\s+", "", line).strip()
        if line and not line.startswith("#"):
            rules.append(line)
    for w in warnings:
        log.warning(w)
    return SteeringInput(texts["hints"].strip(), tuple(rules), tuple(warnings))


# --- selection and verdict ---------------------------------------------------


@dataclass
class Candidate:
    index: int  # 1-based prover index
    proof_id: str
    text: str
    doc: ProofDocument | None
    reports: list[VerificationReport] = field(default_factory=list)

    @property
    def passing_phases(self) -> int:
        return sum(r.passing_phases for r in self.reports)

    @property
    def passed(self) -> bool:
        return bool(self.reports) and all(r.passed for r in self.reports)


@dataclass(frozen=True)
class Selection:
    index: int
    proof_id: str
    method: str  # single | agent | fallback
    decision: str = ""

    def to_yaml(self) -> str:
        return yaml.safe_dump(
            {"selected": self.proof_id, "index": self.index, "method": self.method, "decision": self.decision},
            sort_keys=False, allow_unicode=True,
        )

    @classmethod
    def from_yaml(cls, text: str) -> "Selection":
        d = yaml.safe_load(text)
        return cls(d["index"], d["selected"], d["method"], d.get("decision") or "")


def fallback_selection(candidates: Sequence[Candidate]) -> Candidate:
    return min(candidates, key=lambda c: (-c.passing_phases, c.index))


def format_reports(reports: Sequence[VerificationReport]) -> str:
    return "\n".join(f"### Report {i} ({r.verifier_label})\n\n```yaml\n{r.to_yaml()}```\n" for i, r in enumerate(reports, 1))


def select_best(
    candidates: Sequence[Candidate], runner: AgentRunner | None, *, problem: str = "", call_index: int | None = None
) -> Selection:
    if not candidates:
        raise ValueError("select_best needs at least one candidate")
    if len(candidates) == 1:
        c = candidates[0]
        return Selection(c.index, c.proof_id, "single")
    blocks = []
    for c in candidates:
        blocks.append(f"## Candidate {c.proof_id}\n\n### Proof\n\n{c.text}\n\n### Reports\n\n{format_reports(c.reports)}")
    result = runner.call(R.SELECTOR, {"problem": problem, "candidates": "\n".join(blocks)}, call_index=call_index)
    decision = result.output_files.get("decision.md", "") if result.error is None else ""
    chosen = None
    try:
        token, arg = parse_verdict_line(decision + "\n" + result.transcript)
        m = re.search(r"(\d+)\s*$", arg)
        if token == "SELECT" and m:
            k = int(m.group(1))
            chosen = next((c for c in candidates if c.index == k), None)
    except VerdictParseError:
        pass
    if chosen is None:
        c = fallback_selection(candidates)
        return Selection(c.index, c.proof_id, "fallback", decision)
    return Selection(chosen.index, chosen.proof_id, "agent", decision)


@dataclass(frozen=True)
class VerdictRecord:
    verdict: str  # done | continue
    agent_token: str | None
    guard_event: bool
    decision: str = ""

    def to_yaml(self) -> str:
        return yaml.safe_dump(
            {"verdict": self.verdict, "agent_token": self.agent_token, "guard_event": self.guard_event, "decision": self.decision},
            sort_keys=False, allow_unicode=True,
        )

    @classmethod
    def from_yaml(cls, text: str) -> "VerdictRecord":
        d = yaml.safe_load(text)
        return cls(d["verdict"], d.get("agent_token"), bool(d.get("guard_event")), d.get("decision") or "")


def decide_verdict(
    reports: Sequence[VerificationReport], runner: AgentRunner, *, call_index: int | None = None
) -> VerdictRecord:
    """Ask the verdict agent, which sees reports only. DONE on a failing set is overridden."""
    result = runner.call(R.VERDICT, {"reports": format_reports(reports)}, call_index=call_index)
    decision = result.output_files.get("decision.md", "") if result.error is None else ""
    try:
        token, _ = parse_verdict_line(decision + "\n" + result.transcript) if result.error is None else (None, "")
    except VerdictParseError:
        token = None
    if token not in ("DONE", "CONTINUE"):
        return VerdictRecord("continue", token, False, decision)
    if token == "DONE":
        if reports and all(r.passed for r in reports):
            return VerdictRecord("done", token, False, decision)
        return VerdictRecord("continue", token, True, decision)
    return VerdictRecord("continue", token, False, decision)


# --- outcomes ---------------------------------------------------------------


@dataclass(frozen=True)
class RunOutcome:
    status: str  # proved | exhausted
    mode: str
    round: int | None = None
    budget: RetryBudget | None = None
    tally: RetryTally | None = None
    proof_path: str | None = None

    @property
    def proved(self) -> bool:
        return self.status == "proved"

    def describe(self) -> str:
        if self.mode == "simple":
            return f"{self.status} (round {self.round})"
        t = self.tally.as_tuple() if self.tally else None
        return f"{self.status} (attempts, revisions, proofs = {t})"


@dataclass
class RoundState:
    round_index: int
    proofs: list[Candidate]
    selection: Selection | None
    verdict: VerdictRecord


class Pending(Exception):
    def __init__(self, point: ProgressPoint):
        self.point = point
        super().__init__(point.describe())


class RunHalted(RuntimeError):
    """An agent the pipeline cannot proceed without failed; the run can be resumed."""


# --- pipeline ----------------------------------------------------------------


class Pipeline:
    def __init__(
        self,
        run_dir: Path,
        config: RunConfig,
        runner: AgentRunner | None,
        *,
        probe: bool = False,
        fault=None,
    ):
        self.root = Path(run_dir)
        self.config = config
        self.runner = runner
        self.probe = probe
        self.state = RunState(self.root, fault=fault, read_only=probe)
        self._index: Counter = Counter()
        self._budget: RetryBudget | None = None

    # plumbing

    def _next(self, role: AgentRole) -> int:
        self._index[role] += 1
        return self._index[role]

    def _point(self, step: str, coords: dict, outcome: str | None = None) -> ProgressPoint:
        budget = self._budget.as_tuple() if self._budget else None
        return ProgressPoint(self.config.mode, step, dict(coords), budget, outcome)

    def _step(self, rels: Sequence[str], step: str, coords: dict, produce: Callable[[], tuple[str, str]]) -> tuple[str, str]:
        for rel in rels:
            if self.state.is_complete(rel):
                return rel, self.state.read(rel)
        if self.probe:
            raise Pending(self._point(step, coords))
        rel, content = produce()
        self.state.persist(rel, content)
        return rel, content

    def _fanout(self, jobs: list[Callable]) -> list:
        if self.probe or self.config.parallelism == 1 or len(jobs) <= 1:
            return [j() for j in jobs]
        results, error = [], None
        with ThreadPoolExecutor(max_workers=min(self.config.parallelism, len(jobs))) as pool:
            futures = [pool.submit(j) for j in jobs]
            for f in futures:
                try:
                    results.append(f.result())
                except BaseException as exc:  # noqa: BLE001 - re-raised below
                    error = error or exc
        if error is not None:
            raise error
        return results

    def _event(self, event: str, **fields) -> None:
        self.state.log_event(event, **fields)

    # entry

    def run(self) -> RunOutcome:
        problem = self.state.read("problem.md")
        survey = self._survey(problem)
        notes = self._brainstorm(problem, survey) if self.config.brainstorm_enabled else ""
        if self.config.mode == "simple":
            outcome, final = self._simple(problem, survey, notes)
        else:
            outcome, final = self._decomposition(problem, survey)
        self._summary(problem, survey, outcome, final)
        return outcome

    # stage 0

    def _survey(self, problem: str) -> str:
        idx = self._next(R.LITERATURE_SURVEYOR)

        def produce():
            res = self.runner.call(R.LITERATURE_SURVEYOR, {"problem": problem}, call_index=idx)
            if res.error:
                raise RunHalted(f"literature survey failed: {res.error}")
            self._event("stage", step="stage0_survey")
            return "stage0/survey.md", res.output_files["survey.md"]

        return self._step(["stage0/survey.md"], "stage0_survey", {}, produce)[1]

    def _brainstorm(self, problem: str, survey: str) -> str:
        jobs = []
        for k in range(1, self.config.n_provers + 1):
            rel = f"stage0/brainstorm_{k:03d}/notes.md"
            idx = self._next(R.BRAINSTORMER)

            def produce(k=k, rel=rel, idx=idx):
                res = self.runner.call(R.BRAINSTORMER, {"problem": problem, "survey": survey}, slot=k - 1, call_index=idx)
                self._event("stage", step="brainstorm", brainstormer=k, ok=res.error is None)
                return rel, res.output_files.get("notes.md", "") if res.error is None else f"(brainstormer {k} failed)\n"

            jobs.append(partial(self._step, [rel], "brainstorm", {"brainstormer": k}, produce))
        notes = self._fanout(jobs)
        return "\n\n".join(f"### Strategy notes {k}\n\n{text.strip()}" for k, (_, text) in enumerate(notes, 1))

    # shared steps

    def _prove(self, pdir: str, inputs: dict, coords: dict, slot: int) -> tuple[str, str]:
        idx = self._next(R.PROVER)

        def produce():
            res = self.runner.call(R.PROVER, inputs, slot=slot, call_index=idx)
            if res.error:
                self._event("prover_failed", error=res.error[:300], **coords)
                record = {"role": "prover", "status": res.exit_status.value, "error": res.error}
                return f"{pdir}/failure.yaml", yaml.safe_dump(record, sort_keys=False, allow_unicode=True)
            self._event("proof_attempt", **coords)
            return f"{pdir}/proof.md", res.output_files["proof.md"]

        return self._step([f"{pdir}/proof.md", f"{pdir}/failure.yaml"], "prove", coords, produce)

    def _structural(self, rel, problem, cand: Candidate, plan_text, rules, slot, coords) -> VerificationReport:
        if cand.doc is None:
            def produce():
                try:
                    parse_proof_document(cand.text)
                except ParseError as exc:
                    err = exc
                rep = parse_error_report(cand.proof_id, self.runner.label(R.STRUCTURAL_VERIFIER, slot), err)
                return rel, rep.to_yaml()
        else:
            idx = self._next(R.STRUCTURAL_VERIFIER)

            def produce():
                rep = run_structural_verification(
                    problem, cand.doc, plan_text, rules, self.runner,
                    proof_id=cand.proof_id, slot=slot, call_index=idx,
                    network_allowed=self.config.network_allowed,
                    require_citation_coverage=self.config.require_citation_coverage,
                    lexicon=self.config.vague_lexicon,
                )
                self._event("verification", stage="structural", overall=rep.overall.value, **coords)
                return rel, rep.to_yaml()

        return VerificationReport.from_yaml(self._step([rel], "structural_verification", coords, produce)[1])

    def _detailed(self, rel, problem, cand: Candidate, sv: VerificationReport, plan_text, slot, coords) -> VerificationReport:
        idx = self._next(R.DETAILED_VERIFIER)

        def produce():
            rep = run_detailed_verification(
                problem, cand.doc, sv, self.runner, plan_text=plan_text, slot=slot, call_index=idx
            )
            self._event("verification", stage="detailed", overall=rep.overall.value, **coords)
            return rel, rep.to_yaml()

        return VerificationReport.from_yaml(self._step([rel], "detailed_verification", coords, produce)[1])

    def _verdict(self, rel: str, reports: list[VerificationReport], coords: dict) -> VerdictRecord:
        idx = self._next(R.VERDICT)

        def produce():
            rec = decide_verdict(reports, self.runner, call_index=idx)
            if rec.guard_event:
                self._event("guard", reason="verdict DONE on failing reports overridden to continue", **coords)
            self._event("verdict", verdict=rec.verdict, **coords)
            return rel, rec.to_yaml()

        return VerdictRecord.from_yaml(self._step([rel], "verdict", coords, produce)[1])

    @staticmethod
    def _candidate(index: int, proof_id: str, text: str) -> Candidate:
        try:
            doc = parse_proof_document(text)
        except ParseError:
            doc = None
        return Candidate(index, proof_id, text, doc)

    # simple mode

    def _simple(self, problem: str, survey: str, notes: str) -> tuple[RunOutcome, tuple[str, list] | None]:
        prev: tuple[str, str] | None = None
        final = None
        for r in range(1, self.config.max_rounds + 1):
            state = self._simple_round(r, problem, survey, notes, prev)
            if state.selection is not None:
                chosen = next(c for c in state.proofs if c.index == state.selection.index)
                prev = (chosen.text, format_reports(chosen.reports))
                final = (chosen.text, chosen.reports)
                if state.verdict.verdict == "done":
                    proof_path = f"round_{r:03d}/prover_{chosen.index:03d}/proof.md"
                    return RunOutcome("proved", "simple", round=r, proof_path=proof_path), final
        return RunOutcome("exhausted", "simple", round=self.config.max_rounds), final

    def _simple_round(self, r: int, problem: str, survey: str, notes: str, prev) -> RoundState:
        cfg = self.config
        steering = read_steering(self.root)
        rules = list(cfg.rules) + list(steering.extra_rules)
        rd = f"round_{r:03d}"

        inputs = {"problem": problem, "survey": survey}
        if steering.hints:
            inputs["hints"] = steering.hints
        if notes:
            inputs["brainstorm_notes"] = notes
        if prev is not None:
            inputs["previous_proof"], inputs["previous_reports"] = prev

        jobs = [
            partial(self._prove, f"{rd}/prover_{k:03d}", inputs, {"round": r, "prover": k}, k - 1)
            for k in range(1, cfg.n_provers + 1)
        ]
        candidates = []
        for k, (rel, text) in enumerate(self._fanout(jobs), 1):
            if rel.endswith("proof.md"):
                candidates.append(self._candidate(k, f"prover_{k:03d}", text))

        sv_jobs, sv_keys = [], []
        for c in candidates:
            for j in range(1, cfg.m_verifiers + 1):
                coords = {"round": r, "prover": c.index, "verifier": j}
                rel = f"{rd}/prover_{c.index:03d}/sv_{j:03d}/report.yaml"
                sv_jobs.append(partial(self._structural, rel, problem, c, None, rules, j - 1, coords))
                sv_keys.append((c, j))
        sv_reports = dict(zip([(c.index, j) for c, j in sv_keys], self._fanout(sv_jobs)))

        dv_jobs, dv_keys = [], []
        for c, j in sv_keys:
            sv = sv_reports[(c.index, j)]
            if sv.passed:
                coords = {"round": r, "prover": c.index, "verifier": j}
                rel = f"{rd}/prover_{c.index:03d}/dv_{j:03d}/report.yaml"
                dv_jobs.append(partial(self._detailed, rel, problem, c, sv, None, j - 1, coords))
                dv_keys.append((c.index, j))
        dv_reports = dict(zip(dv_keys, self._fanout(dv_jobs)))
        for c, j in sv_keys:
            c.reports.append(dv_reports.get((c.index, j), sv_reports[(c.index, j)]))

        coords = {"round": r}
        if not candidates:
            rel = f"{rd}/verdict.yaml"

            def produce_empty():
                self._event("round_failed", round=r, reason="no proofs were produced")
                return rel, VerdictRecord("continue", None, False, "no proofs were produced this round").to_yaml()

            rec = VerdictRecord.from_yaml(self._step([rel], "verdict", coords, produce_empty)[1])
            return RoundState(r, candidates, None, rec)

        sel_rel = f"{rd}/selection.yaml"
        idx = self._next(R.SELECTOR) if len(candidates) > 1 else None

        def produce_selection():
            sel = select_best(candidates, self.runner, problem=problem, call_index=idx)
            self._event("selection", round=r, selected=sel.proof_id, method=sel.method)
            return sel_rel, sel.to_yaml()

        selection = Selection.from_yaml(self._step([sel_rel], "select", coords, produce_selection)[1])
        chosen = next(c for c in candidates if c.index == selection.index)
        verdict = self._verdict(f"{rd}/verdict.yaml", chosen.reports, coords)
        return RoundState(r, candidates, selection, verdict)

    # decomposition mode

    def _decomposition(self, problem: str, survey: str) -> tuple[RunOutcome, tuple[str, list] | None]:
        cfg = self.config
        budget = RetryBudget()
        self._budget = budget
        history: list[str] = []
        analyses: list[str] = []
        prev_plan = None
        plan_text = ""
        revise_from: tuple[str, str] | None = None
        proofs_in_attempt = 0
        final = None
        while True:
            d, r, p = budget.as_tuple()
            self._budget = budget
            steering = read_steering(self.root)
            rules = list(cfg.rules) + list(steering.extra_rules)
            pdir = f"attempt_{d:03d}/plan_rev_{r:03d}"
            coords = {"attempt": d, "revision": r, "proof": p}

            if p == 1:
                if r == 0:
                    proofs_in_attempt = 0
                    prev_plan = None
                plan_text, plan, findings = self._plan_step(pdir, problem, survey, steering.hints, history, analyses, coords)
                history.append(f"### Plan (attempt {d}, revision {r})\n\n```yaml\n{plan_text.rstrip()}\n```\n")
                if plan is not None and prev_plan is not None and r > 0 and plan_diff(prev_plan, plan).empty:
                    if not self.probe:
                        self._event("ignored_revision", attempt=d, revision=r)
                prev_plan = plan if plan is not None else prev_plan
                if findings:
                    analyses.append(f"### Plan (attempt {d}, revision {r}) rejected\n\n" + "\n".join(f"- {f}" for f in findings))
                    new_budget, action = apply_budget(budget, RegulatorDecision.REVISE_PLAN, cfg)
                    if not self.probe:
                        self._event("budget", before=budget.as_tuple(), after=new_budget.as_tuple(), decision="revise_plan", action=action.value, reason="invalid plan")
                    if action is EffectiveAction.EXHAUSTED:
                        return self._exhausted(budget, proofs_in_attempt), final
                    budget, revise_from = new_budget, None
                    continue

            proof_dir = f"{pdir}/proof_{p:03d}"
            inputs = {"problem": problem, "survey": survey, "plan": plan_text}
            if steering.hints:
                inputs["hints"] = steering.hints
            if revise_from is not None:
                inputs["previous_proof"], inputs["previous_reports"] = revise_from
            rel, text = self._prove(proof_dir, inputs, coords, 0)
            proofs_in_attempt += 1

            if rel.endswith("proof.md"):
                cand = self._candidate(1, proof_dir, text)
                sv = self._structural(f"{proof_dir}/sv/report.yaml", problem, cand, plan_text, rules, 0, coords)
                report = sv
                if sv.passed:
                    report = self._detailed(f"{proof_dir}/dv/report.yaml", problem, cand, sv, plan_text, 0, coords)
            else:
                failure = yaml.safe_load(text) or {}
                cand = Candidate(1, proof_dir, "", None)
                report = None
                sv = None
                failure_note = f"The prover failed: {failure.get('error', 'unknown error')}"
            reports = [report] if report is not None else []
            final = (cand.text, reports)

            if report is not None and report.passed:
                verdict = self._verdict(f"{proof_dir}/verdict.yaml", reports, coords)
                if verdict.verdict == "done":
                    tally = RetryTally(d, r + 1, proofs_in_attempt)
                    return RunOutcome("proved", "decomposition", budget=budget, tally=tally, proof_path=f"{proof_dir}/proof.md"), final

            reports_text = format_reports(reports) if reports else failure_note
            structural_text = _findings_text(sv) if sv is not None else failure_note
            decision = self._regulate(f"{proof_dir}/regulator.yaml", problem, plan_text, reports_text, structural_text, budget, coords)
            analyses.append(f"### Regulator (attempt {d}, revision {r}, proof {p}): {decision.token}\n\n{self._regulator_analysis}")
            new_budget, action = apply_budget(budget, decision, cfg)
            if action is EffectiveAction.EXHAUSTED:
                return self._exhausted(budget, proofs_in_attempt), final
            revise_from = (cand.text, reports_text) if action is EffectiveAction.REVISE_PROOF and cand.text else None
            budget = new_budget

    def _exhausted(self, budget: RetryBudget, proofs_in_attempt: int) -> RunOutcome:
        d, r, _ = budget.as_tuple()
        return RunOutcome("exhausted", "decomposition", budget=budget, tally=RetryTally(d, r + 1, proofs_in_attempt))

    def _plan_step(self, pdir, problem, survey, hints, history, analyses, coords):
        idx = self._next(R.DECOMPOSER)
        inputs = {"problem": problem, "survey": survey}
        if hints:
            inputs["hints"] = hints
        if history:
            inputs["previous_plans"] = "\n".join(history)
        if analyses:
            inputs["regulator_analyses"] = "\n".join(analyses)
        rel = f"{pdir}/plan.yaml"

        def produce():
            res = self.runner.call(R.DECOMPOSER, inputs, call_index=idx)
            if res.error:
                raise RunHalted(f"decomposer failed: {res.error}")
            text = res.output_files["plan.yaml"]
            fields = {k: v for k, v in coords.items() if k != "proof"}
            self._event("plan", **fields)
            findings = _plan_findings(text, coords)[1]
            if findings:
                self._event("plan_invalid", findings=findings, **fields)
            return rel, text

        _, text = self._step([rel], "decompose", coords, produce)
        plan, findings = _plan_findings(text, coords)
        return text, plan, findings

    _regulator_analysis = ""

    def _regulate(self, rel, problem, plan_text, reports_text, structural_text, budget, coords) -> RegulatorDecision:
        idx = self._next(R.REGULATOR)

        def produce():
            res = self.runner.call(
                R.REGULATOR,
                {"problem": problem, "plan": plan_text, "reports": reports_text, "structural_findings": structural_text},
                call_index=idx,
            )
            analysis = res.output_files.get("decision.md", "") if res.error is None else ""
            source = "agent"
            try:
                token, _ = parse_verdict_line(analysis + "\n" + res.transcript) if res.error is None else ("", "")
                decision = RegulatorDecision(token.lower())
            except (VerdictParseError, ValueError):
                decision, source = RegulatorDecision.REVISE_PROOF, "default"
            after, action = apply_budget(budget, decision, self.config)
            self._event("budget", before=budget.as_tuple(), after=after.as_tuple(), decision=decision.value, action=action.value)
            record = {
                "decision": decision.value,
                "source": source,
                "effective_action": action.value,
                "budget_before": list(budget.as_tuple()),
                "budget_after": list(after.as_tuple()),
                "analysis": analysis,
            }
            return rel, yaml.safe_dump(record, sort_keys=False, allow_unicode=True)

        data = yaml.safe_load(self._step([rel], "regulate", coords, produce)[1])
        self._regulator_analysis = data.get("analysis") or ""
        return RegulatorDecision(data["decision"])

    # stage 2

    def _summary(self, problem: str, survey: str, outcome: RunOutcome, final) -> None:
        idx = self._next(R.SUMMARIZER)
        outcome_text = outcome.describe()
        if outcome.proof_path:
            outcome_text += f"\naccepted proof: {outcome.proof_path}"
        inputs = {"problem": problem, "survey": survey, "outcome": outcome_text}
        if final is not None and final[0]:
            inputs["proof"] = final[0]
            inputs["reports"] = format_reports(final[1])

        def produce():
            res = self.runner.call(R.SUMMARIZER, inputs, call_index=idx)
            self._event("outcome", status=outcome.status, detail=outcome.describe())
            if res.error:
                return "summary.md", f"# Summary\n\nOutcome: {outcome_text}\n\n(summarizer unavailable)\n"
            return "summary.md", res.output_files["summary.md"]

        coords = {}
        if self._budget is not None:
            coords = dict(zip(("attempt", "revision", "proof"), self._budget.as_tuple()))
        elif outcome.round is not None:
            coords = {"round": outcome.round}
        try:
            self._step(["summary.md"], "summary", coords, produce)
        except Pending as exc:
            raise Pending(ProgressPoint(exc.point.mode, "summary", exc.point.coordinates, exc.point.budget, outcome.status)) from None


def _plan_findings(text: str, coords: dict):
    try:
        plan = parse_plan(text, version=(coords["attempt"], coords["revision"]))
    except PlanParseError as exc:
        return None, [str(exc)]
    return plan, [f"{f.code} {' '.join(f.ids)} {f.detail}".strip() for f in validate_plan(plan)]


def _findings_text(report: VerificationReport) -> str:
    lines = []
    for r in report.phase_results:
        for f in r.findings:
            lines.append(f"- {r.phase.value} [{f.code}] {f.message}")
    return "\n".join(lines) or "(none)"


# --- entry points -------------------------------------------------------------


def build_runner(config: RunConfig) -> AgentRunner:
    cache: dict[BackendConfig, object] = {}
    pools = {}
    for role in AgentRole:
        specs = config.backends_for(role)
        for spec in specs:
            if spec not in cache:
                cache[spec] = make_backend(spec)
        if specs:
            pools[role] = [cache[spec] for spec in specs]
    return AgentRunner(
        pools,
        template_dir=config.template_dir,
        timeouts={role: config.timeout_for(role) for role in AgentRole},
        network_allowed=config.network_allowed,
    )


def load_run_config(run_dir: Path) -> RunConfig:
    state = RunState(run_dir)
    return config_from_dict(yaml.safe_load(state.read("config.yaml")), run_dir)


def init_run_dir(run_dir: str | Path, problem: str, config: RunConfig) -> None:
    """Write config.yaml and problem.md, or check they match an existing run."""
    run_dir = Path(run_dir)
    state = RunState(run_dir)
    cfg_text = config.to_yaml()
    for rel, content in (("config.yaml", cfg_text), ("problem.md", problem)):
        if state.is_complete(rel):
            if state.read(rel) != content:
                raise ConfigError(rel, f"differs from the existing run in {run_dir}; resume with identical inputs")
        else:
            state.persist(rel, content)


def _drive(run_dir: Path, config: RunConfig, runner: AgentRunner | None, fault, event: str) -> RunOutcome:
    config.check_backends()
    runner = runner or build_runner(config)
    with run_lock(run_dir):
        pipeline = Pipeline(run_dir, config, runner, fault=fault)
        pipeline.state.sweep_temp_files()
        pipeline.state.log_event(event, mode=config.mode)
        return pipeline.run()


def run(problem: str, config: RunConfig, run_dir: str | Path, *, runner: AgentRunner | None = None, fault=None) -> RunOutcome:
    run_dir = Path(run_dir)
    init_run_dir(run_dir, problem, config)
    return _drive(run_dir, config, runner, fault, "start")


def run_simple_mode(problem: str, config: RunConfig, run_dir: str | Path, **kwargs) -> RunOutcome:
    if config.mode != "simple":
        raise ConfigError("mode", "run_simple_mode needs mode: simple")
    return run(problem, config, run_dir, **kwargs)


def run_decomposition_mode(problem: str, config: RunConfig, run_dir: str | Path, **kwargs) -> RunOutcome:
    if config.mode != "decomposition":
        raise ConfigError("mode", "run_decomposition_mode needs mode: decomposition")
    return run(problem, config, run_dir, **kwargs)


def resume(run_dir: str | Path, config: RunConfig | None = None, *, runner: AgentRunner | None = None, fault=None) -> RunOutcome:
    run_dir = Path(run_dir)
    check_layout(run_dir)
    stored = load_run_config(run_dir)
    if config is not None and config.to_yaml() != stored.to_yaml():
        raise ConfigError("config.yaml", "a resumed run must use the configuration it started with")
    return _drive(run_dir, stored, runner, fault, "resume")


def probe_progress(run_dir: Path) -> ProgressPoint:
    check_layout(run_dir)
    config = load_run_config(run_dir)
    pipeline = Pipeline(run_dir, config, None, probe=True)
    try:
        outcome = pipeline.run()
    except Pending as exc:
        return exc.point
    coords = {}
    if outcome.mode == "simple":
        coords = {"round": outcome.round}
    elif outcome.budget is not None:
        coords = dict(zip(("attempt", "revision", "proof"), outcome.budget.as_tuple()))
    budget = outcome.budget.as_tuple() if outcome.budget else None
    return ProgressPoint(config.mode, "done", coords, budget, outcome.status)
