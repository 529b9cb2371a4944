from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from proofloop.agents import AgentRole
from proofloop.document import CitationBlock, parse_proof_document
from proofloop.verification import (
    Finding,
    PhaseId,
    PhaseResult,
    Verdict,
    VerificationReport,
    integrity_prefilter,
    merge_phase,
    parse_agent_report,
    resolve_citation_urls,
    run_standalone_verifier,
    structural_prechecks,
    worst,
)

from conftest import PROBLEM, calls, scenario, shared

P = PhaseId
V = Verdict


def citation(cid: str, url: str | None) -> CitationBlock:
    return CitationBlock(cid, "s", "t", "", "l", url, "", (0, 0))


# --- verdict lattice ---------------------------------------------------------


@given(st.lists(st.sampled_from(list(Verdict)), min_size=1))
def test_worst_is_max_severity(vs):
    w = worst(*vs)
    assert w in vs and all(w.severity >= v.severity for v in vs)


@given(st.sampled_from(list(Verdict)), st.sampled_from(list(Verdict)))
def test_merge_never_improves_either_side(a, b):
    fa = (Finding("d"),) if a is V.FAIL else ()
    fb = (Finding("a"),) if b is V.FAIL else ()
    merged = merge_phase(PhaseResult(P.P2_COMPLETENESS, a, fa), PhaseResult(P.P2_COMPLETENESS, b, fb))
    assert merged.verdict is worst(a, b)
    assert merged.findings == fa + fb


def test_failing_phase_needs_findings():
    with pytest.raises(ValueError):
        PhaseResult(P.P1_INTEGRITY, V.FAIL)


def test_p6_requires_passing_structure():
    passing = tuple(PhaseResult(p, V.PASS) for p in PhaseId if p is not P.P6_DETAILED)
    VerificationReport("x", "v", passing + (PhaseResult(P.P6_DETAILED, V.PASS),), "detailed")
    bad = (PhaseResult(P.P1_INTEGRITY, V.UNCERTAIN),) + passing[1:]
    with pytest.raises(ValueError):
        VerificationReport("x", "v", bad + (PhaseResult(P.P6_DETAILED, V.PASS),), "detailed")


def test_overall_and_yaml_round_trip():
    rep = VerificationReport(
        "p1", "model", (PhaseResult(P.P1_INTEGRITY, V.PASS), PhaseResult(P.P2_COMPLETENESS, V.UNCERTAIN)), appendix="note"
    )
    assert rep.overall is V.FAIL and rep.passing_phases == 1
    assert VerificationReport.from_yaml(rep.to_yaml()) == rep


# --- integrity prefilter ----------------------------------------------------------


def test_quantifier_swap_fails_phase_one():
    doc = parse_proof_document(shared("proof_swapped.md"))
    res = integrity_prefilter(PROBLEM, doc)
    assert res.verdict is V.FAIL
    assert res.findings[0].code == "integrity_mismatch"
    assert "'for'" in res.findings[0].message and "'there'" in res.findings[0].message


def test_whitespace_only_differences_pass():
    raw = shared("proof_good.md").replace(
        "Prove that for all integers n, the number n^2 + n is even.",
        "Prove  that for all\nintegers n,   the number n^2 + n is even.",
    )
    assert integrity_prefilter(PROBLEM, parse_proof_document(raw)).verdict is V.PASS


def test_missing_restatement():
    raw = "Just a proof.\n\n```subgoal-tree\nid: r\nclaim: c\nresolution: children\n```\n"
    res = integrity_prefilter(PROBLEM, parse_proof_document(raw))
    assert [f.code for f in res.findings] == ["missing_restatement"]


@given(st.text(alphabet="ab \n\t", min_size=1).filter(lambda s: s.split()))
def test_prefilter_accepts_any_whitespace_reflow(problem):
    reflowed = "\n".join(problem.split())
    raw = f"# Problem Restatement\n\n{reflowed}\n\n```subgoal-tree\nid: r\nclaim: c\nresolution: children\n```\n"
    assert integrity_prefilter(problem, parse_proof_document(raw)).verdict is V.PASS


# --- citation URLs ----------------------------------------------------------------


def test_url_resolution_against_fixture_server(url_server, monkeypatch):
    base, seen = url_server
    monkeypatch.delenv("PROOFLOOP_OFFLINE")
    cites = [
        citation("ok", f"{base}/ok"),
        citation("gone", f"{base}/missing"),
        citation("three", f"{base}/hop/3"),
        citation("four", f"{base}/hop/4"),
        citation("none", None),
        citation("ftp", "ftp://example.org/x"),
    ]
    got = {v.citation_id: v.url_resolves for v in resolve_citation_urls(cites, network_allowed=True, timeout=5)}
    assert got == {"ok": "yes", "gone": "no", "three": "yes", "four": "no", "none": "skipped", "ftp": "no"}


def test_offline_makes_no_requests(url_server, monkeypatch):
    base, seen = url_server
    cites = [citation("ok", f"{base}/ok"), citation("gone", f"{base}/missing")]
    # forced offline by the environment variable even though the config allows network
    assert [v.url_resolves for v in resolve_citation_urls(cites, network_allowed=True)] == ["skipped", "skipped"]
    monkeypatch.delenv("PROOFLOOP_OFFLINE")
    assert [v.url_resolves for v in resolve_citation_urls(cites, network_allowed=False)] == ["skipped", "skipped"]
    assert seen == []


def test_unresolvable_url_fails_phase_three(url_server, monkeypatch):
    base, _ = url_server
    monkeypatch.delenv("PROOFLOOP_OFFLINE")
    raw = shared("proof_good.md").replace("location: Chapter 1, Section 2\n", f"location: Chapter 1, Section 2\nurl: {base}/missing\n")
    res = structural_prechecks(PROBLEM, parse_proof_document(raw), network_allowed=True)
    assert res[P.P3_CITATIONS].verdict is V.FAIL
    assert res[P.P3_CITATIONS].findings[0].code == "url_unresolved"


# --- agent reports ---------------------------------------------------------------------


def test_agent_report_missing_phase_is_uncertain():
    text = "phases:\n  - {phase: P1_integrity, verdict: pass}\nappendix: 'VERDICT: PASS'\n"
    rep = parse_agent_report(text, "", [P.P1_INTEGRITY, P.P2_COMPLETENESS])
    assert rep.phases[P.P2_COMPLETENESS].verdict is V.UNCERTAIN


def test_agent_report_without_verdict_line_is_uncertain():
    rep = parse_agent_report(shared("sv_pass.yaml").replace("VERDICT: PASS", "done"), "", list(PhaseId)[:5])
    assert rep.phases[P.P5_HUMAN_RULES].verdict is V.UNCERTAIN


def test_agent_fail_without_findings_gets_one():
    text = "phases:\n  - {phase: P6_detailed, verdict: fail}\nappendix: 'VERDICT: FAIL'\n"
    rep = parse_agent_report(text, "", [P.P6_DETAILED])
    assert rep.phases[P.P6_DETAILED].verdict is V.FAIL and rep.phases[P.P6_DETAILED].findings


def test_garbage_report_is_not_a_pass():
    rep = parse_agent_report(": : :\n[", "", [P.P1_INTEGRITY])
    assert rep.phases[P.P1_INTEGRITY].verdict is not V.PASS


# --- standalone verifier ---------------------------------------------------------------


@pytest.mark.parametrize(
    "name, passed, difficulty, agent_calls, dv_calls",
    [
        ("verify_easy_pass", True, "EASY", 1, 0),
        ("verify_hard_pass", True, "HARD", 3, 1),
        ("verify_hard_sv_fail", False, "HARD", 2, 0),
    ],
)
def test_standalone_verifier(name, passed, difficulty, agent_calls, dv_calls):
    config, runner = scenario(name)
    res = run_standalone_verifier(PROBLEM, shared("proof_good.md"), runner)
    assert res.report.passed is passed
    assert res.difficulty == difficulty
    assert res.agent_calls == agent_calls == len(calls(runner))
    assert len(calls(runner, AgentRole.DETAILED_VERIFIER)) == dv_calls


def test_standalone_easy_still_runs_deterministic_checks():
    _, runner = scenario("verify_easy_pass")
    res = run_standalone_verifier(PROBLEM, shared("proof_swapped.md"), runner)
    assert not res.report.passed
    assert res.report.phase(P.P1_INTEGRITY).verdict is V.FAIL


def test_standalone_unparseable_proof():
    _, runner = scenario("verify_hard_pass")
    res = run_standalone_verifier(PROBLEM, shared("proof_malformed.md"), runner)
    assert not res.report.passed
    assert res.report.phase(P.P2_COMPLETENESS).findings[0].code == "parse_error"
    assert calls(runner, AgentRole.STRUCTURAL_VERIFIER) == []
