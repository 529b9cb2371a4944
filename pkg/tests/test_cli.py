from __future__ import annotations

import os
import shutil
import subprocess
import sys

import pytest
import yaml

from proofloop.cli import EXIT_ERROR, EXIT_FAILED, EXIT_OK, SYNOPSIS, main

from conftest import SCENARIOS, SHARED, tree_digest


def prove(tmp_path, name, *extra):
    return main(
        ["prove", "--problem", str(SHARED / "problem.md"), "--config", str(SCENARIOS / name / "config.yaml"),
         "--out", str(tmp_path / "run"), *extra]
    )


@pytest.mark.parametrize(
    "name, code",
    [("simple_pass", EXIT_OK), ("decomp_pass", EXIT_OK), ("simple_continue", EXIT_FAILED), ("decomp_always_fail", EXIT_FAILED)],
)
def test_prove_exit_codes(tmp_path, capsys, name, code):
    assert prove(tmp_path, name) == code
    out = capsys.readouterr().out
    assert ("proved" in out) == (code == EXIT_OK)


def test_prove_reports_proof_path(tmp_path, capsys):
    prove(tmp_path, "simple_pass")
    out = capsys.readouterr().out
    assert str(tmp_path / "run" / "round_001") in out


def test_mode_flag_overrides_config(tmp_path):
    assert prove(tmp_path, "decomp_pass", "--mode", "decomposition") == EXIT_OK
    assert (tmp_path / "run" / "attempt_001").is_dir()


def test_missing_problem_file_is_named(tmp_path, capsys):
    code = main(["prove", "--problem", str(tmp_path / "nope.md"), "--config", str(SCENARIOS / "simple_pass/config.yaml"),
                 "--out", str(tmp_path / "run")])
    err = capsys.readouterr().err
    assert code == EXIT_ERROR and str(tmp_path / "nope.md") in err
    assert not (tmp_path / "run").exists()


def test_usage_error_prints_synopsis(capsys):
    assert main(["prove", "--problem", "x"]) == EXIT_ERROR
    assert SYNOPSIS in capsys.readouterr().err
    assert main(["frobnicate"]) == EXIT_ERROR


def test_config_error_exits_1(tmp_path, capsys):
    bad = tmp_path / "c.yaml"
    bad.write_text("backends: {default: {kind: scripted, script_path: .}}\nn_provers: 0\n")
    assert main(["prove", "--problem", str(SHARED / "problem.md"), "--config", str(bad), "--out", str(tmp_path / "r")]) == EXIT_ERROR
    assert "n_provers" in capsys.readouterr().err


def test_resume_completed_run_is_idempotent(tmp_path, capsys):
    prove(tmp_path, "decomp_two_attempts")
    before = tree_digest(tmp_path / "run")
    assert main(["resume", str(tmp_path / "run")]) == EXIT_OK
    assert tree_digest(tmp_path / "run") == before


def test_resume_missing_dir(tmp_path, capsys):
    assert main(["resume", str(tmp_path / "none")]) == EXIT_ERROR


def test_status_reports_without_mutating(tmp_path, capsys):
    prove(tmp_path, "decomp_always_fail")
    capsys.readouterr()
    before = tree_digest(tmp_path / "run", exclude=())
    assert main(["status", str(tmp_path / "run")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "mode: decomposition" in out and "budget: attempt 3, revision 2, proof 3" in out
    assert "outcome: exhausted" in out
    assert tree_digest(tmp_path / "run", exclude=()) == before


def test_status_of_non_run_dir(tmp_path, capsys):
    assert main(["status", str(tmp_path)]) == EXIT_ERROR


@pytest.mark.parametrize(
    "name, proof, code",
    [("verify_easy_pass", "proof_good.md", EXIT_OK), ("verify_hard_pass", "proof_good.md", EXIT_OK),
     ("verify_hard_sv_fail", "proof_good.md", EXIT_FAILED)],
)
def test_verify(tmp_path, capsys, name, proof, code):
    shutil.copy(SHARED / proof, tmp_path / "proof.md")
    args = ["verify", "--problem", str(SHARED / "problem.md"), "--proof", str(tmp_path / "proof.md"),
            "--config", str(SCENARIOS / name / "config.yaml")]
    assert main(args) == code
    out = capsys.readouterr().out
    report = tmp_path / "proof.report.yaml"
    assert f"report: {report}" in out
    assert yaml.safe_load(report.read_text())["phases"]


def test_init_writes_loadable_config(tmp_path, capsys):
    out = tmp_path / "cfg" / "config.yaml"
    assert main(["init", "--out", str(out)]) == EXIT_OK
    assert "max_rounds: 8" in out.read_text()
    assert main(["init", "--out", str(out)]) == EXIT_ERROR
    assert main(["init", "--out", str(out), "--force"]) == EXIT_OK


def test_locked_run_dir(tmp_path, capsys):
    from proofloop.runstate import run_lock

    prove(tmp_path, "simple_pass")
    with run_lock(tmp_path / "run"):
        assert main(["resume", str(tmp_path / "run")]) == EXIT_ERROR
    assert "lock" in capsys.readouterr().err.lower()


def test_module_entry_point_no_color(tmp_path):
    env = {**os.environ, "NO_COLOR": "1", "PROOFLOOP_OFFLINE": "1"}
    proc = subprocess.run(
        [sys.executable, "-m", "proofloop", "prove", "--problem", str(SHARED / "problem.md"),
         "--config", str(SCENARIOS / "simple_pass/config.yaml"), "--out", str(tmp_path / "run")],
        capture_output=True, text=True, env=env, timeout=60,
    )
    assert proc.returncode == EXIT_OK, proc.stderr
    assert "\033[" not in proc.stdout and proc.stdout.startswith("proved")
