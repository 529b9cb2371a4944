"""Command-line entry point: ``proofloop prove|resume|verify|status|init``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import orchestrator
from .agents import AgentError
from .config import DEFAULT_CONFIG_TEXT, ConfigError, load_config
from .runstate import CorruptLayout, RunLocked, StorageError, scan_progress
from .verification import run_standalone_verifier

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAILED = 2

SYNOPSIS = """\
usage: proofloop prove --problem FILE --config FILE --out DIR [--mode simple|decomposition]
       proofloop resume DIR
       proofloop verify --problem FILE --proof FILE [--config FILE] [--report FILE]
       proofloop status DIR
       proofloop init --out FILE [--force]
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; usage errors are 1 here
        raise UsageError(message)


def _color(text: str, code: str, stream=sys.stdout) -> str:
    if os.environ.get("NO_COLOR") or not getattr(stream, "isatty", lambda: False)():
        return text
    return f"\033[{code}m{text}\033[0m"


def _say(status: str, detail: str = "") -> None:
    good = status in ("proved", "pass", "done")
    print(_color(status, "32" if good else "31") + (f": {detail}" if detail else ""))


def _read(path: str, what: str) -> str:
    p = Path(path)
    try:
        return p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {p}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {what} file {p}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proofloop", description="Generate-verify-revise loop for mathematical proofs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prove", help="start (or continue) a run")
    p.add_argument("--problem", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("simple", "decomposition"))

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("run_dir")

    p = sub.add_parser("verify", help="standalone difficulty-adaptive verification")
    p.add_argument("--problem", required=True)
    p.add_argument("--proof", required=True)
    p.add_argument("--config", default="config.yaml")
    p.add_argument("--report", help="where to write report.yaml (default: next to the proof)")

    p = sub.add_parser("status", help="show progress of a run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("init", help="write a commented default config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    return parser


def _outcome(outcome: orchestrator.RunOutcome, run_dir: Path) -> int:
    detail = outcome.describe().removeprefix(outcome.status).strip()
    if outcome.proof_path:
        detail += f"; proof at {run_dir / outcome.proof_path}"
    _say(outcome.status, detail)
    return EXIT_OK if outcome.proved else EXIT_FAILED


def cmd_prove(args) -> int:
    problem = _read(args.problem, "problem")
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    config = load_config(args.config)
    if args.mode:
        config = replace(config, mode=args.mode)
    run_dir = Path(args.out)
    return _outcome(orchestrator.run(problem, config, run_dir), run_dir)


def cmd_resume(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    return _outcome(orchestrator.resume(run_dir), run_dir)


def cmd_verify(args) -> int:
    problem = _read(args.problem, "problem")
    proof = _read(args.proof, "proof")
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    config = load_config(args.config)
    config.check_backends("verify")
    runner = orchestrator.build_runner(config)
    result = run_standalone_verifier(
        problem, proof, runner, network_allowed=config.network_allowed, proof_id=Path(args.proof).stem
    )
    report_path = Path(args.report) if args.report else Path(args.proof).with_suffix(".report.yaml")
    report_path.write_text(result.report.to_yaml(), encoding="utf-8")
    verdict = result.report.overall.value
    _say(verdict, f"difficulty {result.difficulty}, {result.agent_calls} agent call(s)")
    print(f"report: {report_path}")
    return EXIT_OK if result.report.passed else EXIT_FAILED


def cmd_status(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    point = scan_progress(run_dir)
    print(f"mode: {point.mode}")
    if "round" in point.coordinates:
        print(f"round: {point.coordinates['round']}")
    if point.budget is not None:
        d, r, p = point.budget
        print(f"budget: attempt {d}, revision {r}, proof {p}")
    print(f"next: {point.describe()}")
    if point.outcome:
        print(f"outcome: {point.outcome}")
    return EXIT_OK


def cmd_init(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists (use --force to overwrite)")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(DEFAULT_CONFIG_TEXT, encoding="utf-8")
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {"prove": cmd_prove, "resume": cmd_resume, "verify": cmd_verify, "status": cmd_status, "init": cmd_init}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(SYNOPSIS)
        print(f"proofloop: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(SYNOPSIS)
        print(f"proofloop: error: {exc}", file=sys.stderr)
    except ConfigError as exc:
        print(f"proofloop: config error: {exc}", file=sys.stderr)
    except RunLocked as exc:
        print(f"proofloop: {exc}", file=sys.stderr)
    except CorruptLayout as exc:
        print(f"proofloop: corrupt run directory: {exc}", file=sys.stderr)
    except (StorageError, orchestrator.RunHalted, AgentError) as exc:
        print(f"proofloop: run halted (resumable): {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"proofloop: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
