"""Multi-agent generate-verify-revise pipeline for natural-language proofs."""

from .orchestrator import (
    EffectiveAction,
    RegulatorDecision,
    RetryBudget,
    RunOutcome,
    apply_budget,
    resume,
    run,
    run_decomposition_mode,
    run_simple_mode,
)
from .runstate import scan_progress

__all__ = [
    "EffectiveAction",
    "RegulatorDecision",
    "RetryBudget",
    "RunOutcome",
    "apply_budget",
    "resume",
    "run",
    "run_decomposition_mode",
    "run_simple_mode",
    "scan_progress",
]
__version__ = "0.1.0"
