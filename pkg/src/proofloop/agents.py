"""Agent roles, the context-isolation matrix, prompt rendering and backends.

Two backends share one contract:

* ``subprocess``: writes ``prompt.md`` into a fresh workspace, runs a command
  line, and collects the files the agent wrote there.
* ``scripted``: replays canned outputs from a scenario directory. Responses are
  a pure function of (scenario, role, call index).
"""

from __future__ import annotations

import contextlib
import logging
import os
import re
import shlex
import subprocess
import shutil
import signal
import tempfile
import threading
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import jinja2
import yaml

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 30 * 60


class AgentRole(str, Enum):
    LITERATURE_SURVEYOR = "literature_surveyor"
    BRAINSTORMER = "brainstormer"
    DECOMPOSER = "decomposer"
    PROVER = "prover"
    STRUCTURAL_VERIFIER = "structural_verifier"
    DETAILED_VERIFIER = "detailed_verifier"
    SELECTOR = "selector"
    REGULATOR = "regulator"
    VERDICT = "verdict"
    DIFFICULTY_JUDGE = "difficulty_judge"
    SUMMARIZER = "summarizer"


R = AgentRole

# Which named artifacts each role may receive. Nothing else gets through.
ALLOWED_INPUTS: dict[AgentRole, frozenset[str]] = {
    R.LITERATURE_SURVEYOR: frozenset({"problem"}),
    R.BRAINSTORMER: frozenset({"problem", "survey"}),
    R.DECOMPOSER: frozenset({"problem", "survey", "hints", "previous_plans", "regulator_analyses"}),
    R.PROVER: frozenset(
        {"problem", "survey", "plan", "hints", "brainstorm_notes", "previous_proof", "previous_reports"}
    ),
    R.STRUCTURAL_VERIFIER: frozenset({"problem", "proof", "plan", "rules"}),
    R.DETAILED_VERIFIER: frozenset({"problem", "proof", "plan", "structural_report"}),
    R.SELECTOR: frozenset({"problem", "candidates"}),
    R.REGULATOR: frozenset({"problem", "plan", "reports", "structural_findings"}),
    R.VERDICT: frozenset({"reports"}),
    R.DIFFICULTY_JUDGE: frozenset({"problem", "proof"}),
    R.SUMMARIZER: frozenset({"problem", "survey", "proof", "reports", "outcome"}),
}

REQUIRED_OUTPUTS: dict[AgentRole, tuple[str, ...]] = {
    R.LITERATURE_SURVEYOR: ("survey.md",),
    R.BRAINSTORMER: ("notes.md",),
    R.DECOMPOSER: ("plan.yaml",),
    R.PROVER: ("proof.md",),
    R.STRUCTURAL_VERIFIER: ("report.yaml",),
    R.DETAILED_VERIFIER: ("report.yaml",),
    R.SELECTOR: ("decision.md",),
    R.REGULATOR: ("decision.md",),
    R.VERDICT: ("decision.md",),
    R.DIFFICULTY_JUDGE: ("decision.md",),
    R.SUMMARIZER: ("summary.md",),
}

VERIFIER_ROLES = frozenset({R.STRUCTURAL_VERIFIER, R.DETAILED_VERIFIER, R.DIFFICULTY_JUDGE})


class AgentError(RuntimeError):
    pass


class IsolationViolation(AgentError):
    pass


class MissingTemplate(AgentError):
    pass


class UnresolvedPlaceholder(AgentError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unresolved placeholder {name!r}")


class SpawnFailure(AgentError):
    pass


class MissingRequiredOutput(AgentError):
    def __init__(self, role: AgentRole, filename: str):
        self.role = role
        self.filename = filename
        super().__init__(f"{role.value} did not write {filename}")


class VerdictParseError(ValueError):
    def __init__(self, kind: str, token: str = ""):
        self.kind = kind  # NotFound | UnknownToken
        self.token = token
        super().__init__(f"{kind}" + (f": {token}" if token else ""))


class ExitStatus(str, Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    CRASHED = "crashed"


@dataclass(frozen=True)
class AgentRequest:
    role: AgentRole
    inputs: Mapping[str, str]
    workspace: Path
    timeout: float = DEFAULT_TIMEOUT_S
    network_allowed: bool = False
    call_index: int | None = None  # logical per-role ordinal within a run

    def __post_init__(self):
        extra = set(self.inputs) - ALLOWED_INPUTS[self.role]
        if extra:
            raise IsolationViolation(f"{self.role.value} may not receive {sorted(extra)}")


@dataclass(frozen=True)
class AgentResult:
    role: AgentRole
    output_files: Mapping[str, str]
    transcript: str
    exit_status: ExitStatus
    label: str = ""
    error: str | None = None  # set by AgentRunner when the call did not succeed

    @property
    def ok(self) -> bool:
        return self.exit_status is ExitStatus.OK


@dataclass(frozen=True)
class BackendConfig:
    kind: str  # subprocess | scripted
    command_template: str = ""
    script_path: Path | None = None
    model: str = ""

    def __post_init__(self):
        if self.kind == "subprocess":
            for ph in ("{workspace}", "{prompt_file}"):
                if ph not in self.command_template:
                    raise ValueError(f"command_template must contain {ph}")
        elif self.kind == "scripted":
            if self.script_path is None:
                raise ValueError("scripted backend needs script_path")
        else:
            raise ValueError(f"unknown backend kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.model:
            return self.model
        if self.kind == "scripted":
            return f"scripted:{Path(self.script_path).name}"
        return shlex.split(self.command_template)[0]


# --- prompts ---------------------------------------------------------------


def default_template_dir() -> Path:
    return Path(str(resources.files("proofloop") / "templates"))


_UNDEFINED_RE = re.compile(r"'([^']+)' is undefined")


def render_prompt(role: AgentRole, request: AgentRequest, template_dir: Path | None = None) -> str:
    """Fill the role's template with the request inputs.

    Templates are Jinja2 with strict undefined handling, so a placeholder
    that no input supplies is an error rather than an empty string.
    """
    template_dir = Path(template_dir) if template_dir else default_template_dir()
    env = jinja2.Environment(
        loader=jinja2.FileSystemLoader(str(template_dir)),
        undefined=jinja2.StrictUndefined,
        keep_trailing_newline=True,
        autoescape=False,
    )
    try:
        template = env.get_template(f"{role.value}.md")
    except jinja2.TemplateNotFound:
        raise MissingTemplate(f"no template for {role.value} in {template_dir}") from None
    context = dict(request.inputs)
    context["role"] = role.value
    context["required_outputs"] = list(REQUIRED_OUTPUTS[role])
    try:
        return template.render(**context)
    except jinja2.UndefinedError as exc:
        m = _UNDEFINED_RE.search(str(exc))
        raise UnresolvedPlaceholder(m.group(1) if m else str(exc)) from None


# --- verdict line protocol -------------------------------------------------

_VERDICT_RE = re.compile(r"^[ \t>*_`]*VERDICT[ \t*_`]*:[ \t*_`]*([A-Za-z_]+)(.*)$", re.MULTILINE)


def parse_verdict_line(text: str) -> tuple[str, str]:
    """Last ``VERDICT: TOKEN [argument]`` line, as (TOKEN, argument)."""
    matches = list(_VERDICT_RE.finditer(text))
    if not matches:
        raise VerdictParseError("NotFound")
    m = matches[-1]
    return m.group(1).upper(), m.group(2).strip(" \t*_`")


def parse_structured_verdict(text: str, expected) -> str:
    expected = {t.upper() for t in expected}
    if not expected:
        raise ValueError("expected must not be empty")
    token, _ = parse_verdict_line(text)
    if token not in expected:
        raise VerdictParseError("UnknownToken", token)
    return token


# --- backends --------------------------------------------------------------


@dataclass
class RecordedCall:
    role: AgentRole
    call_index: int
    inputs: dict[str, str]
    prompt: str
    workspace: Path
    label: str


class Backend:
    """Base class. ``invoke`` enforces the workspace and output contracts."""

    def __init__(self, config: BackendConfig):
        self.config = config
        self.calls: list[RecordedCall] = []
        self._lock = threading.Lock()
        self._counters: dict[AgentRole, int] = {}

    @property
    def label(self) -> str:
        return self.config.label

    def _ordinal(self, request: AgentRequest) -> int:
        with self._lock:
            n = self._counters.get(request.role, 0) + 1
            self._counters[request.role] = n
            return request.call_index if request.call_index is not None else n

    def invoke(self, request: AgentRequest, prompt: str) -> AgentResult:
        ws = Path(request.workspace)
        if not ws.is_dir():
            raise SpawnFailure(f"workspace {ws} does not exist")
        if any(ws.iterdir()):
            raise SpawnFailure(f"workspace {ws} is not empty")
        idx = self._ordinal(request)
        with self._lock:
            self.calls.append(RecordedCall(request.role, idx, dict(request.inputs), prompt, ws, self.label))
        result = self._run(request, prompt, idx)
        if result.ok:
            for name in REQUIRED_OUTPUTS[request.role]:
                if request.role is R.DIFFICULTY_JUDGE and name != "decision.md":
                    continue
                if not result.output_files.get(name, "").strip():
                    raise MissingRequiredOutput(request.role, name)
        return result

    def _run(self, request: AgentRequest, prompt: str, idx: int) -> AgentResult:
        raise NotImplementedError


class SubprocessBackend(Backend):
    def _run(self, request: AgentRequest, prompt: str, idx: int) -> AgentResult:
        ws = Path(request.workspace)
        prompt_file = ws / "prompt.md"
        prompt_file.write_text(prompt, encoding="utf-8")
        subs = {
            "{workspace}": str(ws),
            "{prompt_file}": str(prompt_file),
            "{role}": request.role.value,
            "{model}": self.config.model,
        }
        argv = []
        for tok in shlex.split(self.config.command_template):
            for k, v in subs.items():
                tok = tok.replace(k, v)
            argv.append(tok)
        env = dict(os.environ)
        env.update(
            PROOFLOOP_ROLE=request.role.value,
            PROOFLOOP_WORKSPACE=str(ws),
            PROOFLOOP_PROMPT_FILE=str(prompt_file),
            PROOFLOOP_NETWORK="1" if request.network_allowed else "0",
        )
        try:
            proc = subprocess.Popen(
                argv, cwd=ws, env=env, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                stdin=subprocess.DEVNULL, start_new_session=True,
            )
        except OSError as exc:
            raise SpawnFailure(f"cannot run {argv[0]!r}: {exc}") from exc
        try:
            out, _ = proc.communicate(timeout=request.timeout)
        except subprocess.TimeoutExpired:
            # the agent may have children holding the pipe; take down the group
            with contextlib.suppress(ProcessLookupError):
                os.killpg(proc.pid, signal.SIGKILL)
            out, _ = proc.communicate()
            return AgentResult(request.role, _collect(ws), _decode(out), ExitStatus.TIMEOUT, self.label)
        status = ExitStatus.OK if proc.returncode == 0 else ExitStatus.CRASHED
        return AgentResult(request.role, _collect(ws), _decode(out), status, self.label)


def _decode(data) -> str:
    if data is None:
        return ""
    return data.decode("utf-8", "replace") if isinstance(data, bytes) else data


def _collect(ws: Path) -> dict[str, str]:
    out = {}
    for p in sorted(ws.iterdir()):
        if p.is_file() and p.name != "prompt.md":
            out[p.name] = p.read_text(encoding="utf-8", errors="replace")
    return out


@dataclass
class ScriptedResponse:
    status: ExitStatus = ExitStatus.OK
    files: dict[str, str] = field(default_factory=dict)
    transcript: str = ""


class ScriptedBackend(Backend):
    """Replays a scenario directory.

    ``manifest.yaml`` maps each role to a list of responses; call ``i`` of a
    role (1-based) gets entry ``i``, and the last entry repeats. File values
    are paths relative to the scenario directory, or ``{text: ...}``.
    """

    def __init__(self, config: BackendConfig):
        super().__init__(config)
        self.root = Path(config.script_path)
        manifest_path = self.root / "manifest.yaml"
        if not manifest_path.is_file():
            raise SpawnFailure(f"scenario manifest not found: {manifest_path}")
        manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8")) or {}
        self.name = manifest.get("name", self.root.name)
        self.responses: dict[AgentRole, list[ScriptedResponse]] = {}
        for role_name, entries in (manifest.get("roles") or {}).items():
            role = AgentRole(role_name)
            self.responses[role] = [self._load(e) for e in entries]

    def _load(self, entry: dict) -> ScriptedResponse:
        files = {}
        for name, ref in (entry.get("files") or {}).items():
            if isinstance(ref, dict):
                files[name] = ref["text"]
            else:
                files[name] = (self.root / ref).read_text(encoding="utf-8")
        return ScriptedResponse(ExitStatus(entry.get("status", "ok")), files, entry.get("transcript", ""))

    def _run(self, request: AgentRequest, prompt: str, idx: int) -> AgentResult:
        entries = self.responses.get(request.role)
        if not entries:
            raise SpawnFailure(f"scenario {self.name} has no script for {request.role.value}")
        resp = entries[min(idx, len(entries)) - 1]
        transcript = resp.transcript or f"[{self.name}] {request.role.value} call {idx}\n"
        files = dict(resp.files) if resp.status is ExitStatus.OK else {}
        return AgentResult(request.role, files, transcript, resp.status, self.label)


def make_backend(config: BackendConfig) -> Backend:
    if config.kind == "scripted":
        return ScriptedBackend(config)
    return SubprocessBackend(config)


def invoke(request: AgentRequest, backend: Backend, prompt: str) -> AgentResult:
    return backend.invoke(request, prompt)


class AgentRunner:
    """Builds isolated requests, renders prompts and invokes the bound backend.

    ``backends`` maps each role to one or more backends; ``slot`` picks one
    round-robin, which is how several models are fanned out over one role.
    Failures of the agent itself come back as results with ``error`` set;
    isolation and template problems are programming errors and raise.
    """

    def __init__(
        self,
        backends: Mapping[AgentRole, Sequence[Backend]],
        *,
        template_dir: Path | None = None,
        timeouts: Mapping[AgentRole, float] | None = None,
        network_allowed: bool = False,
    ):
        self.backends = backends
        self.template_dir = template_dir
        self.timeouts = dict(timeouts or {})
        self.network_allowed = network_allowed

    def backend(self, role: AgentRole, slot: int = 0) -> Backend:
        pool = self.backends.get(role)
        if not pool:
            raise SpawnFailure(f"no backend configured for {role.value}")
        return pool[slot % len(pool)]

    def label(self, role: AgentRole, slot: int = 0) -> str:
        return self.backend(role, slot).label

    def call(
        self, role: AgentRole, inputs: Mapping[str, str], *, slot: int = 0, call_index: int | None = None
    ) -> AgentResult:
        backend = self.backend(role, slot)
        workspace = Path(tempfile.mkdtemp(prefix=f"proofloop-{role.value}-"))
        try:
            request = AgentRequest(
                role,
                dict(inputs),
                workspace,
                timeout=self.timeouts.get(role, DEFAULT_TIMEOUT_S),
                network_allowed=self.network_allowed,
                call_index=call_index,
            )
            prompt = render_prompt(role, request, self.template_dir)
            try:
                result = backend.invoke(request, prompt)
            except (SpawnFailure, MissingRequiredOutput) as exc:
                log.warning("%s call failed: %s", role.value, exc)
                return AgentResult(role, {}, "", ExitStatus.CRASHED, backend.label, error=str(exc))
            if not result.ok:
                tail = result.transcript[-500:]
                return AgentResult(
                    role, result.output_files, result.transcript, result.exit_status, backend.label,
                    error=f"{role.value} {result.exit_status.value}: {tail}".strip(),
                )
            return result
        finally:
            shutil.rmtree(workspace, ignore_errors=True)
