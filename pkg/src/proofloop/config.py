"""Run configuration (``config.yaml``) with strict validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .agents import DEFAULT_TIMEOUT_S, AgentRole, BackendConfig
from .document import DEFAULT_VAGUE_LEXICON

LAYOUT_VERSION = 1

_COUNTS = ("n_provers", "m_verifiers", "max_rounds", "max_proofs_per_plan", "max_decompositions", "parallelism")
_KEYS = (
    "layout_version", "mode", "n_provers", "m_verifiers", "max_rounds", "max_proofs_per_plan",
    "max_plan_revisions", "max_decompositions", "brainstorm_enabled", "network_allowed", "rules",
    "parallelism", "timeouts", "template_dir", "backends", "require_citation_coverage", "vague_lexicon",
)
_BACKEND_KEYS = ("kind", "command_template", "script_path", "model")


class ConfigError(ValueError):
    def __init__(self, path: str, detail: str = ""):
        self.path = path
        super().__init__(f"{path}: {detail}" if detail else path)


@dataclass(frozen=True)
class RunConfig:
    backends: dict[str, tuple[BackendConfig, ...]]
    mode: str = "simple"
    n_provers: int = 1
    m_verifiers: int = 1
    max_rounds: int = 8
    max_proofs_per_plan: int = 3
    max_plan_revisions: int = 2
    max_decompositions: int = 3
    brainstorm_enabled: bool = False
    network_allowed: bool = False
    rules: tuple[str, ...] = ()
    parallelism: int = 4
    timeouts: dict[str, float] = field(default_factory=dict)
    template_dir: Path | None = None
    require_citation_coverage: bool = True
    vague_lexicon: tuple[str, ...] = DEFAULT_VAGUE_LEXICON
    layout_version: int = LAYOUT_VERSION

    def backends_for(self, role: AgentRole) -> tuple[BackendConfig, ...]:
        return self.backends.get(role.value) or self.backends.get("default") or ()

    def timeout_for(self, role: AgentRole) -> float:
        return float(self.timeouts.get(role.value, self.timeouts.get("default", DEFAULT_TIMEOUT_S)))

    def roles_needed(self, purpose: str | None = None) -> list[AgentRole]:
        R = AgentRole
        purpose = purpose or self.mode
        if purpose == "verify":
            return [R.DIFFICULTY_JUDGE, R.STRUCTURAL_VERIFIER, R.DETAILED_VERIFIER]
        roles = [R.LITERATURE_SURVEYOR, R.PROVER, R.STRUCTURAL_VERIFIER, R.DETAILED_VERIFIER, R.VERDICT, R.SUMMARIZER]
        if purpose == "simple":
            if self.n_provers > 1:
                roles.append(R.SELECTOR)
            if self.brainstorm_enabled:
                roles.append(R.BRAINSTORMER)
        else:
            roles += [R.DECOMPOSER, R.REGULATOR]
        return roles

    def check_backends(self, purpose: str | None = None) -> None:
        missing = [r.value for r in self.roles_needed(purpose) if not self.backends_for(r)]
        if missing:
            raise ConfigError(f"backends.{missing[0]}", "no backend configured (and no default)")

    def to_yaml(self) -> str:
        def backend(b: BackendConfig) -> dict:
            d: dict[str, Any] = {"kind": b.kind}
            if b.command_template:
                d["command_template"] = b.command_template
            if b.script_path is not None:
                d["script_path"] = str(b.script_path)
            if b.model:
                d["model"] = b.model
            return d

        data = {
            "layout_version": self.layout_version,
            "mode": self.mode,
            "n_provers": self.n_provers,
            "m_verifiers": self.m_verifiers,
            "max_rounds": self.max_rounds,
            "max_proofs_per_plan": self.max_proofs_per_plan,
            "max_plan_revisions": self.max_plan_revisions,
            "max_decompositions": self.max_decompositions,
            "brainstorm_enabled": self.brainstorm_enabled,
            "network_allowed": self.network_allowed,
            "rules": list(self.rules),
            "parallelism": self.parallelism,
            "timeouts": dict(self.timeouts),
            "template_dir": str(self.template_dir) if self.template_dir else None,
            "require_citation_coverage": self.require_citation_coverage,
            "vague_lexicon": list(self.vague_lexicon),
            "backends": {k: [backend(b) for b in v] for k, v in sorted(self.backends.items())},
        }
        return yaml.safe_dump(data, sort_keys=False, allow_unicode=True)


def _int(data: dict, key: str, default: int, minimum: int) -> int:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(key, f"expected an integer >= {minimum}")
    return value


def _bool(data: dict, key: str, default: bool) -> bool:
    value = data.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(key, "expected true or false")
    return value


def _backend(raw: Any, path: str, base: Path) -> BackendConfig:
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    for key in raw:
        if key not in _BACKEND_KEYS:
            raise ConfigError(f"{path}.{key}", "unknown key")
    script = raw.get("script_path")
    if script is not None:
        script = Path(script)
        if not script.is_absolute():
            script = (base / script).resolve()
    try:
        return BackendConfig(
            kind=raw.get("kind", ""),
            command_template=raw.get("command_template", "") or "",
            script_path=script,
            model=raw.get("model", "") or "",
        )
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def config_from_dict(data: Any, base: Path = Path(".")) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a mapping")
    for key in data:
        if key not in _KEYS:
            raise ConfigError(str(key), "unknown key")
    if data.get("layout_version", LAYOUT_VERSION) != LAYOUT_VERSION:
        raise ConfigError("layout_version", f"only version {LAYOUT_VERSION} is supported")
    mode = data.get("mode", "simple")
    if mode not in ("simple", "decomposition"):
        raise ConfigError("mode", "expected simple or decomposition")

    raw_backends = data.get("backends")
    if not isinstance(raw_backends, dict) or not raw_backends:
        raise ConfigError("backends", "at least one backend is required")
    valid_roles = {r.value for r in AgentRole} | {"default"}
    backends: dict[str, tuple[BackendConfig, ...]] = {}
    for role, spec in raw_backends.items():
        if role not in valid_roles:
            raise ConfigError(f"backends.{role}", "unknown role")
        specs = spec if isinstance(spec, list) else [spec]
        if not specs:
            raise ConfigError(f"backends.{role}", "empty backend list")
        backends[role] = tuple(_backend(s, f"backends.{role}[{i}]", base) for i, s in enumerate(specs))

    timeouts = data.get("timeouts") or {}
    if not isinstance(timeouts, dict):
        raise ConfigError("timeouts", "expected a mapping")
    for role, secs in timeouts.items():
        if role not in valid_roles:
            raise ConfigError(f"timeouts.{role}", "unknown role")
        if isinstance(secs, bool) or not isinstance(secs, (int, float)) or secs <= 0:
            raise ConfigError(f"timeouts.{role}", "expected a positive number of seconds")

    rules = data.get("rules") or []
    if not isinstance(rules, list) or not all(isinstance(r, str) for r in rules):
        raise ConfigError("rules", "expected a list of strings")
    lexicon = data.get("vague_lexicon", list(DEFAULT_VAGUE_LEXICON))
    if not isinstance(lexicon, list) or not lexicon or not all(isinstance(p, str) and p.strip() for p in lexicon):
        raise ConfigError("vague_lexicon", "expected a non-empty list of phrases")

    template_dir = data.get("template_dir")
    if template_dir is not None:
        template_dir = Path(template_dir)
        if not template_dir.is_absolute():
            template_dir = (base / template_dir).resolve()

    counts = {k: _int(data, k, getattr(RunConfig, k), 1) for k in _COUNTS}
    return RunConfig(
        backends=backends,
        mode=mode,
        max_plan_revisions=_int(data, "max_plan_revisions", 2, 0),
        brainstorm_enabled=_bool(data, "brainstorm_enabled", False),
        network_allowed=_bool(data, "network_allowed", False),
        require_citation_coverage=_bool(data, "require_citation_coverage", True),
        rules=tuple(rules),
        timeouts={k: float(v) for k, v in timeouts.items()},
        template_dir=template_dir,
        vague_lexicon=tuple(p.lower() for p in lexicon),
        **counts,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from None
    return config_from_dict(data, path.parent.resolve())


DEFAULT_CONFIG_TEXT = """\
# proofloop run configuration
layout_version: 1

# simple: parallel provers, verify, select, verdict, repeat for up to max_rounds.
# decomposition: decomposer plan -> single prover -> verify -> regulator.
mode: simple

# Simple mode fan-out: n provers, each proof checked by m verifiers.
n_provers: 1
m_verifiers: 1
max_rounds: 8

# Decomposition-mode retry limits.
max_proofs_per_plan: 3
max_plan_revisions: 2
max_decompositions: 3

brainstorm_enabled: false

# Citation URL checks contact the network only when true.
network_allowed: false

# Extra phase-5 verification rules (steering/verifier_rules.md adds more per round).
rules: []

# Maximum concurrent agent invocations.
parallelism: 4

# Seconds per invocation; keys are role names or "default".
timeouts:
  default: 1800

require_citation_coverage: true

# One entry per role, or "default". A list fans a role out over several models.
# Subprocess commands must contain {workspace} and {prompt_file}; {role} and
# {model} are also substituted.
backends:
  default:
    kind: subprocess
    command_template: "my-agent --workdir {workspace} --prompt-file {prompt_file}"
    model: my-agent
"""
