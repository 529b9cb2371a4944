from __future__ import annotations

import hashlib
import http.server
import threading
from pathlib import Path

import pytest

from proofloop.agents import AgentRole
from proofloop.config import load_config
from proofloop.orchestrator import build_runner

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
SHARED = SCENARIOS / "_shared"
DOCS = Path(__file__).resolve().parent / "fixtures" / "documents"
PROBLEM = (SHARED / "problem.md").read_text(encoding="utf-8")


def scenario(name: str):
    """(config, runner) for a shipped scenario; the runner records every call."""
    config = load_config(SCENARIOS / name / "config.yaml")
    return config, build_runner(config)


def calls(runner, role: AgentRole | None = None):
    seen, out = set(), []
    for pool in runner.backends.values():
        for b in pool:
            if id(b) in seen:
                continue
            seen.add(id(b))
            out.extend(c for c in b.calls if role is None or c.role is role)
    return out


def tree_digest(root: Path, *, exclude=("events.log", ".lock")) -> dict[str, str]:
    """Relative path -> sha256 of every file under ``root``."""
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            out[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def shared(name: str) -> str:
    return (SHARED / name).read_text(encoding="utf-8")


@pytest.fixture(autouse=True)
def _offline(monkeypatch):
    monkeypatch.setenv("PROOFLOOP_OFFLINE", "1")


class _FixtureHandler(http.server.BaseHTTPRequestHandler):
    """/ok -> 200, /missing -> 404, /hop/N -> redirect chain of N hops ending at /ok."""

    def do_GET(self):
        self.server.requests.append(self.path)
        if self.path == "/ok":
            self._reply(200)
        elif self.path.startswith("/hop/"):
            n = int(self.path.rsplit("/", 1)[1])
            self.send_response(302)
            self.send_header("Location", "/ok" if n <= 1 else f"/hop/{n - 1}")
            self.send_header("Content-Length", "0")
            self.end_headers()
        else:
            self._reply(404)

    do_HEAD = do_GET

    def _reply(self, code: int):
        body = b"fixture\n"
        self.send_response(code)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if self.command == "GET":
            self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def url_server(monkeypatch):
    """Local HTTP server; yields (base_url, list of requested paths)."""
    monkeypatch.setenv("NO_PROXY", "127.0.0.1,localhost")
    monkeypatch.setenv("no_proxy", "127.0.0.1,localhost")
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _FixtureHandler)
    server.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}", server.requests
    finally:
        server.shutdown()
        server.server_close()


# --- acceptance reporting -------------------------------------------------------------

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
