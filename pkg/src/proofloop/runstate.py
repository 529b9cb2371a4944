"""Directory-backed run state.

Every artifact is written to a temporary name and renamed into place, then a
``<name>.done`` marker holding the content's SHA-256 is written the same way.
An artifact without its marker is incomplete and is ignored (and later
overwritten). Once a marker exists the artifact is immutable.

Layout (indices are zero-padded to three digits)::

    config.yaml  problem.md  events.log  summary.md
    stage0/survey.md  stage0/brainstorm_NNN/notes.md
    round_NNN/prover_NNN/{proof.md|failure.yaml, sv_NNN/report.yaml, dv_NNN/report.yaml}
    round_NNN/{selection.yaml, verdict.yaml}
    attempt_NNN/plan_rev_NNN/{plan.yaml|failure.yaml}
    attempt_NNN/plan_rev_NNN/proof_NNN/{proof.md|failure.yaml, sv/report.yaml,
                                        dv/report.yaml, verdict.yaml, regulator.yaml}
"""

from __future__ import annotations

import contextlib
import errno
import fcntl
import hashlib
import json
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

MARKER_SUFFIX = ".done"
EVENTS_FILE = "events.log"
LOCK_FILE = ".lock"


class StorageError(RuntimeError):
    pass


class StorageFull(StorageError):
    pass


class ArtifactExists(StorageError):
    pass


class IncompleteArtifact(StorageError):
    pass


class RunLocked(StorageError):
    pass


class CorruptLayout(StorageError):
    def __init__(self, path: str, detail: str = ""):
        self.path = path
        super().__init__(f"{path}: {detail}" if detail else path)


NEXT_STEPS = (
    "stage0_survey",
    "brainstorm",
    "decompose",
    "prove",
    "structural_verification",
    "detailed_verification",
    "select",
    "verdict",
    "regulate",
    "summary",
    "done",
)


@dataclass(frozen=True)
class ProgressPoint:
    mode: str
    next_step: str
    coordinates: dict[str, int] = field(default_factory=dict)
    budget: tuple[int, int, int] | None = None  # (attempt, revision, proof) in decomposition mode
    outcome: str | None = None  # proved | exhausted once next_step is summary/done

    def describe(self) -> str:
        coords = ", ".join(f"{k} {v}" for k, v in self.coordinates.items())
        text = f"{self.next_step} pending" if self.next_step != "done" else "run complete"
        if coords:
            text += f" at ({coords})"
        return text


FaultHook = Callable[[str, str], None]


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        tmp = None
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise StorageFull(str(path)) from exc
        raise
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
    _fsync_dir(path.parent)


class RunState:
    """Reads and writes artifacts under one run directory.

    ``fault`` is called as ``fault(point, relpath)`` with point ``content``
    right after the artifact rename and ``marker`` right after the marker
    rename; tests raise from it to simulate a crash.
    """

    def __init__(self, root: str | Path, *, fault: FaultHook | None = None, read_only: bool = False):
        self.root = Path(root)
        self.fault = fault
        self.read_only = read_only
        self._lock = threading.Lock()

    def path(self, rel: str) -> Path:
        return self.root / rel

    def marker(self, rel: str) -> Path:
        p = self.path(rel)
        return p.with_name(p.name + MARKER_SUFFIX)

    def is_complete(self, rel: str) -> bool:
        return self.marker(rel).is_file()

    def read_bytes(self, rel: str) -> bytes:
        if not self.is_complete(rel):
            raise IncompleteArtifact(rel)
        data = self.path(rel).read_bytes()
        expected = self.marker(rel).read_text(encoding="ascii").strip()
        if expected and hashlib.sha256(data).hexdigest() != expected:
            raise CorruptLayout(rel, "content does not match its marker")
        return data

    def read(self, rel: str) -> str:
        return self.read_bytes(rel).decode("utf-8")

    def persist(self, rel: str, content: bytes | str) -> None:
        if self.read_only:
            raise StorageError("run state opened read-only")
        data = content.encode("utf-8") if isinstance(content, str) else content
        target = self.path(rel)
        if self.is_complete(rel):
            raise ArtifactExists(rel)
        target.parent.mkdir(parents=True, exist_ok=True)
        atomic_write(target, data)
        if self.fault:
            self.fault("content", rel)
        atomic_write(self.marker(rel), hashlib.sha256(data).hexdigest().encode("ascii") + b"\n")
        if self.fault:
            self.fault("marker", rel)

    def log_event(self, event: str, **fields) -> None:
        if self.read_only:
            return
        record = {"ts": round(time.time(), 3), "event": event, **fields}
        line = json.dumps(record, sort_keys=False, default=str) + "\n"
        with self._lock:
            self.root.mkdir(parents=True, exist_ok=True)
            with open(self.path(EVENTS_FILE), "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def events(self) -> list[dict]:
        p = self.path(EVENTS_FILE)
        if not p.exists():
            return []
        out = []
        for line in p.read_text(encoding="utf-8").splitlines():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                continue  # torn final line after a crash
        return out

    def sweep_temp_files(self) -> int:
        n = 0
        for p in self.root.rglob(".*.tmp"):
            p.unlink(missing_ok=True)
            n += 1
        return n


_TOP_LEVEL = re.compile(
    r"^(config\.yaml|problem\.md|summary\.md|events\.log|stage0|steering|round_\d{3}|attempt_\d{3}|\.lock)"
    r"(\.done)?$"
)


def check_layout(root: Path) -> None:
    """Raise CorruptLayout for unexpected top-level entries or markers without artifacts."""
    if not (root / "config.yaml.done").is_file():
        raise CorruptLayout("config.yaml", "missing or incomplete")
    if not (root / "problem.md.done").is_file():
        raise CorruptLayout("problem.md", "missing or incomplete")
    for entry in sorted(root.iterdir()):
        name = entry.name
        if name.startswith(".") and name.endswith(".tmp"):
            continue
        if not _TOP_LEVEL.match(name):
            raise CorruptLayout(name, "unexpected entry in run directory")
    for marker in root.rglob("*" + MARKER_SUFFIX):
        artifact = marker.with_name(marker.name[: -len(MARKER_SUFFIX)])
        if not artifact.is_file():
            raise CorruptLayout(str(artifact.relative_to(root)), "marker without artifact")


@contextlib.contextmanager
def run_lock(root: str | Path):
    """Advisory exclusive lock preventing two processes from driving one run."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / LOCK_FILE
    fh = open(path, "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            raise RunLocked(f"{root} is being driven by another process") from None
        fh.write(str(os.getpid()))
        fh.flush()
        yield
    finally:
        with contextlib.suppress(OSError):
            path.unlink()
        fh.close()


def scan_progress(run_dir: str | Path) -> ProgressPoint:
    """Earliest incomplete step, determined from the ``.done`` markers alone."""
    from .orchestrator import probe_progress

    return probe_progress(Path(run_dir))


def resume(run_dir: str | Path, config=None, **kwargs):
    from .orchestrator import resume as _resume

    return _resume(Path(run_dir), config, **kwargs)
