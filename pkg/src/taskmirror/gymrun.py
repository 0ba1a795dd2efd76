"""Run a gym's full test suite under resource limits and parse the logs.

Three execution adapters exist: a container-backed one is intentionally not
implemented here (images are consumed elsewhere); :class:`LocalExecutor`
runs the test command in an isolated temporary checkout with time and
memory limits, which is what offline tests and the bundled toy gym use; and
:class:`ScriptedExecutor` replays canned transcripts for pure unit tests.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

from . import patchkit
from .errors import ParserAnomaly, SanityFailure
from .model import GymSpec, TestStatus

log = logging.getLogger(__name__)

#: Extra seconds allowed past the configured time limit for teardown.
TIMEOUT_GRACE = 5.0


@dataclass(frozen=True)
class RunMeta:
    exit_code: int = 0
    wall_time: float = 0.0
    timed_out: bool = False
    oom: bool = False


@dataclass(frozen=True)
class StatusMap:
    """Per-test statuses observed in one run."""

    statuses: dict = field(default_factory=dict)  # test id -> TestStatus
    run_meta: RunMeta = RunMeta()

    def get(self, test_id: str) -> TestStatus:
        return self.statuses.get(test_id, TestStatus.NONE)

    def abnormal(self) -> bool:
        return self.run_meta.timed_out or self.run_meta.oom


@dataclass(frozen=True)
class ExecutionResult:
    exit_code: int
    transcript: str
    wall_time: float
    timed_out: bool = False
    oom: bool = False


class ExecutionPort(Protocol):
    def run(self, image_ref: str, workdir_tree: dict, command: str,
            time_limit: float, memory_limit: int) -> ExecutionResult: ...


class LocalExecutor:
    """Run commands in a throwaway directory with rlimit/timeout enforcement.

    Each invocation materializes its own working copy, so concurrent calls
    never share state.  The image reference is ignored.
    """

    def run(self, image_ref, workdir_tree, command, time_limit, memory_limit):
        workdir = tempfile.mkdtemp(prefix="gymrun-")
        try:
            for path, content in workdir_tree.items():
                full = os.path.join(workdir, path)
                os.makedirs(os.path.dirname(full) or workdir, exist_ok=True)
                with open(full, "w", encoding="utf-8") as fh:
                    fh.write(content)
            return self._run_command(workdir, command, time_limit, memory_limit)
        finally:
            shutil.rmtree(workdir, ignore_errors=True)

    @staticmethod
    def _run_command(workdir, command, time_limit, memory_limit):
        def limit_resources():
            import resource

            try:
                resource.setrlimit(resource.RLIMIT_AS, (memory_limit, memory_limit))
            except (ValueError, OSError):  # pragma: no cover - platform quirks
                pass

        start = time.monotonic()
        proc = subprocess.Popen(
            command,
            shell=True,
            cwd=workdir,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
            errors="replace",
            preexec_fn=limit_resources,
            start_new_session=True,
        )
        timed_out = False
        try:
            out, _ = proc.communicate(timeout=time_limit)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            out, _ = proc.communicate()
        wall = time.monotonic() - start
        oom = not timed_out and ("MemoryError" in (out or "") or proc.returncode in (-9, 137))
        return ExecutionResult(proc.returncode, out or "", wall, timed_out, oom)


class ScriptedExecutor:
    """Replay canned transcripts keyed by a fingerprint of the working tree.

    ``script`` maps a key (see :meth:`fingerprint`) to an
    :class:`ExecutionResult`; unknown keys raise ``KeyError``.
    """

    def __init__(self, script: dict):
        self.script = script

    @staticmethod
    def fingerprint(tree: dict) -> str:
        import hashlib

        h = hashlib.sha1()
        for path in sorted(tree):
            h.update(path.encode())
            h.update(b"\0")
            h.update(tree[path].encode())
            h.update(b"\0")
        return h.hexdigest()

    def run(self, image_ref, workdir_tree, command, time_limit, memory_limit):
        return self.script[self.fingerprint(workdir_tree)]


# ---------------------------------------------------------------------------
# log parsers
# ---------------------------------------------------------------------------

_PYTEST_VERBOSE_RE = re.compile(
    r"^(?P<id>\S+::\S+)\s+(?P<status>PASSED|FAILED|ERROR|XFAIL|XPASS|SKIPPED)\b"
)
_PYTEST_SUMMARY_RE = re.compile(
    r"^(?P<status>PASSED|FAILED|ERROR|SKIPPED)\s+(?P<id>\S+::\S+)"
)

_PYTEST_STATUS = {
    "PASSED": TestStatus.PASSED,
    "XPASS": TestStatus.PASSED,
    "FAILED": TestStatus.FAILED,
    "ERROR": TestStatus.FAILED,
    "XFAIL": TestStatus.SKIPPED,
    "SKIPPED": TestStatus.SKIPPED,
}


def parse_pytest(raw_log: str) -> dict:
    statuses = {}
    for line in raw_log.splitlines():
        line = line.strip()
        m = _PYTEST_VERBOSE_RE.match(line) or _PYTEST_SUMMARY_RE.match(line)
        if not m:
            continue
        _record(statuses, m.group("id"), _PYTEST_STATUS[m.group("status")])
    return statuses


_CARGO_RE = re.compile(r"^test (?P<id>\S+) \.\.\. (?P<status>ok|FAILED|ignored)")

_CARGO_STATUS = {
    "ok": TestStatus.PASSED,
    "FAILED": TestStatus.FAILED,
    "ignored": TestStatus.SKIPPED,
}


def parse_cargo(raw_log: str) -> dict:
    statuses = {}
    for line in raw_log.splitlines():
        m = _CARGO_RE.match(line.strip())
        if m:
            _record(statuses, m.group("id"), _CARGO_STATUS[m.group("status")])
    return statuses


_GOTEST_RE = re.compile(r"^--- (?P<status>PASS|FAIL|SKIP): (?P<id>\S+)")

_GOTEST_STATUS = {
    "PASS": TestStatus.PASSED,
    "FAIL": TestStatus.FAILED,
    "SKIP": TestStatus.SKIPPED,
}


def parse_gotest(raw_log: str) -> dict:
    statuses = {}
    for line in raw_log.splitlines():
        m = _GOTEST_RE.match(line.strip())
        if m:
            _record(statuses, m.group("id"), _GOTEST_STATUS[m.group("status")])
    return statuses


_JEST_RE = re.compile(r"^(?P<mark>[✓✔✕✗×○])\s+(?P<id>.+?)(?:\s+\(\d+\s*m?s\))?$")

_JEST_STATUS = {
    "✓": TestStatus.PASSED,
    "✔": TestStatus.PASSED,
    "✕": TestStatus.FAILED,
    "✗": TestStatus.FAILED,
    "×": TestStatus.FAILED,
    "○": TestStatus.SKIPPED,
}


def parse_jest(raw_log: str) -> dict:
    statuses = {}
    for line in raw_log.splitlines():
        m = _JEST_RE.match(line.strip())
        if not m:
            continue
        test_id = m.group("id").strip()
        if test_id.startswith("skipped "):
            test_id = test_id[len("skipped "):]
        _record(statuses, test_id, _JEST_STATUS[m.group("mark")])
    return statuses


def _record(statuses, test_id, status):
    if test_id in statuses and statuses[test_id] != status:
        log.warning("duplicate status line for %s; last occurrence wins", test_id)
    statuses[test_id] = status


PARSER_REGISTRY = {
    "pytest": parse_pytest,
    "cargo": parse_cargo,
    "gotest": parse_gotest,
    "jest": parse_jest,
}


def parse_log(parser_id: str, raw_log: str) -> dict:
    """Map framework output to canonical test statuses.

    Raises :class:`ParserAnomaly` when the parser is unknown or when no test
    lines at all could be recognized (empty or foreign-format logs).
    """
    if parser_id not in PARSER_REGISTRY:
        raise ParserAnomaly(f"unknown parser: {parser_id!r}")
    statuses = PARSER_REGISTRY[parser_id](raw_log)
    if not statuses:
        raise ParserAnomaly(f"parser {parser_id!r} recognized no tests")
    return statuses


# ---------------------------------------------------------------------------
# state execution
# ---------------------------------------------------------------------------

def run_state(gym: GymSpec, tree: dict, patches, exec_port: ExecutionPort):
    """Apply ``patches`` in order to ``tree`` and run the full suite once.

    Returns ``(raw_log, StatusMap)``.  Apply conflicts propagate; a run that
    times out or hits the memory limit is recorded, never silently retried.
    """
    work = dict(tree)
    for p in patches:
        work = patchkit.apply_patch(work, p, fuzz=0)
    result = exec_port.run(gym.image_ref, work, gym.test_command,
                           gym.time_limit, gym.memory_limit)
    meta = RunMeta(result.exit_code, result.wall_time, result.timed_out, result.oom)
    statuses = parse_log(gym.log_parser_id, result.transcript)
    return result.transcript, StatusMap(statuses, meta)


@dataclass(frozen=True)
class ThreeLogs:
    run: StatusMap
    test: StatusMap
    fix: StatusMap
    run_log: str = ""
    test_log: str = ""
    fix_log: str = ""


def run_three_logs(gym: GymSpec, tree: dict, task_patch, test_patch, fix_patch,
                   exec_port: ExecutionPort) -> ThreeLogs:
    """Execute the suite in the three canonical patch states.

    State 1 applies the task patch; state 2 the task and test patches; state
    3 all three.  Each state starts from a fresh copy of the base tree.  A
    patch that fails to apply raises :class:`SanityFailure` naming the state.
    """
    states = [
        ("run", (task_patch,)),
        ("test", (task_patch, test_patch)),
        ("fix", (task_patch, test_patch, fix_patch)),
    ]
    logs = {}
    maps = {}
    for name, patches in states:
        try:
            raw, status = run_state(gym, tree, patches, exec_port)
        except (patchkit.ApplyConflict, patchkit.MissingTarget):
            raise SanityFailure(name)
        logs[name] = raw
        maps[name] = status
    return ThreeLogs(maps["run"], maps["test"], maps["fix"],
                     logs["run"], logs["test"], logs["fix"])


def persist_logs(directory, logs: ThreeLogs, manifest: Optional[dict] = None):
    """Write Run.log / Test.log / Fix.log beside a small manifest."""
    import json

    os.makedirs(directory, exist_ok=True)
    for name, content in (("Run.log", logs.run_log), ("Test.log", logs.test_log),
                          ("Fix.log", logs.fix_log)):
        with open(os.path.join(directory, name), "w", encoding="utf-8") as fh:
            fh.write(content)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest or {}, fh, sort_keys=True, indent=2)
        fh.write("\n")
