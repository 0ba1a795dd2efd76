"""Shared domain records and bit-exact JSONL serialization.

All types are immutable values after construction and safe to share between
workers.  Files (JSONL task files, JSON gym registries) are the source of
truth; there is no database layer.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .errors import EncodingError, RecordParseError, SchemaError

COMMIT_RE = re.compile(r"^[0-9a-f]{40}$")

DEFAULT_TIME_LIMIT = 300.0  # seconds, whole suite
DEFAULT_MEMORY_LIMIT = 1024 ** 3  # 1 GiB


class Language(str, Enum):
    PYTHON = "Python"
    RUST = "Rust"
    GO = "Go"
    JAVASCRIPT = "JavaScript"
    OTHER = "Other"


class TestStatus(str, Enum):
    PASSED = "PASSED"
    FAILED = "FAILED"
    SKIPPED = "SKIPPED"
    NONE = "NONE"  # test absent from this run's log


@dataclass(frozen=True)
class GymSpec:
    """Executable environment descriptor for one repository snapshot."""

    gym_id: str
    repo: str  # "owner/name"
    base_commit: str
    language: Language
    image_ref: str
    test_command: str
    log_parser_id: str
    time_limit: float = DEFAULT_TIME_LIMIT
    memory_limit: int = DEFAULT_MEMORY_LIMIT

    def __post_init__(self):
        if not COMMIT_RE.match(self.base_commit):
            raise ValueError(f"base_commit must be 40 hex chars: {self.base_commit!r}")
        if self.time_limit <= 0:
            raise ValueError("time_limit must be positive")
        if self.memory_limit <= 0:
            raise ValueError("memory_limit must be positive")
        from .gymrun import PARSER_REGISTRY  # late import; gymrun imports this module

        if self.log_parser_id not in PARSER_REGISTRY:
            raise ValueError(f"unknown log_parser_id: {self.log_parser_id!r}")

    def to_dict(self) -> dict:
        return {
            "gym_id": self.gym_id,
            "repo": self.repo,
            "base_commit": self.base_commit,
            "language": self.language.value,
            "image_ref": self.image_ref,
            "test_command": self.test_command,
            "log_parser_id": self.log_parser_id,
            "time_limit": self.time_limit,
            "memory_limit": self.memory_limit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GymSpec":
        try:
            return cls(
                gym_id=d["gym_id"],
                repo=d["repo"],
                base_commit=d["base_commit"],
                language=Language(d["language"]),
                image_ref=d["image_ref"],
                test_command=d["test_command"],
                log_parser_id=d["log_parser_id"],
                time_limit=d.get("time_limit", DEFAULT_TIME_LIMIT),
                memory_limit=d.get("memory_limit", DEFAULT_MEMORY_LIMIT),
            )
        except KeyError as exc:
            raise SchemaError(f"gym.{exc.args[0]}")


def load_gym_registry(path) -> list:
    """Read a GymSpec registry file (JSON array)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return [GymSpec.from_dict(d) for d in data]


@dataclass(frozen=True)
class RuleVerdict:
    passed: bool
    reason: str = ""  # first failing rule name when not passed


@dataclass(frozen=True)
class LmVerdict:
    accepted: bool
    reason: str


@dataclass(frozen=True)
class CandidatePR:
    """A mined pull request with linked issues, diff and filter verdicts."""

    source_repo: str
    pr_number: int
    title: str
    body: str
    linked_issue_bodies: tuple = ()
    diff: str = ""
    merged: bool = False
    closed: bool = False
    edits_code_files: bool = False
    rule_verdict: Optional[RuleVerdict] = None
    lm_verdict: Optional[LmVerdict] = None

    def __post_init__(self):
        if self.pr_number <= 0:
            raise ValueError("pr_number must be positive")
        if self.rule_verdict is not None and self.rule_verdict.passed:
            if not (self.merged and self.closed and self.linked_issue_bodies and self.edits_code_files):
                raise ValueError("rule_verdict=Pass contradicts the PR's attributes")

    def to_dict(self) -> dict:
        d = {
            "source_repo": self.source_repo,
            "pr_number": self.pr_number,
            "title": self.title,
            "body": self.body,
            "linked_issue_bodies": list(self.linked_issue_bodies),
            "diff": self.diff,
            "merged": self.merged,
            "closed": self.closed,
            "edits_code_files": self.edits_code_files,
            "rule_verdict": None,
            "lm_verdict": None,
        }
        if self.rule_verdict is not None:
            d["rule_verdict"] = {"passed": self.rule_verdict.passed, "reason": self.rule_verdict.reason}
        if self.lm_verdict is not None:
            d["lm_verdict"] = {"accepted": self.lm_verdict.accepted, "reason": self.lm_verdict.reason}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CandidatePR":
        rule = d.get("rule_verdict")
        lm = d.get("lm_verdict")
        return cls(
            source_repo=d["source_repo"],
            pr_number=d["pr_number"],
            title=d.get("title", ""),
            body=d.get("body", ""),
            linked_issue_bodies=tuple(d.get("linked_issue_bodies", ())),
            diff=d.get("diff", ""),
            merged=d.get("merged", False),
            closed=d.get("closed", False),
            edits_code_files=d.get("edits_code_files", False),
            rule_verdict=RuleVerdict(rule["passed"], rule.get("reason", "")) if rule else None,
            lm_verdict=LmVerdict(lm["accepted"], lm.get("reason", "")) if lm else None,
        )


#: Section headings of the distilled bug pattern, in template order.
ABSTRACT_SECTIONS = (
    "issue_type",
    "core_problem",
    "technical_context",
    "symptom",
    "root_cause_pattern",
    "impact_scope",
)


@dataclass(frozen=True)
class AbstractIssue:
    """Distilled, repo-agnostic description of a source issue.

    Sections that could not be extracted are empty strings and listed in
    ``missing_sections``.
    """

    issue_type: str
    core_problem: str
    technical_context: str
    symptom: str
    root_cause_pattern: str
    impact_scope: str
    raw_markdown: str
    missing_sections: tuple = ()

    def __post_init__(self):
        if not self.raw_markdown:
            raise ValueError("raw_markdown must be nonempty")


@dataclass(frozen=True)
class TaskInstance:
    """A mirrored, verifiable issue-resolving task."""

    instance_id: str
    gym: GymSpec
    problem_statement: str
    task_patch: str
    test_patch: str
    fix_patch: str
    source: Optional[tuple] = None  # (source_repo, pr_number)
    f2p_tests: frozenset = frozenset()
    p2p_tests: frozenset = frozenset()
    created_at: str = "1970-01-01T00:00:00Z"


def make_instance_id(source_repo: str, gym_id: str, seq: int) -> str:
    return f"{source_repo.replace('/', '__')}__{gym_id}-{seq}"


_REQUIRED_FIELDS = (
    "instance_id",
    "base_commit",
    "problem_statement",
    "task_patch",
    "test_patch",
    "fix_patch",
    "gym",
)


def serialize_instance(inst: TaskInstance) -> str:
    """Serialize one TaskInstance to a single JSONL line (no newline)."""
    record = {
        "instance_id": inst.instance_id,
        "base_commit": inst.gym.base_commit,
        "problem_statement": inst.problem_statement,
        "task_patch": inst.task_patch,
        "test_patch": inst.test_patch,
        "fix_patch": inst.fix_patch,
        "gym": inst.gym.to_dict(),
        "source": list(inst.source) if inst.source else None,
        "f2p_tests": sorted(inst.f2p_tests),
        "p2p_tests": sorted(inst.p2p_tests),
        "created_at": inst.created_at,
    }
    line = json.dumps(record, ensure_ascii=False, sort_keys=True)
    try:
        line.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise EncodingError(str(exc))
    return line


def deserialize_instance(line: str) -> TaskInstance:
    """Inverse of :func:`serialize_instance`.  Unknown extra fields are ignored."""
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordParseError(str(exc))
    if not isinstance(record, dict):
        raise RecordParseError("record is not a JSON object")
    for name in _REQUIRED_FIELDS:
        if name not in record:
            raise SchemaError(name)
    source = record.get("source")
    return TaskInstance(
        instance_id=record["instance_id"],
        gym=GymSpec.from_dict(record["gym"]),
        problem_statement=record["problem_statement"],
        task_patch=record["task_patch"],
        test_patch=record["test_patch"],
        fix_patch=record["fix_patch"],
        source=(source[0], source[1]) if source else None,
        f2p_tests=frozenset(record.get("f2p_tests", ())),
        p2p_tests=frozenset(record.get("p2p_tests", ())),
        created_at=record.get("created_at", "1970-01-01T00:00:00Z"),
    )


def serialize_corpus(instances) -> str:
    """Serialize many instances, one line each, sorted by instance_id."""
    ordered = sorted(instances, key=lambda i: i.instance_id)
    return "".join(serialize_instance(i) + "\n" for i in ordered)


def read_corpus(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [deserialize_instance(line) for line in fh if line.strip()]
