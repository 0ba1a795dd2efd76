"""Transition classification and the four acceptance rules.

Given the per-test statuses of the three canonical runs (task patch only;
task + test patches; all three patches), every test contributes one
transition triple.  The rule engine is a pure, order-insensitive function
over those triples:

1. Effective tests: every (run, test) pair must be one of
   (PASSED, PASSED), (FAILED, FAILED), (SKIPPED, SKIPPED), (NONE, FAILED).
2. Effective fix: at least one test goes FAILED -> PASSED between the test
   and fix states.
3. No regressions: (PASSED, PASSED, FAILED) and (SKIPPED, SKIPPED, FAILED)
   are forbidden.
4. Unambiguous behavior: anything outside the closed allow-set implied by
   the first three rules makes the whole attempt ambiguous, as does a timed
   out or out-of-memory state.

When several rules are violated, the lowest-numbered rule is reported.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from . import patchkit
from .errors import SanityFailure
from .gymrun import StatusMap
from .model import TestStatus

P = TestStatus.PASSED
F = TestStatus.FAILED
S = TestStatus.SKIPPED
N = TestStatus.NONE

#: Permitted (run, test) pairs under rule 1.
RULE1_PAIRS = {(P, P), (F, F), (S, S), (N, F)}

#: Forbidden full triples under rule 3.
RULE3_TRIPLES = {(P, P, F), (S, S, F)}

#: (test, fix) pairs considered normal under rule 4.
RULE4_TEST_FIX_PAIRS = {(P, P), (F, P), (F, F), (S, S)}


@dataclass(frozen=True)
class TransitionTriple:
    test_id: str
    s_run: TestStatus
    s_test: TestStatus
    s_fix: TestStatus

    @property
    def statuses(self):
        return (self.s_run, self.s_test, self.s_fix)


class Outcome(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    AMBIGUOUS = "ambiguous"


class FailureCategory(str, Enum):
    COMPILE_SYNTAX = "compile_syntax"
    SEMANTIC = "semantic"


@dataclass(frozen=True)
class Verdict:
    outcome: Outcome
    rule: Optional[int] = None  # violated rule for rejections
    details: str = ""
    f2p_tests: frozenset = frozenset()
    p2p_tests: frozenset = frozenset()
    preexisting_f2p: frozenset = frozenset()  # f2p tests already failing pre test-patch

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "rule": self.rule,
            "details": self.details,
            "f2p_tests": sorted(self.f2p_tests),
            "p2p_tests": sorted(self.p2p_tests),
            "preexisting_f2p": sorted(self.preexisting_f2p),
        }


def sanity_check(tree_at_base: dict, task_patch, test_patch, fix_patch):
    """Check that the patch triple applies in the canonical order.

    The task patch must apply to the base tree; the test and fix patches
    must each apply on top of the task patch.  Raises
    :class:`SanityFailure` naming the first failing stage.
    """
    import logging

    if task_patch.is_empty():
        logging.getLogger(__name__).warning("empty task_patch in sanity check")
    try:
        after_task = patchkit.apply_patch(tree_at_base, task_patch, fuzz=0)
    except (patchkit.ApplyConflict, patchkit.MissingTarget):
        raise SanityFailure("task")
    try:
        patchkit.apply_patch(after_task, test_patch, fuzz=0)
    except (patchkit.ApplyConflict, patchkit.MissingTarget):
        raise SanityFailure("test")
    try:
        patchkit.apply_patch(after_task, fix_patch, fuzz=0)
    except (patchkit.ApplyConflict, patchkit.MissingTarget):
        raise SanityFailure("fix")


def classify_transitions(run: StatusMap, test: StatusMap, fix: StatusMap):
    """Build the transition triple for every test id seen in any run."""
    ids = set(run.statuses) | set(test.statuses) | set(fix.statuses)
    return [TransitionTriple(i, run.get(i), test.get(i), fix.get(i)) for i in sorted(ids)]


def apply_rules(triples) -> Verdict:
    """Classify a multiset of transition triples into a verdict."""
    if not triples:
        return Verdict(Outcome.AMBIGUOUS, details="no test transitions observed")

    rule1_bad = [t for t in triples if (t.s_run, t.s_test) not in RULE1_PAIRS]
    if rule1_bad:
        return Verdict(Outcome.REJECTED, rule=1,
                       details=_offenders("run->test pair not permitted", rule1_bad))

    if not any(t.s_test == F and t.s_fix == P for t in triples):
        return Verdict(Outcome.REJECTED, rule=2, details="no FAILED->PASSED test under the fix")

    rule3_bad = [t for t in triples if t.statuses in RULE3_TRIPLES]
    if rule3_bad:
        return Verdict(Outcome.REJECTED, rule=3,
                       details=_offenders("fix introduced a regression", rule3_bad))

    abnormal = [t for t in triples if (t.s_test, t.s_fix) not in RULE4_TEST_FIX_PAIRS]
    if abnormal:
        return Verdict(Outcome.AMBIGUOUS,
                       details=_offenders("abnormal transition", abnormal))

    f2p = frozenset(t.test_id for t in triples if (t.s_test, t.s_fix) == (F, P))
    p2p = frozenset(t.test_id for t in triples if t.statuses == (P, P, P))
    preexisting = frozenset(t.test_id for t in triples
                            if (t.s_test, t.s_fix) == (F, P) and t.s_run != N)
    return Verdict(Outcome.ACCEPTED, f2p_tests=f2p, p2p_tests=p2p,
                   preexisting_f2p=preexisting)


def _offenders(message, triples):
    shown = ", ".join(
        f"{t.test_id}:({t.s_run.value},{t.s_test.value},{t.s_fix.value})"
        for t in triples[:5]
    )
    more = f" (+{len(triples) - 5} more)" if len(triples) > 5 else ""
    return f"{message}: {shown}{more}"


def evaluate_attempt(run: StatusMap, test: StatusMap, fix: StatusMap) -> Verdict:
    """Full verdict for one attempt, including the abnormal-run guard.

    A timed-out or out-of-memory state makes the attempt ambiguous no matter
    what the parsed statuses say.
    """
    for name, m in (("run", run), ("test", test), ("fix", fix)):
        if m.abnormal():
            kind = "timeout" if m.run_meta.timed_out else "oom"
            return Verdict(Outcome.AMBIGUOUS, details=f"{kind} in {name} state")
    return apply_rules(classify_transitions(run, test, fix))


# ---------------------------------------------------------------------------
# failure categorization
# ---------------------------------------------------------------------------

_BUILD_FAILURE_RE = re.compile(
    "|".join([
        r"SyntaxError",
        r"IndentationError",
        r"ImportError: cannot import",
        r"ModuleNotFoundError",
        r"error\[E\d+\]",
        r"error: could not compile",
        r"cannot find package",
        r"undefined: \w+",
        r"syntax error:",
        r"# command-line-arguments",
        r"build failed",
        r"failed to compile",
        r"Cannot find module",
        r"Parse error",
        r"collection errors?",
    ])
)


def categorize_failure(raw_logs, status_maps) -> FailureCategory:
    """Split non-accepted attempts into compile/syntax vs semantic failures.

    Compile/syntax means a state where no tests could be run at all: its log
    carries a build-failure signature or the parser extracted zero tests.
    Every other failure (tests ran, fail-to-pass contract unmet) is
    semantic.
    """
    for raw, statuses in zip(raw_logs, status_maps):
        if statuses is None or not getattr(statuses, "statuses", statuses):
            return FailureCategory.COMPILE_SYNTAX
        if _BUILD_FAILURE_RE.search(raw or ""):
            return FailureCategory.COMPILE_SYNTAX
    return FailureCategory.SEMANTIC
