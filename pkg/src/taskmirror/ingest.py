"""Phase 1: source and filter mirrorable candidate PRs for each target gym.

The GitHub surface is a small REST-shaped port with two adapters: a live one
that reads its token from ``GH_TOKEN``, and a fixture adapter that replays a
recorded directory so the whole phase runs offline.  Filtering is a pure
rule check followed by an LM-based mirrorability heuristic.
"""

from __future__ import annotations

import ast
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

from .errors import (
    DiffUnavailable,
    EmptyInput,
    LmFormatError,
    RateLimited,
    RepoNotFound,
    TransportError,
)
from .model import CandidatePR, RuleVerdict
from .prompts import load_prompt

log = logging.getLogger(__name__)

#: Maximum characters of diff passed to the LM filter; longer diffs keep
#: head and tail halves around a marker.
DIFF_CHAR_BUDGET = 48_000
TRUNCATION_MARKER = "\n[... truncated ...]\n"

LM_RETRIES = 3

MAX_SEARCH_RESULTS = 20


@dataclass(frozen=True)
class RepoSearchResult:
    repo: str  # "owner/name"
    stars: int
    open_issues: int


@dataclass
class FilterReport:
    total: int = 0
    rule_rejected: int = 0
    lm_rejected: int = 0
    accepted: int = 0
    per_rule_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "rule_rejected": self.rule_rejected,
            "lm_rejected": self.lm_rejected,
            "accepted": self.accepted,
            "per_rule_counts": dict(sorted(self.per_rule_counts.items())),
        }


# ---------------------------------------------------------------------------
# GitHub port
# ---------------------------------------------------------------------------

class GitHubPort(Protocol):
    def search_repositories(self, query: str) -> list: ...
    def list_pull_requests(self, repo: str) -> list: ...
    def get_pr_diff(self, repo: str, number: int) -> str: ...
    def get_issue_body(self, repo: str, number: int) -> str: ...
    def get_cross_referenced_issues(self, repo: str, pr_number: int) -> list: ...


class FixtureGitHub:
    """Record/replay adapter reading a fixture directory.

    Layout: ``repos.json`` (search results), and per repo a directory
    ``owner__name/`` with ``prs.json``, ``issues.json`` and
    ``diffs/<number>.diff``.
    """

    def __init__(self, root: str):
        self.root = root

    def _repo_dir(self, repo: str) -> str:
        return os.path.join(self.root, repo.replace("/", "__"))

    def search_repositories(self, query: str) -> list:
        path = os.path.join(self.root, "repos.json")
        if not os.path.exists(path):
            return []
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def list_pull_requests(self, repo: str) -> list:
        d = self._repo_dir(repo)
        if not os.path.isdir(d):
            raise RepoNotFound(repo)
        path = os.path.join(d, "prs.json")
        if not os.path.exists(path):
            return []
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def get_pr_diff(self, repo: str, number: int) -> str:
        path = os.path.join(self._repo_dir(repo), "diffs", f"{number}.diff")
        if not os.path.exists(path):
            raise DiffUnavailable(number)
        with open(path, encoding="utf-8") as fh:
            return fh.read()

    def get_issue_body(self, repo: str, number: int) -> str:
        path = os.path.join(self._repo_dir(repo), "issues.json")
        if not os.path.exists(path):
            return ""
        with open(path, encoding="utf-8") as fh:
            issues = json.load(fh)
        return issues.get(str(number), "")

    def get_cross_referenced_issues(self, repo: str, pr_number: int) -> list:
        path = os.path.join(self._repo_dir(repo), "xrefs.json")
        if not os.path.exists(path):
            return []
        with open(path, encoding="utf-8") as fh:
            xrefs = json.load(fh)
        return xrefs.get(str(pr_number), [])


class TokenBucket:
    """Simple thread-safe token bucket shared by ingest workers."""

    def __init__(self, rate_per_sec: float, capacity: int = 10):
        self.rate = rate_per_sec
        self.capacity = capacity
        self.tokens = float(capacity)
        self.updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            time.sleep(wait)


class LiveGitHub:
    """Thin REST adapter.  Token comes from the GH_TOKEN environment variable."""

    API = "https://api.github.com"

    def __init__(self, token: Optional[str] = None, bucket: Optional[TokenBucket] = None):
        self.token = token if token is not None else os.environ.get("GH_TOKEN", "")
        self.bucket = bucket

    def _headers(self, accept="application/vnd.github+json"):
        headers = {"Accept": accept}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def _get(self, url, accept="application/vnd.github+json", params=None):
        import requests

        if self.bucket:
            self.bucket.acquire()
        try:
            resp = requests.get(url, headers=self._headers(accept), params=params, timeout=30)
        except requests.RequestException as exc:
            raise TransportError(str(exc))
        if resp.status_code == 404:
            raise RepoNotFound(url)
        if resp.status_code == 403 and resp.headers.get("X-RateLimit-Remaining") == "0":
            reset = float(resp.headers.get("X-RateLimit-Reset", time.time() + 60))
            raise RateLimited(max(0.0, reset - time.time()))
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code} for {url}")
        return resp

    def _paginate(self, url, params=None):
        params = dict(params or {})
        params.setdefault("per_page", 100)
        while url:
            resp = self._get(url, params=params)
            yield from resp.json() if isinstance(resp.json(), list) else resp.json().get("items", [])
            url = resp.links.get("next", {}).get("url")
            params = None  # the next link already carries the query

    def search_repositories(self, query: str) -> list:
        resp = self._get(f"{self.API}/search/repositories",
                         params={"q": query, "sort": "stars", "order": "desc", "per_page": 50})
        return [
            {
                "full_name": item["full_name"],
                "stargazers_count": item["stargazers_count"],
                "open_issues_count": item.get("open_issues_count", 0),
            }
            for item in resp.json().get("items", [])
        ]

    def list_pull_requests(self, repo: str) -> list:
        out = []
        for item in self._paginate(f"{self.API}/repos/{repo}/pulls", {"state": "closed"}):
            out.append({
                "number": item["number"],
                "title": item.get("title", ""),
                "body": item.get("body") or "",
                "merged": item.get("merged_at") is not None,
                "closed": item.get("state") == "closed",
            })
        return out

    def get_pr_diff(self, repo: str, number: int) -> str:
        try:
            resp = self._get(f"{self.API}/repos/{repo}/pulls/{number}",
                             accept="application/vnd.github.v3.diff")
        except RepoNotFound:
            raise DiffUnavailable(number)
        return resp.text

    def get_issue_body(self, repo: str, number: int) -> str:
        resp = self._get(f"{self.API}/repos/{repo}/issues/{number}")
        return resp.json().get("body") or ""

    def get_cross_referenced_issues(self, repo: str, pr_number: int) -> list:
        numbers = []
        for ev in self._paginate(f"{self.API}/repos/{repo}/issues/{pr_number}/timeline"):
            if ev.get("event") == "cross-referenced":
                src = ev.get("source", {}).get("issue", {})
                if src.get("number"):
                    numbers.append(src["number"])
        return numbers


# ---------------------------------------------------------------------------
# keyword generation and repo search
# ---------------------------------------------------------------------------

def _parse_keyword_response(text: str) -> list:
    from .patchkit import _fenced_blocks

    for block in _fenced_blocks(text):
        try:
            value = ast.literal_eval(block.strip())
        except (ValueError, SyntaxError):
            continue
        if isinstance(value, (list, tuple)):
            return [str(k) for k in value]
    # fall back to one-per-line / comma-separated output
    parts = re.split(r"[,\n]", text)
    cleaned = []
    for part in parts:
        word = part.strip().strip("-*•").strip().strip("\"'")
        word = re.sub(r"^\d+[.)]\s*", "", word)
        if word:
            cleaned.append(word)
    return cleaned


def generate_keywords(readme: str, lm, retries: int = LM_RETRIES) -> list:
    """Ask the LM for five descriptive keywords for a repository README."""
    if not readme:
        raise ValueError("readme must be nonempty")
    prompt = load_prompt("keywords").format(readme=readme)
    last = ""
    for _ in range(retries):
        last = lm.complete(prompt)
        words = []
        for w in _parse_keyword_response(last):
            if w and w not in words:
                words.append(w)
        if len(words) >= 5:
            return words[:5]
    raise LmFormatError(f"no 5 keywords parseable from LM output: {last[:200]!r}")


def search_repos(keywords, gh: GitHubPort) -> list:
    """Search repositories with the keywords as one query expression.

    Returns at most 20 distinct repos sorted by stars desc, open issues
    desc, then name.
    """
    if not 1 <= len(keywords) <= 5:
        raise ValueError("expected 1-5 keywords")
    query = " ".join(keywords)
    seen = set()
    results = []
    for item in gh.search_repositories(query):
        name = item["full_name"]
        if name in seen:
            continue
        seen.add(name)
        results.append(RepoSearchResult(name, item["stargazers_count"],
                                        item.get("open_issues_count", 0)))
    results.sort(key=lambda r: (-r.stars, -r.open_issues, r.repo))
    return results[:MAX_SEARCH_RESULTS]


# ---------------------------------------------------------------------------
# PR collection
# ---------------------------------------------------------------------------

_CLOSING_KEYWORD_RE = re.compile(
    r"\b(?:fix(?:es|ed)?|close[sd]?|resolve[sd]?)\s*:?\s+#(\d+)", re.IGNORECASE
)

#: Extensions considered code, per dataset language plus common neighbors.
CODE_EXTENSIONS = {
    ".py", ".pyx", ".pyi",
    ".rs",
    ".go",
    ".js", ".jsx", ".ts", ".tsx", ".mjs", ".cjs",
    ".c", ".h", ".cc", ".cpp", ".hpp", ".java", ".rb", ".php", ".cs",
    ".swift", ".kt", ".scala",
}

_NON_CODE_PATH_RE = re.compile(
    r"(^|/)(docs?|documentation|examples?)/"
    r"|(^|/)\.(github|circleci|gitlab)/"
    r"|\.(md|rst|txt|adoc)$"
    r"|(^|/)(LICENSE|NOTICE|CHANGELOG|AUTHORS|CODEOWNERS)"
    r"|(^|/)(package-lock\.json|yarn\.lock|Cargo\.lock|go\.sum|poetry\.lock|Pipfile\.lock)$"
    r"|\.(yml|yaml|toml|cfg|ini|lock)$",
    re.IGNORECASE,
)

_DIFF_PATH_RE = re.compile(r"^\+\+\+ (?:b/)?(\S+)", re.MULTILINE)


def diff_edits_code_files(diff: str) -> bool:
    """True when at least one changed path looks like a code file."""
    for path in _DIFF_PATH_RE.findall(diff or ""):
        if path == "/dev/null":
            continue
        if _NON_CODE_PATH_RE.search(path):
            continue
        if os.path.splitext(path)[1].lower() in CODE_EXTENSIONS:
            return True
    return False


def linked_issue_numbers(body: str) -> list:
    return sorted({int(n) for n in _CLOSING_KEYWORD_RE.findall(body or "")})


def rule_filter(pr: CandidatePR) -> RuleVerdict:
    """The three hand-written collection rules.

    A PR passes iff it is merged and closed, has at least one linked issue,
    and edits code files.  PRs are deliberately not required to modify test
    files; tests are generated separately downstream.
    """
    if not pr.merged:
        return RuleVerdict(False, "merged")
    if not pr.closed:
        return RuleVerdict(False, "closed")
    if not pr.linked_issue_bodies:
        return RuleVerdict(False, "linked_issues")
    if not pr.edits_code_files:
        return RuleVerdict(False, "edits_code_files")
    return RuleVerdict(True)


def collect_prs(repo: str, gh: GitHubPort) -> list:
    """Collect every PR of ``repo`` with its diff and linked-issue bodies."""
    candidates = []
    for item in gh.list_pull_requests(repo):
        number = item["number"]
        diff = gh.get_pr_diff(repo, number)
        issue_numbers = set(linked_issue_numbers(item.get("body", "")))
        issue_numbers.update(gh.get_cross_referenced_issues(repo, number))
        bodies = tuple(
            body for n in sorted(issue_numbers)
            if (body := gh.get_issue_body(repo, n))
        )
        pr = CandidatePR(
            source_repo=repo,
            pr_number=number,
            title=item.get("title", ""),
            body=item.get("body", ""),
            linked_issue_bodies=bodies,
            diff=diff,
            merged=item.get("merged", False),
            closed=item.get("closed", False),
            edits_code_files=diff_edits_code_files(diff),
        )
        pr = replace_rule_verdict(pr)
        candidates.append(pr)
    candidates.sort(key=lambda c: c.pr_number)
    return candidates


def replace_rule_verdict(pr: CandidatePR) -> CandidatePR:
    from dataclasses import replace

    return replace(pr, rule_verdict=rule_filter(replace(pr, rule_verdict=None)))


# ---------------------------------------------------------------------------
# LM filter
# ---------------------------------------------------------------------------

def truncate_diff(diff: str, budget: int = DIFF_CHAR_BUDGET) -> str:
    if len(diff) <= budget:
        return diff
    half = (budget - len(TRUNCATION_MARKER)) // 2
    return diff[:half] + TRUNCATION_MARKER + diff[-half:]


def _parse_filter_response(text: str):
    from .patchkit import _fenced_blocks

    for block in _fenced_blocks(text):
        try:
            value = ast.literal_eval(block.strip())
        except (ValueError, SyntaxError):
            continue
        if (isinstance(value, (list, tuple)) and len(value) == 2
                and isinstance(value[0], bool)):
            return bool(value[0]), str(value[1])
    return None


def lm_filter(pr: CandidatePR, target_readme: str, target_test_suite_listing: str,
              lm, retries: int = LM_RETRIES):
    """LM-based mirrorability heuristic for rule-passed PRs.

    Returns ``(accepted, reason)`` parsed from a two-element python list in
    a fenced code block.
    """
    if pr.rule_verdict is None or not pr.rule_verdict.passed:
        raise ValueError("lm_filter must only run on rule-passed PRs")
    prompt = load_prompt("filter").format(
        body=pr.body,
        diff=truncate_diff(pr.diff),
        readme=target_readme,
        test_suite=target_test_suite_listing,
    )
    last = ""
    for _ in range(retries):
        last = lm.complete(prompt)
        parsed = _parse_filter_response(last)
        if parsed is not None:
            return parsed
    raise LmFormatError(f"unparseable filter response: {last[:200]!r}")


# ---------------------------------------------------------------------------
# filter evaluation harness
# ---------------------------------------------------------------------------

@dataclass
class FilterEvaluation:
    report: FilterReport
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float  # NaN when undefined
    recall: float

    def to_dict(self) -> dict:
        return {
            "report": self.report.to_dict(),
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "precision_pct": None if math.isnan(self.precision) else round(self.precision * 1000) / 10,
            "recall_pct": None if math.isnan(self.recall) else round(self.recall * 1000) / 10,
        }

    def render(self) -> str:
        def pct(x):
            return "NaN" if math.isnan(x) else f"{x * 100:.1f}%"

        return (
            f"total={self.report.total} accepted={self.report.accepted} "
            f"rule_rejected={self.report.rule_rejected} lm_rejected={self.report.lm_rejected}\n"
            f"TP={self.tp} FP={self.fp} TN={self.tn} FN={self.fn}\n"
            f"precision={pct(self.precision)} recall={pct(self.recall)}"
        )


def evaluate_filter(labeled, lm, target_readme: str = "",
                    target_test_suite_listing: str = "") -> FilterEvaluation:
    """Run the filter over a labeled set and compute precision/recall.

    ``labeled`` is a sequence of ``(CandidatePR, bool)`` where the bool is
    the human judgment.  Precision is NaN when nothing was accepted.
    """
    labeled = list(labeled)
    if not labeled:
        raise EmptyInput("labeled set is empty")
    report = FilterReport(total=len(labeled))
    tp = fp = tn = fn = 0
    for pr, label in labeled:
        if pr.rule_verdict is not None and not pr.rule_verdict.passed:
            report.rule_rejected += 1
            reason = pr.rule_verdict.reason
            report.per_rule_counts[reason] = report.per_rule_counts.get(reason, 0) + 1
            predicted = False
        else:
            accepted, _ = lm_filter(pr, target_readme, target_test_suite_listing, lm)
            predicted = accepted
            if accepted:
                report.accepted += 1
            else:
                report.lm_rejected += 1
        if predicted and label:
            tp += 1
        elif predicted and not label:
            fp += 1
        elif not predicted and label:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if (tp + fp) else float("nan")
    recall = tp / (tp + fn) if (tp + fn) else float("nan")
    return FilterEvaluation(report, tp, fp, tn, fn, precision, recall)
