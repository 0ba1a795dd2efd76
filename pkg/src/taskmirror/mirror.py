"""Phase 2: distill an abstract issue and drive the mirroring workflow.

Both generation agents are plain two-call workflows (localize, then patch
generation in search/replace format); there is no multi-turn tool use here.
Downstream prompts never see the raw source diff, only the distilled
abstract description, because repo-specific identifiers mislead the model.
"""

from __future__ import annotations

import ast
import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Protocol

from . import patchkit
from .errors import (
    EmptyEdit,
    GymUnavailable,
    LmFormatError,
    LocalizationEmpty,
    PipelineError,
    SourceScopeViolation,
    StatementUnanchored,
    TestLeakage,
    TestScopeViolation,
)
from .model import ABSTRACT_SECTIONS, AbstractIssue, CandidatePR, GymSpec, Language
from .prompts import load_fewshot_statements, load_prompt

log = logging.getLogger(__name__)

DEFAULT_LOCALIZE_N = 5
DEFAULT_SAMPLES_K = 3
DEFAULT_TEMPERATURE = 1.0

#: Per-file character budget when packing file contents into prompts;
#: overlong files are cut from the middle so both ends survive.
FILE_CHAR_BUDGET = 20_000


class LanguageModelPort(Protocol):
    max_context_chars: int

    def complete(self, prompt: str, temperature: float = 0.0,
                 seed: Optional[int] = None) -> str: ...


class ScriptedLm:
    """Deterministic mock: first rule whose ``match`` substring occurs in
    the prompt wins.  ``rules`` is a list of ``{"match":…, "response":…}``."""

    max_context_chars = 1_000_000

    def __init__(self, rules):
        self.rules = list(rules)

    @classmethod
    def from_file(cls, path):
        import json

        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def complete(self, prompt, temperature=0.0, seed=None):
        for rule in self.rules:
            if rule["match"] in prompt:
                return rule["response"]
        raise KeyError(f"no scripted response matches prompt: {prompt[:120]!r}")


class QueueLm:
    """Mock that returns canned responses in order; used for retry tests."""

    max_context_chars = 1_000_000

    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    def complete(self, prompt, temperature=0.0, seed=None):
        self.calls += 1
        return self.responses.pop(0)


class HttpLm:
    """OpenAI-compatible chat-completions adapter.

    Endpoint and key come from LM_BASE_URL / LM_API_KEY unless given.
    """

    max_context_chars = 400_000

    def __init__(self, base_url=None, api_key=None, model="default"):
        import os

        self.base_url = (base_url or os.environ.get("LM_BASE_URL", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("LM_API_KEY", "")
        self.model = model

    def complete(self, prompt, temperature=0.0, seed=None):
        import requests

        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        if seed is not None:
            payload["seed"] = seed
        resp = requests.post(
            f"{self.base_url}/chat/completions",
            json=payload,
            headers={"Authorization": f"Bearer {self.api_key}"},
            timeout=300,
        )
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]


# ---------------------------------------------------------------------------
# repository structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FileEntry:
    path: str
    is_test: bool
    symbols: tuple = ()  # (name, start_line, end_line)


@dataclass(frozen=True)
class RepoStructure:
    entries: tuple = ()

    def paths(self) -> set:
        return {e.path for e in self.entries}

    def test_paths(self) -> set:
        return {e.path for e in self.entries if e.is_test}


_TEST_DIR_PARTS = {"tests", "test", "__tests__", "testing", "spec"}


def is_test_file(path: str, language: Language, overrides=()) -> bool:
    """Path-heuristic test classifier with a gym-provided override list.

    Overrides win because pure path rules are insufficient for languages
    that co-locate tests with sources.
    """
    if path in overrides:
        return True
    parts = path.split("/")
    if any(p.lower() in _TEST_DIR_PARTS for p in parts[:-1]):
        return True
    name = parts[-1].lower()
    stem, _, ext = name.rpartition(".")
    if not stem:
        stem = name
    if stem.startswith("test_") or stem.endswith("_test") or stem.endswith("_tests"):
        return True
    if name.endswith((".test.js", ".spec.js", ".test.ts", ".spec.ts",
                      ".test.jsx", ".spec.jsx")):
        return True
    return False


_SYMBOL_RES = {
    Language.PYTHON: re.compile(r"^\s*(?:def|class)\s+(\w+)"),
    Language.RUST: re.compile(r"^\s*(?:pub(?:\([^)]*\))?\s+)?(?:fn|struct|enum|trait)\s+(\w+)"),
    Language.GO: re.compile(r"^func\s+(?:\([^)]*\)\s*)?(\w+)|^type\s+(\w+)"),
    Language.JAVASCRIPT: re.compile(
        r"^\s*(?:export\s+)?(?:function\s+(\w+)|class\s+(\w+)"
        r"|(?:const|let|var)\s+(\w+)\s*=\s*(?:async\s*)?(?:function|\())"
    ),
}


def outline_symbols(content: str, language: Language):
    rx = _SYMBOL_RES.get(language)
    if rx is None:
        return ()
    hits = []
    for i, line in enumerate(content.split("\n"), start=1):
        m = rx.match(line)
        if m:
            name = next(g for g in m.groups() if g)
            hits.append((name, i))
    total = content.count("\n") + 1
    out = []
    for j, (name, start) in enumerate(hits):
        end = hits[j + 1][1] - 1 if j + 1 < len(hits) else total
        out.append((name, start, end))
    return tuple(out)


def build_structure(tree: dict, language: Language, test_overrides=()) -> RepoStructure:
    entries = tuple(
        FileEntry(path, is_test_file(path, language, test_overrides),
                  outline_symbols(tree[path], language))
        for path in sorted(tree)
    )
    return RepoStructure(entries)


def render_structure(structure: RepoStructure) -> str:
    """Indented path listing with per-file symbol outlines."""
    lines = []
    for entry in structure.entries:
        lines.append(entry.path)
        for name, start, end in entry.symbols:
            lines.append(f"    {name} ({start}-{end})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# mirror attempt record
# ---------------------------------------------------------------------------

class Stage(str, Enum):
    DISTILLED = "distilled"
    TESTED = "tested"
    MIRRORED = "mirrored"
    STATED = "stated"


@dataclass(frozen=True)
class MirrorAttempt:
    candidate: CandidatePR
    gym: GymSpec
    sampling_index: int
    abstract: Optional[AbstractIssue] = None
    test_patch: Optional[patchkit.Patch] = None
    task_patch: Optional[patchkit.Patch] = None
    fix_patch: Optional[patchkit.Patch] = None
    problem_statement: Optional[str] = None
    stage_reached: Optional[Stage] = None
    error: Optional[str] = None


# ---------------------------------------------------------------------------
# stage 0: distillation
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(
    r"\*\*(?P<name>[^*]+)\*\*:?\s*(?P<body>.*?)(?=\n\s*\*\*|\Z)", re.DOTALL
)

_SECTION_KEYS = {
    "issue type": "issue_type",
    "core problem": "core_problem",
    "technical context": "technical_context",
    "symptom": "symptom",
    "root cause pattern": "root_cause_pattern",
    "impact scope": "impact_scope",
}


def parse_abstract_markdown(markdown: str) -> AbstractIssue:
    """Lenient section parser: absent headings are recorded as missing."""
    found = {}
    for m in _SECTION_RE.finditer(markdown):
        key = _SECTION_KEYS.get(m.group("name").strip().lower())
        if key:
            found[key] = m.group("body").strip()
    missing = tuple(k for k in ABSTRACT_SECTIONS if k not in found)
    return AbstractIssue(
        issue_type=found.get("issue_type", ""),
        core_problem=found.get("core_problem", ""),
        technical_context=found.get("technical_context", ""),
        symptom=found.get("symptom", ""),
        root_cause_pattern=found.get("root_cause_pattern", ""),
        impact_scope=found.get("impact_scope", ""),
        raw_markdown=markdown,
        missing_sections=missing,
    )


def _candidate_issue_text(pr: CandidatePR) -> str:
    # PR body concatenated with the linked issue bodies
    return "\n\n".join([pr.body, *pr.linked_issue_bodies]).strip()


def distill(pr: CandidatePR, lm: LanguageModelPort, temperature: float = 0.0,
            seed: Optional[int] = None) -> AbstractIssue:
    """Distill a source PR into a repo-agnostic abstract bug pattern."""
    prompt = load_prompt("abstract").format(
        body=_candidate_issue_text(pr),
        diff=pr.diff,
    )
    response = lm.complete(prompt, temperature=temperature, seed=seed)
    blocks = patchkit._fenced_blocks(response)
    if not blocks:
        raise LmFormatError("distillation response has no fenced markdown block")
    markdown = max(blocks, key=len).strip()
    if not markdown:
        raise LmFormatError("distillation response block is empty")
    return parse_abstract_markdown(markdown)


# ---------------------------------------------------------------------------
# stage 1: test agent
# ---------------------------------------------------------------------------

def _parse_python_block(response: str):
    for block in patchkit._fenced_blocks(response):
        try:
            return ast.literal_eval(block.strip())
        except (ValueError, SyntaxError):
            continue
    return None


def _keep_existing(paths, structure: RepoStructure, n: int, label: str):
    known = structure.paths()
    kept = []
    for p in paths:
        if p in known:
            if p not in kept:
                kept.append(p)
        else:
            log.warning("dropping hallucinated %s path: %s", label, p)
    return kept[:n]


def test_localize(abstract: AbstractIssue, structure: RepoStructure, n: int,
                  lm: LanguageModelPort, temperature: float = 0.0,
                  seed: Optional[int] = None):
    """Ask the test agent for candidate source and test files (at most n each)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    prompt = load_prompt("test_localize").format(
        issue=abstract.raw_markdown,
        structure=render_structure(structure),
        n=n,
    )
    response = lm.complete(prompt, temperature=temperature, seed=seed)
    parsed = _parse_python_block(response)
    if not isinstance(parsed, dict) or "source_files" not in parsed or "test_files" not in parsed:
        raise LmFormatError("localization response is not a source/test dict")
    source = _keep_existing(list(parsed["source_files"]), structure, n, "source")
    tests = _keep_existing(list(parsed["test_files"]), structure, n, "test")
    if not source and not tests:
        raise LocalizationEmpty("every localized path was hallucinated")
    return source, tests


def _pack_file(path: str, content: str, budget: int = FILE_CHAR_BUDGET) -> str:
    if len(content) > budget:
        half = budget // 2
        content = content[:half] + "\n[... middle truncated ...]\n" + content[-half:]
    return f"[start of {path}]\n{content}\n[end of {path}]"


def _pack_files(tree: dict, paths) -> str:
    return "\n\n".join(_pack_file(p, tree[p]) for p in paths if p in tree)


def gen_test_patch(abstract: AbstractIssue, tree: dict, source_files, test_files,
                   lm: LanguageModelPort, language: Language, test_overrides=(),
                   temperature: float = 0.0, seed: Optional[int] = None) -> patchkit.Patch:
    """Generate the hidden-test patch via search/replace edits.

    All edits must land in test files; one out-of-scope edit rejects the
    whole attempt.
    """
    if not source_files and not test_files:
        raise LocalizationEmpty("no localized files to work from")
    prompt = load_prompt("test_patchgen").format(
        issue=abstract.raw_markdown,
        source_files=_pack_files(tree, source_files),
        test_files=_pack_files(tree, test_files),
        diff_example=load_prompt("sr_example").rstrip("\n"),
    )
    response = lm.complete(prompt, temperature=temperature, seed=seed)
    edits = patchkit.parse_sr_blocks(response)
    if not edits:
        raise EmptyEdit("test agent produced no edits")
    for edit in edits:
        if not is_test_file(edit.file_path, language, test_overrides):
            raise TestScopeViolation(edit.file_path)
    return patchkit.edits_to_patch(tree, edits)


# ---------------------------------------------------------------------------
# stage 2: mirror agent
# ---------------------------------------------------------------------------

_TEST_ID_RES = {
    Language.PYTHON: re.compile(r"^\s*def\s+(test_\w+)"),
    Language.RUST: re.compile(r"^\s*(?:pub\s+)?fn\s+(test_\w+|\w+_test)"),
    Language.GO: re.compile(r"^func\s+(Test\w+)"),
    Language.JAVASCRIPT: re.compile(r"""^\s*(?:it|test)\(\s*['"](.+?)['"]"""),
}


def extract_test_identifiers(test_patch: patchkit.Patch, language: Language) -> list:
    """Test names introduced by added lines of the test patch."""
    rx = _TEST_ID_RES.get(language)
    if rx is None:
        return []
    names = []
    for fp in test_patch.files:
        for h in fp.hunks:
            for hl in h.lines:
                if hl.tag != patchkit.TAG_ADD:
                    continue
                m = rx.match(hl.text)
                if m and m.group(1) not in names:
                    names.append(m.group(1))
    return names


def mirror_localize(abstract: AbstractIssue, structure: RepoStructure,
                    test_patch: patchkit.Patch, n: int, lm: LanguageModelPort,
                    temperature: float = 0.0, seed: Optional[int] = None):
    prompt = load_prompt("mirror_localize").format(
        issue=abstract.raw_markdown,
        structure=render_structure(structure),
        testgen_patch=patchkit.render_patch(test_patch),
        n=n,
    )
    response = lm.complete(prompt, temperature=temperature, seed=seed)
    parsed = _parse_python_block(response)
    if not isinstance(parsed, list):
        raise LmFormatError("mirror localization response is not a list")
    kept = _keep_existing([str(p) for p in parsed], structure, n, "mirror")
    if not kept:
        raise LocalizationEmpty("every mirror-localized path was hallucinated")
    return kept


def gen_task_patch(abstract: AbstractIssue, test_patch: patchkit.Patch, tree: dict,
                   localized_files, lm: LanguageModelPort, language: Language,
                   test_overrides=(), temperature: float = 0.0,
                   seed: Optional[int] = None):
    """Generate the bug-introducing patch and its inverse fix patch.

    The test patch's file paths and test names act as a structural prior in
    the prompt.  Comments are stripped from the result before inversion, so
    the fix patch is exactly the inverse of the shipped task patch.
    """
    tests = extract_test_identifiers(test_patch, language)
    prompt = load_prompt("mirror_patchgen").format(
        issue=abstract.raw_markdown,
        files=_pack_files(tree, localized_files),
        testgen_patch=patchkit.render_patch(test_patch),
        tests="\n".join(tests) if tests else "(none extracted)",
        diff_example=load_prompt("sr_example").rstrip("\n"),
    )
    response = lm.complete(prompt, temperature=temperature, seed=seed)
    edits = patchkit.parse_sr_blocks(response)
    if not edits:
        raise EmptyEdit("mirror agent produced no edits")
    for edit in edits:
        if is_test_file(edit.file_path, language, test_overrides):
            raise SourceScopeViolation(edit.file_path)
    task_patch = patchkit.edits_to_patch(tree, edits)
    task_patch = patchkit.strip_comments(task_patch, language.value.lower()
                                         if language != Language.OTHER else "python")
    if task_patch.is_empty():
        raise EmptyEdit("task patch empty after comment stripping")
    return task_patch, patchkit.invert_patch(task_patch)


# ---------------------------------------------------------------------------
# stage 3: problem statement
# ---------------------------------------------------------------------------

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]{2,}")


def _fix_patch_mentions(fix_patch: patchkit.Patch) -> set:
    """Candidate anchors: touched paths, their basenames/stems, and
    identifiers appearing in the fix hunks (context included)."""
    mentions = set()
    for fp in fix_patch.files:
        for path in (fp.old_path, fp.new_path):
            if path == patchkit.DEV_NULL:
                continue
            mentions.add(path)
            base = path.rsplit("/", 1)[-1]
            mentions.add(base)
            mentions.add(base.rsplit(".", 1)[0])
        for h in fp.hunks:
            for hl in h.lines:
                mentions.update(_IDENT_RE.findall(hl.text))
    return {m for m in mentions if len(m) >= 3}


def _added_test_lines(test_patch: patchkit.Patch) -> list:
    lines = []
    for fp in test_patch.files:
        for h in fp.hunks:
            for hl in h.lines:
                if hl.tag == patchkit.TAG_ADD and len(hl.text.strip()) >= 8:
                    lines.append(hl.text.strip())
    return lines


def gen_problem_statement(original_issue: str, test_patch: patchkit.Patch,
                          fix_patch: patchkit.Patch, fewshot, lm: LanguageModelPort,
                          temperature: float = 0.0, seed: Optional[int] = None) -> str:
    """Synthesize the task description shown to coding agents.

    The statement must not quote any added test line verbatim (the tests
    stay hidden) and must mention at least one file or symbol from the fix
    patch.
    """
    examples = "\n\n---\n\n".join(fewshot) if fewshot else "(no examples)"
    prompt = load_prompt("problem_statement").format(
        original_issue=original_issue,
        test_patch=patchkit.render_patch(test_patch),
        fix_patch=patchkit.render_patch(fix_patch),
        examples=examples,
    )
    statement = lm.complete(prompt, temperature=temperature, seed=seed).strip()
    if not statement:
        raise LmFormatError("empty problem statement")
    for line in _added_test_lines(test_patch):
        if line in statement:
            raise TestLeakage(f"statement quotes hidden test line: {line[:60]!r}")
    mentions = _fix_patch_mentions(fix_patch)
    if not any(m in statement for m in mentions):
        raise StatementUnanchored("statement names nothing from the fix patch")
    return statement


# ---------------------------------------------------------------------------
# whole-phase driver
# ---------------------------------------------------------------------------

def run_mirror(candidate: CandidatePR, gym: GymSpec, tree: Optional[dict],
               lm: LanguageModelPort, k: int = DEFAULT_SAMPLES_K,
               n: int = DEFAULT_LOCALIZE_N, temperature: float = DEFAULT_TEMPERATURE,
               test_overrides=(), fewshot=None, base_seed: int = 0) -> list:
    """Run up to ``k`` independently sampled mirroring attempts.

    Failed attempts are retained with their stage and error so downstream
    yield accounting sees every outcome.
    """
    if tree is None:
        raise GymUnavailable(gym.gym_id)
    if fewshot is None:
        fewshot = load_fewshot_statements()
    structure = build_structure(tree, gym.language, test_overrides)
    attempts = []
    for i in range(k):
        seed = base_seed + i
        attempt = MirrorAttempt(candidate, gym, sampling_index=i)
        try:
            abstract = distill(candidate, lm, temperature=temperature, seed=seed)
            attempt = replace(attempt, abstract=abstract, stage_reached=Stage.DISTILLED)
            source_files, test_files = test_localize(
                abstract, structure, n, lm, temperature=temperature, seed=seed)
            test_patch = gen_test_patch(
                abstract, tree, source_files, test_files, lm, gym.language,
                test_overrides, temperature=temperature, seed=seed)
            attempt = replace(attempt, test_patch=test_patch, stage_reached=Stage.TESTED)
            localized = mirror_localize(
                abstract, structure, test_patch, n, lm,
                temperature=temperature, seed=seed)
            task_patch, fix_patch = gen_task_patch(
                abstract, test_patch, tree, localized, lm, gym.language,
                test_overrides, temperature=temperature, seed=seed)
            attempt = replace(attempt, task_patch=task_patch, fix_patch=fix_patch,
                              stage_reached=Stage.MIRRORED)
            statement = gen_problem_statement(
                _candidate_issue_text(candidate), test_patch, fix_patch,
                fewshot, lm, temperature=temperature, seed=seed)
            attempt = replace(attempt, problem_statement=statement,
                              stage_reached=Stage.STATED)
        except PipelineError as exc:
            attempt = replace(attempt, error=f"{type(exc).__name__}: {exc}")
        attempts.append(attempt)
    return attempts
