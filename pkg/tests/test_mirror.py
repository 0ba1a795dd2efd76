import json
import os

import pytest

from taskmirror import mirror, patchkit
from taskmirror.errors import (
    GymUnavailable,
    LmFormatError,
    LocalizationEmpty,
    SourceScopeViolation,
    StatementUnanchored,
    TestLeakage,
    TestScopeViolation,
)
from taskmirror.mirror import QueueLm, ScriptedLm, Stage
from taskmirror.model import CandidatePR, Language, RuleVerdict

from conftest import FIXTURES


@pytest.fixture
def lm():
    return ScriptedLm.from_file(os.path.join(FIXTURES, "scripted_lm.json"))


@pytest.fixture
def candidate():
    with open(os.path.join(FIXTURES, "github", "acme__mathkit", "diffs", "101.diff")) as fh:
        diff = fh.read()
    return CandidatePR(
        "acme/mathkit", 101, "Use true division",
        "Fixes #456\n\nratio() truncated results.",
        linked_issue_bodies=("ratio(7, 2) returns 3 instead of 3.5",),
        diff=diff, merged=True, closed=True, edits_code_files=True,
        rule_verdict=RuleVerdict(True),
    )


ABSTRACT_MD = """\
**Issue Type**: Bug

**Core Problem**: Floor division used where true division is needed.

**Technical Context**: Numeric utility library.

**Symptom**: Fractional parts are lost.

**Root Cause Pattern**: Truncating operator in a computation path.

**Impact Scope**: All callers dividing non-evenly.
"""


def test_parse_abstract_markdown_complete():
    issue = mirror.parse_abstract_markdown(ABSTRACT_MD)
    assert issue.issue_type == "Bug"
    assert issue.missing_sections == ()
    assert "Floor division" in issue.core_problem


def test_parse_abstract_markdown_missing_section():
    md = ABSTRACT_MD.replace("**Symptom**: Fractional parts are lost.\n\n", "")
    issue = mirror.parse_abstract_markdown(md)
    assert issue.symptom == ""
    assert issue.missing_sections == ("symptom",)


def test_distill_requires_fenced_block(candidate):
    with pytest.raises(LmFormatError):
        mirror.distill(candidate, QueueLm(["no fenced block here"]))


def test_distill_fixture(candidate, lm):
    issue = mirror.distill(candidate, lm)
    assert issue.missing_sections == ()
    assert "floor" in issue.core_problem.lower() or "integer" in issue.core_problem.lower()


def test_is_test_file():
    py = Language.PYTHON
    assert mirror.is_test_file("tests/test_ops.py", py)
    assert mirror.is_test_file("pkg/foo_test.go", Language.GO)
    assert mirror.is_test_file("src/__tests__/x.js", Language.JAVASCRIPT)
    assert mirror.is_test_file("src/a.spec.ts", Language.JAVASCRIPT)
    assert not mirror.is_test_file("calclib/ops.py", py)
    assert mirror.is_test_file("calclib/ops.py", py, overrides=("calclib/ops.py",))


def test_build_and_render_structure(calc_tree):
    structure = mirror.build_structure(calc_tree, Language.PYTHON)
    assert "calclib/ops.py" in structure.paths()
    assert structure.test_paths() == {"tests/test_ops.py"}
    rendered = mirror.render_structure(structure)
    assert "calclib/ops.py" in rendered
    assert "    div" in rendered  # symbol outline present


def test_outline_symbols_spans():
    content = "def a():\n    pass\n\ndef b():\n    pass\n"
    symbols = mirror.outline_symbols(content, Language.PYTHON)
    assert [s[0] for s in symbols] == ["a", "b"]
    assert symbols[0][1] == 1 and symbols[0][2] == 3


def test_test_localize_drops_hallucinated(calc_tree):
    structure = mirror.build_structure(calc_tree, Language.PYTHON)
    issue = mirror.parse_abstract_markdown(ABSTRACT_MD)
    lm = QueueLm(['```python\n{"source_files": ["calclib/ops.py", "ghost.py"],'
                  ' "test_files": ["tests/test_ops.py"]}\n```'])
    source, tests = mirror.test_localize(issue, structure, 5, lm)
    assert source == ["calclib/ops.py"]
    assert tests == ["tests/test_ops.py"]


def test_test_localize_all_hallucinated(calc_tree):
    structure = mirror.build_structure(calc_tree, Language.PYTHON)
    issue = mirror.parse_abstract_markdown(ABSTRACT_MD)
    lm = QueueLm(['```python\n{"source_files": ["ghost.py"], "test_files": ["phantom.py"]}\n```'])
    with pytest.raises(LocalizationEmpty):
        mirror.test_localize(issue, structure, 5, lm)


def test_test_localize_caps_at_n(calc_tree):
    tree = dict(calc_tree)
    for i in range(8):
        tree[f"tests/test_extra{i}.py"] = "def test_x():\n    pass\n"
    structure = mirror.build_structure(tree, Language.PYTHON)
    issue = mirror.parse_abstract_markdown(ABSTRACT_MD)
    paths = json.dumps(sorted(structure.test_paths()))
    lm = QueueLm([f'```python\n{{"source_files": [], "test_files": {paths}}}\n```'])
    _, tests = mirror.test_localize(issue, structure, 3, lm)
    assert len(tests) == 3


def test_gen_test_patch_scope_violation(calc_tree):
    issue = mirror.parse_abstract_markdown(ABSTRACT_MD)
    lm = QueueLm(["```\ncalclib/ops.py\n<<<<<<< SEARCH\n    return a / b\n"
                  "=======\n    return a / b  # touched\n>>>>>>> REPLACE\n```"])
    with pytest.raises(TestScopeViolation):
        mirror.gen_test_patch(issue, calc_tree, ["calclib/ops.py"],
                              ["tests/test_ops.py"], lm, Language.PYTHON)


def test_gen_test_patch_fixture(calc_tree, lm):
    issue = mirror.parse_abstract_markdown(ABSTRACT_MD)
    patch = mirror.gen_test_patch(issue, calc_tree, ["calclib/ops.py"],
                                  ["tests/test_ops.py"], lm, Language.PYTHON)
    out = patchkit.apply_patch(calc_tree, patch)
    assert "def test_div():" in out["tests/test_ops.py"]
    assert mirror.extract_test_identifiers(patch, Language.PYTHON) == ["test_div"]


def test_mirror_localize_list_format(calc_tree):
    structure = mirror.build_structure(calc_tree, Language.PYTHON)
    issue = mirror.parse_abstract_markdown(ABSTRACT_MD)
    test_patch = patchkit.diff_trees(
        calc_tree, {**calc_tree, "tests/test_ops.py": calc_tree["tests/test_ops.py"] + "x = 1\n"})
    with pytest.raises(LmFormatError):
        mirror.mirror_localize(issue, structure, test_patch, 5,
                               QueueLm(['```python\n{"files": []}\n```']))
    with pytest.raises(LocalizationEmpty):
        mirror.mirror_localize(issue, structure, test_patch, 5,
                               QueueLm(['```python\n["ghost.py"]\n```']))


def _test_patch(calc_tree):
    return patchkit.diff_trees(
        calc_tree,
        {**calc_tree, "tests/test_ops.py": calc_tree["tests/test_ops.py"]
         + "\n\ndef test_div():\n    assert div(7, 2) == 3.5\n"})


def test_gen_task_patch_strips_comments_and_inverts(calc_tree, lm):
    issue = mirror.parse_abstract_markdown(ABSTRACT_MD)
    task, fix = mirror.gen_task_patch(issue, _test_patch(calc_tree), calc_tree,
                                      ["calclib/ops.py"], lm, Language.PYTHON)
    broken = patchkit.apply_patch(calc_tree, task)
    assert "a // b" in broken["calclib/ops.py"]
    assert "#" not in broken["calclib/ops.py"].split("a // b")[1].split("\n")[0]
    assert fix == patchkit.invert_patch(task)
    assert patchkit.apply_patch(broken, fix) == calc_tree


def test_gen_task_patch_rejects_test_edit(calc_tree):
    issue = mirror.parse_abstract_markdown(ABSTRACT_MD)
    lm = QueueLm(["```\ntests/test_ops.py\n<<<<<<< SEARCH\ndef test_add():\n"
                  "=======\ndef test_added():\n>>>>>>> REPLACE\n```"])
    with pytest.raises(SourceScopeViolation):
        mirror.gen_task_patch(issue, _test_patch(calc_tree), calc_tree,
                              ["calclib/ops.py"], lm, Language.PYTHON)


def _fix_patch(calc_tree):
    task = patchkit.diff_trees(
        calc_tree,
        {**calc_tree, "calclib/ops.py": calc_tree["calclib/ops.py"].replace("a / b", "a // b")})
    return patchkit.invert_patch(task)


def test_gen_problem_statement_leakage(calc_tree):
    lm = QueueLm(["The test contains assert div(7, 2) == 3.5 so fix div."])
    with pytest.raises(TestLeakage):
        mirror.gen_problem_statement("orig", _test_patch(calc_tree),
                                     _fix_patch(calc_tree), [], lm)


def test_gen_problem_statement_unanchored(calc_tree):
    lm = QueueLm(["Something is wrong somewhere. Please locate it."])
    with pytest.raises(StatementUnanchored):
        mirror.gen_problem_statement("orig", _test_patch(calc_tree),
                                     _fix_patch(calc_tree), [], lm)


def test_gen_problem_statement_ok(calc_tree):
    lm = QueueLm(["The div helper in calclib/ops.py truncates quotients."])
    out = mirror.gen_problem_statement("orig", _test_patch(calc_tree),
                                       _fix_patch(calc_tree), [], lm)
    assert "div" in out


def test_run_mirror_full_fixture(candidate, calc_gym, calc_tree, lm):
    attempts = mirror.run_mirror(candidate, calc_gym, calc_tree, lm, k=2)
    assert len(attempts) == 2
    for att in attempts:
        assert att.stage_reached == Stage.STATED
        assert att.error is None
        assert att.fix_patch == patchkit.invert_patch(att.task_patch)
    assert [a.sampling_index for a in attempts] == [0, 1]


def test_run_mirror_records_stage_on_failure(candidate, calc_gym, calc_tree):
    # distill succeeds, localization response malformed -> stage stays DISTILLED
    lm = ScriptedLm([
        {"match": "abstract the bug pattern",
         "response": "```markdown\n" + ABSTRACT_MD + "```\n"},
        {"match": "", "response": "unparseable"},
    ])
    attempts = mirror.run_mirror(candidate, calc_gym, calc_tree, lm, k=1)
    assert attempts[0].stage_reached == Stage.DISTILLED
    assert "LmFormatError" in attempts[0].error


def test_run_mirror_no_tree(candidate, calc_gym, lm):
    with pytest.raises(GymUnavailable):
        mirror.run_mirror(candidate, calc_gym, None, lm)


def test_run_mirror_k_zero(candidate, calc_gym, calc_tree, lm):
    assert mirror.run_mirror(candidate, calc_gym, calc_tree, lm, k=0) == []


def test_pack_file_truncates_middle():
    packed = mirror._pack_file("big.py", "A" * 30_000, budget=1000)
    assert "[... middle truncated ...]" in packed
    assert packed.startswith("[start of big.py]")
    assert packed.endswith("[end of big.py]")
