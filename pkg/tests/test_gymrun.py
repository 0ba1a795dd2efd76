import os
import time

import pytest

from taskmirror import patchkit
from taskmirror.errors import ParserAnomaly, SanityFailure
from taskmirror.gymrun import (
    TIMEOUT_GRACE,
    ExecutionResult,
    LocalExecutor,
    ScriptedExecutor,
    StatusMap,
    parse_cargo,
    parse_gotest,
    parse_jest,
    parse_log,
    parse_pytest,
    persist_logs,
    run_three_logs,
    ThreeLogs,
)
from taskmirror.model import TestStatus

from conftest import FIXTURES

P, F, S = TestStatus.PASSED, TestStatus.FAILED, TestStatus.SKIPPED


def read_log(name):
    with open(os.path.join(FIXTURES, "logs", name), encoding="utf-8") as fh:
        return fh.read()


def test_parse_pytest_verbose():
    statuses = parse_pytest(read_log("pytest_verbose.log"))
    assert statuses == {
        "tests/test_ops.py::test_add": P,
        "tests/test_ops.py::test_sub": P,
        "tests/test_ops.py::test_div": F,
        "tests/test_ops.py::test_mod": S,
    }


def test_parse_pytest_summary_and_error():
    statuses = parse_pytest(read_log("pytest_summary.log"))
    assert statuses["tests/test_a.py::test_one"] == P
    assert statuses["tests/test_a.py::test_two"] == F
    assert statuses["tests/test_a.py::test_three"] == S
    assert statuses["tests/test_a.py::test_four"] == F  # ERROR counts as failed


def test_parse_pytest_xfail_xpass():
    statuses = parse_pytest(read_log("pytest_xfail.log"))
    assert statuses["tests/test_x.py::test_expected"] == S
    assert statuses["tests/test_x.py::test_surprise"] == P


def test_parse_pytest_duplicate_last_wins(caplog):
    with caplog.at_level("WARNING"):
        statuses = parse_pytest(read_log("pytest_dup.log"))
    assert statuses["tests/test_a.py::test_flaky"] == P
    assert "duplicate" in caplog.text


def test_parse_cargo():
    statuses = parse_cargo(read_log("cargo.log"))
    assert statuses == {
        "math::tests::adds": P,
        "math::tests::divides": F,
        "math::tests::slow": S,
    }


def test_parse_gotest():
    statuses = parse_gotest(read_log("gotest.log"))
    assert statuses == {"TestAdd": P, "TestDiv": F, "TestSkip": S}


def test_parse_jest():
    statuses = parse_jest(read_log("jest.log"))
    assert statuses == {
        "adds two numbers": P,
        "divides two numbers": F,
        "rounds down": S,
    }


def test_parse_log_anomalies():
    with pytest.raises(ParserAnomaly):
        parse_log("nope", "anything")
    with pytest.raises(ParserAnomaly):
        parse_log("pytest", "no test lines here\n")


def test_status_map_defaults_none():
    m = StatusMap({"a": P})
    assert m.get("missing") == TestStatus.NONE
    assert not m.abnormal()


def test_local_executor_runs_and_captures():
    result = LocalExecutor().run(
        "ignored", {"hello.txt": "hi\n"}, "cat hello.txt && pwd",
        time_limit=30, memory_limit=1 << 31)
    assert result.exit_code == 0
    assert "hi" in result.transcript
    assert not result.timed_out


def test_local_executor_enforces_time_limit():
    start = time.monotonic()
    result = LocalExecutor().run("ignored", {}, "sleep 30", time_limit=1,
                                 memory_limit=1 << 31)
    elapsed = time.monotonic() - start
    assert result.timed_out
    assert elapsed < 1 + TIMEOUT_GRACE


def test_scripted_executor_replays():
    tree = {"a.txt": "x"}
    key = ScriptedExecutor.fingerprint(tree)
    canned = ExecutionResult(0, "test a ... ok\n", 0.01)
    ex = ScriptedExecutor({key: canned})
    assert ex.run("img", tree, "cmd", 1, 1) is canned
    with pytest.raises(KeyError):
        ex.run("img", {"other": "y"}, "cmd", 1, 1)


def _scripted_three_state(tree, task, test, fix, logs):
    """Map each patched tree to its canned log via fingerprints."""
    states = {
        "run": patchkit.apply_patch(tree, task),
        "test": patchkit.apply_patch(patchkit.apply_patch(tree, task), test),
        "fix": patchkit.apply_patch(
            patchkit.apply_patch(patchkit.apply_patch(tree, task), test), fix),
    }
    script = {
        ScriptedExecutor.fingerprint(t): ExecutionResult(0, logs[name], 0.01)
        for name, t in states.items()
    }
    return ScriptedExecutor(script)


def test_run_three_logs_f2p(calc_gym, calc_tree):
    task = patchkit.diff_trees(
        calc_tree,
        {**calc_tree, "calclib/ops.py": calc_tree["calclib/ops.py"].replace(
            "a / b", "a // b")})
    test = patchkit.diff_trees(
        calc_tree,
        {**calc_tree, "tests/test_ops.py": calc_tree["tests/test_ops.py"]
         + "\n\ndef test_div():\n    assert div(7, 2) == 3.5\n"})
    fix = patchkit.invert_patch(task)
    logs = {
        "run": "tests/test_ops.py::test_add PASSED\ntests/test_ops.py::test_sub PASSED\n",
        "test": ("tests/test_ops.py::test_add PASSED\n"
                 "tests/test_ops.py::test_sub PASSED\n"
                 "tests/test_ops.py::test_div FAILED\n"),
        "fix": ("tests/test_ops.py::test_add PASSED\n"
                "tests/test_ops.py::test_sub PASSED\n"
                "tests/test_ops.py::test_div PASSED\n"),
    }
    ex = _scripted_three_state(calc_tree, task, test, fix, logs)
    three = run_three_logs(calc_gym, calc_tree, task, test, fix, ex)
    assert three.run.get("tests/test_ops.py::test_div") == TestStatus.NONE
    assert three.test.get("tests/test_ops.py::test_div") == F
    assert three.fix.get("tests/test_ops.py::test_div") == P


def test_run_three_logs_apply_failure_names_state(calc_gym, calc_tree):
    bad = patchkit.parse_unified_diff(
        "--- a/calclib/ops.py\n+++ b/calclib/ops.py\n@@ -1,1 +1,1 @@\n-nope\n+yes\n")
    with pytest.raises(SanityFailure) as exc:
        run_three_logs(calc_gym, calc_tree, bad, bad, bad, ScriptedExecutor({}))
    assert exc.value.stage == "run"


def test_persist_logs(tmp_path):
    three = ThreeLogs(StatusMap({"a": P}), StatusMap({"a": F}), StatusMap({"a": P}),
                      "runlog", "testlog", "fixlog")
    persist_logs(str(tmp_path / "d"), three, manifest={"gym": "g"})
    assert (tmp_path / "d" / "Run.log").read_text() == "runlog"
    assert (tmp_path / "d" / "Test.log").read_text() == "testlog"
    assert (tmp_path / "d" / "Fix.log").read_text() == "fixlog"
    assert "gym" in (tmp_path / "d" / "manifest.json").read_text()
