"""End-to-end pipeline orchestration with resumable, seeded runs.

Every command is a pure function of (inputs, config, seed) in mock mode:
outputs are sorted, JSON is emitted with stable key order, and timestamps
come from the config, so re-running with the same seed reproduces the same
bytes.  Long phases checkpoint one JSON state file per work unit and skip
units whose checkpoint already exists.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import yaml

from . import assemble as assemble_mod
from . import gymrun, ingest, mirror, patchkit, traj, verify
from .errors import ConfigError, DegenerateSample, PipelineError, SanityFailure
from .model import (
    CandidatePR,
    GymSpec,
    LmVerdict,
    TaskInstance,
    load_gym_registry,
    make_instance_id,
    serialize_corpus,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2

DEFAULT_CREATED_AT = "1970-01-01T00:00:00Z"


@dataclass
class PipelineConfig:
    gyms_file: str = "gyms.json"
    output_dir: str = "out"
    checkout_root: str = "checkouts"
    github_fixture_dir: str = ""
    lm_mode: str = "scripted"  # scripted | http
    lm_script: str = ""
    lm_model: str = "default"
    workers: int = 1
    sampling_k: int = mirror.DEFAULT_SAMPLES_K
    localization_n: int = mirror.DEFAULT_LOCALIZE_N
    temperature: float = mirror.DEFAULT_TEMPERATURE
    rate_limit_per_sec: float = 5.0
    seed: int = 0
    created_at: str = DEFAULT_CREATED_AT
    executor: str = "local"  # local | scripted
    test_overrides: list = field(default_factory=list)

    @classmethod
    def load(cls, path: str) -> "PipelineConfig":
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a key-value mapping")
        cfg = cls()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config key: {key}")
            setattr(cfg, key, value)
        return cfg

    def resolve(self, base_dir: str) -> "PipelineConfig":
        """Make path-valued fields absolute relative to the config file."""
        for name in ("gyms_file", "output_dir", "checkout_root",
                     "github_fixture_dir", "lm_script"):
            value = getattr(self, name)
            if value and not os.path.isabs(value):
                setattr(self, name, os.path.join(base_dir, value))
        return self


def _dump_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, ensure_ascii=False, indent=2)
        fh.write("\n")


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _build_lm(config: PipelineConfig):
    if config.lm_mode == "scripted":
        if not config.lm_script:
            raise ConfigError("lm_mode=scripted requires lm_script")
        return mirror.ScriptedLm.from_file(config.lm_script)
    if config.lm_mode == "http":
        return mirror.HttpLm(model=config.lm_model)
    raise ConfigError(f"unknown lm_mode: {config.lm_mode}")


def _build_github(config: PipelineConfig):
    if config.github_fixture_dir:
        return ingest.FixtureGitHub(config.github_fixture_dir)
    return ingest.LiveGitHub(bucket=ingest.TokenBucket(config.rate_limit_per_sec))


def _build_executor(config: PipelineConfig):
    if config.executor == "local":
        return gymrun.LocalExecutor()
    raise ConfigError(f"unknown executor: {config.executor}")


def _load_checkout(config: PipelineConfig, gym: GymSpec):
    root = os.path.join(config.checkout_root, gym.gym_id)
    if not os.path.isdir(root):
        return None
    tree = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = [d for d in dirnames if d not in (".git", "__pycache__")]
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            with open(full, encoding="utf-8") as fh:
                tree[rel] = fh.read()
    return tree


def _readme_of(tree: dict) -> str:
    for name in ("README.md", "README.rst", "README.txt", "README"):
        if name in tree:
            return tree[name]
    return ""


# ---------------------------------------------------------------------------
# collect
# ---------------------------------------------------------------------------

def cmd_collect(config: PipelineConfig) -> int:
    gyms = load_gym_registry(config.gyms_file)
    gh = _build_github(config)
    lm = _build_lm(config)
    ckpt_dir = os.path.join(config.output_dir, "checkpoints", "collect")
    os.makedirs(ckpt_dir, exist_ok=True)

    def collect_for_gym(gym: GymSpec):
        tree = _load_checkout(config, gym)
        if tree is None:
            raise ConfigError(f"missing checkout for gym {gym.gym_id}")
        readme = _readme_of(tree)
        structure = mirror.build_structure(tree, gym.language,
                                           tuple(config.test_overrides))
        test_listing = "\n".join(sorted(structure.test_paths()))
        keywords = ingest.generate_keywords(readme, lm)
        repos = ingest.search_repos(keywords, gh)
        rows = []
        for result in repos:
            ckpt = os.path.join(ckpt_dir, f"{gym.gym_id}__{result.repo.replace('/', '__')}.json")
            if os.path.exists(ckpt):
                rows.extend(_load_json(ckpt))
                continue
            repo_rows = []
            for pr in ingest.collect_prs(result.repo, gh):
                if pr.rule_verdict and pr.rule_verdict.passed:
                    accepted, reason = ingest.lm_filter(pr, readme, test_listing, lm)
                    pr = dataclasses.replace(pr, lm_verdict=LmVerdict(accepted, reason))
                repo_rows.append({"target_gym": gym.gym_id, "candidate": pr.to_dict()})
            _dump_json(ckpt, repo_rows)
            rows.extend(repo_rows)
        return rows

    all_rows = []
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for rows in pool.map(collect_for_gym, gyms):
                all_rows.extend(rows)
    else:
        for gym in gyms:
            all_rows.extend(collect_for_gym(gym))

    all_rows.sort(key=lambda r: (r["target_gym"], r["candidate"]["source_repo"],
                                 r["candidate"]["pr_number"]))
    out_path = os.path.join(config.output_dir, "candidates.jsonl")
    os.makedirs(config.output_dir, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for row in all_rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    print(f"collected {len(all_rows)} candidate PRs -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# mirror
# ---------------------------------------------------------------------------

def _attempt_to_dict(att: mirror.MirrorAttempt, target_gym: str) -> dict:
    def render(p):
        return patchkit.render_patch(p) if p is not None else None

    return {
        "target_gym": target_gym,
        "candidate": att.candidate.to_dict(),
        "sampling_index": att.sampling_index,
        "stage_reached": att.stage_reached.value if att.stage_reached else None,
        "error": att.error,
        "abstract_markdown": att.abstract.raw_markdown if att.abstract else None,
        "test_patch": render(att.test_patch),
        "task_patch": render(att.task_patch),
        "fix_patch": render(att.fix_patch),
        "problem_statement": att.problem_statement,
    }


def cmd_mirror(config: PipelineConfig) -> int:
    cand_path = os.path.join(config.output_dir, "candidates.jsonl")
    if not os.path.exists(cand_path):
        print(f"missing upstream file: {cand_path}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    gyms = {g.gym_id: g for g in load_gym_registry(config.gyms_file)}
    lm = _build_lm(config)
    attempts_dir = os.path.join(config.output_dir, "attempts")
    os.makedirs(attempts_dir, exist_ok=True)

    rows = []
    with open(cand_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))

    def accepted(row):
        cand = row["candidate"]
        rule = cand.get("rule_verdict") or {}
        lmv = cand.get("lm_verdict") or {}
        return rule.get("passed") and lmv.get("accepted")

    work = [r for r in rows if accepted(r)]

    def mirror_one(row):
        cand = CandidatePR.from_dict(row["candidate"])
        gym = gyms[row["target_gym"]]
        name = f"{gym.gym_id}__{cand.source_repo.replace('/', '__')}__{cand.pr_number}.json"
        out = os.path.join(attempts_dir, name)
        if os.path.exists(out):
            return name
        tree = _load_checkout(config, gym)
        attempts = mirror.run_mirror(
            cand, gym, tree, lm,
            k=config.sampling_k, n=config.localization_n,
            temperature=config.temperature,
            test_overrides=tuple(config.test_overrides),
            base_seed=config.seed,
        )
        _dump_json(out, [_attempt_to_dict(a, gym.gym_id) for a in attempts])
        return name

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            list(pool.map(mirror_one, work))
    else:
        for row in work:
            mirror_one(row)
    print(f"mirrored {len(work)} candidates -> {attempts_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _parse_optional_patch(text):
    if not text:
        return None
    return patchkit.parse_unified_diff(text)


def cmd_verify(config: PipelineConfig) -> int:
    attempts_dir = os.path.join(config.output_dir, "attempts")
    if not os.path.isdir(attempts_dir):
        print(f"missing upstream dir: {attempts_dir}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    gyms = {g.gym_id: g for g in load_gym_registry(config.gyms_file)}
    executor = _build_executor(config)
    verdict_dir = os.path.join(config.output_dir, "verdicts")
    os.makedirs(verdict_dir, exist_ok=True)

    accepted_records = []
    for fname in sorted(os.listdir(attempts_dir)):
        if not fname.endswith(".json"):
            continue
        for att in _load_json(os.path.join(attempts_dir, fname)):
            if att.get("stage_reached") != mirror.Stage.STATED.value:
                continue
            key = f"{fname[:-5]}__{att['sampling_index']}"
            report_path = os.path.join(verdict_dir, key + ".json")
            if os.path.exists(report_path):
                report = _load_json(report_path)
            else:
                report = _verify_attempt(config, gyms, executor, att)
                _dump_json(report_path, report)
            if report["verdict"]["outcome"] == verify.Outcome.ACCEPTED.value:
                accepted_records.append((att, report))

    instances = _assign_instances(config, gyms, accepted_records)
    out_path = os.path.join(config.output_dir, "accepted.jsonl")
    os.makedirs(config.output_dir, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(serialize_corpus(instances))
    print(f"verified: {len(instances)} accepted instances -> {out_path}")
    return EXIT_OK


def _verify_attempt(config, gyms, executor, att) -> dict:
    gym = gyms[att["target_gym"]]
    tree = _load_checkout(config, gym)
    report = {"target_gym": gym.gym_id,
              "source_repo": att["candidate"]["source_repo"],
              "pr_number": att["candidate"]["pr_number"],
              "sampling_index": att["sampling_index"]}
    try:
        task_patch = patchkit.parse_unified_diff(att["task_patch"])
        test_patch = patchkit.parse_unified_diff(att["test_patch"])
        fix_patch = patchkit.parse_unified_diff(att["fix_patch"])
        verify.sanity_check(tree, task_patch, test_patch, fix_patch)
        logs = gymrun.run_three_logs(gym, tree, task_patch, test_patch, fix_patch, executor)
    except SanityFailure as exc:
        report["verdict"] = verify.Verdict(
            verify.Outcome.REJECTED, rule=None,
            details=f"sanity failure at {exc.stage}").to_dict()
        report["failure_category"] = verify.FailureCategory.COMPILE_SYNTAX.value
        return report
    except PipelineError as exc:
        report["verdict"] = verify.Verdict(
            verify.Outcome.REJECTED, rule=None,
            details=f"{type(exc).__name__}: {exc}").to_dict()
        report["failure_category"] = verify.FailureCategory.COMPILE_SYNTAX.value
        return report
    verdict = verify.evaluate_attempt(logs.run, logs.test, logs.fix)
    report["verdict"] = verdict.to_dict()
    report["transitions"] = [
        [t.test_id, t.s_run.value, t.s_test.value, t.s_fix.value]
        for t in verify.classify_transitions(logs.run, logs.test, logs.fix)
    ]
    if verdict.outcome != verify.Outcome.ACCEPTED:
        report["failure_category"] = verify.categorize_failure(
            [logs.run_log, logs.test_log, logs.fix_log],
            [logs.run, logs.test, logs.fix]).value
    gymrun.persist_logs(
        os.path.join(config.output_dir, "logs",
                     f"{gym.gym_id}__{report['source_repo'].replace('/', '__')}"
                     f"__{report['pr_number']}__{report['sampling_index']}"),
        logs,
        manifest={"gym": gym.gym_id, "verdict": verdict.outcome.value},
    )
    return report


def _assign_instances(config, gyms, accepted_records) -> list:
    # deterministic instance ids: sorted input, per (source repo, gym) sequence
    accepted_records.sort(key=lambda pair: (
        pair[0]["target_gym"], pair[0]["candidate"]["source_repo"],
        pair[0]["candidate"]["pr_number"], pair[0]["sampling_index"]))
    counters = {}
    instances = []
    for att, report in accepted_records:
        gym = gyms[att["target_gym"]]
        source_repo = att["candidate"]["source_repo"]
        key = (source_repo, gym.gym_id)
        counters[key] = counters.get(key, 0) + 1
        verdict = report["verdict"]
        instances.append(TaskInstance(
            instance_id=make_instance_id(source_repo, gym.gym_id, counters[key]),
            gym=gym,
            problem_statement=att["problem_statement"],
            task_patch=att["task_patch"],
            test_patch=att["test_patch"],
            fix_patch=att["fix_patch"],
            source=(source_repo, att["candidate"]["pr_number"]),
            f2p_tests=frozenset(verdict["f2p_tests"]),
            p2p_tests=frozenset(verdict["p2p_tests"]),
            created_at=config.created_at,
        ))
    return instances


# ---------------------------------------------------------------------------
# assemble / stats
# ---------------------------------------------------------------------------

def cmd_assemble(config: PipelineConfig) -> int:
    in_path = os.path.join(config.output_dir, "accepted.jsonl")
    if not os.path.exists(in_path):
        print(f"missing upstream file: {in_path}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    from .model import read_corpus

    instances = read_corpus(in_path)
    deduped = assemble_mod.dedup(instances)
    out_path = os.path.join(config.output_dir, "dataset.jsonl")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(serialize_corpus(deduped))
    if deduped:
        stats = assemble_mod.compute_stats(deduped)
        with open(os.path.join(config.output_dir, "stats.json"), "w", encoding="utf-8") as fh:
            fh.write(stats.to_json())
        table = stats.render_table()
        with open(os.path.join(config.output_dir, "stats.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
        print(table, end="")
    print(f"assembled {len(deduped)} instances (from {len(instances)}) -> {out_path}")
    return EXIT_OK


def cmd_stats(dataset_path: str) -> int:
    if not os.path.exists(dataset_path):
        print(f"missing dataset file: {dataset_path}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    from .model import read_corpus

    instances = read_corpus(dataset_path)
    if not instances:
        print("dataset is empty")
        return EXIT_OK
    print(assemble_mod.compute_stats(instances).render_table(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# mask / eval-filter
# ---------------------------------------------------------------------------

def cmd_mask(input_path: str, output_path: str, strategy: str) -> int:
    if not os.path.exists(input_path):
        print(f"missing upstream file: {input_path}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    kept = skipped = 0
    with open(input_path, encoding="utf-8") as fin, \
            open(output_path, "w", encoding="utf-8") as fout:
        for line in fin:
            if not line.strip():
                continue
            t = traj.Trajectory.from_dict(json.loads(line))
            try:
                turns, mask = traj.build_mask(t, strategy)
            except DegenerateSample:
                log.warning("degenerate sample skipped: %s", t.instance_id)
                skipped += 1
                continue
            record = t.to_dict()
            record["turns"] = [turn.to_dict() for turn in turns]
            record["loss_mask"] = list(mask.bits)
            record["strategy"] = mask.strategy.value
            fout.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
            kept += 1
    print(f"masked {kept} trajectories ({skipped} degenerate skipped) -> {output_path}")
    return EXIT_OK


def cmd_eval_filter(config: PipelineConfig, labeled_path: str) -> int:
    if not os.path.exists(labeled_path):
        print(f"missing labeled file: {labeled_path}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    lm = _build_lm(config)
    labeled = []
    with open(labeled_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            labeled.append((CandidatePR.from_dict(row["candidate"]), bool(row["label"])))
    evaluation = ingest.evaluate_filter(labeled, lm)
    os.makedirs(config.output_dir, exist_ok=True)
    _dump_json(os.path.join(config.output_dir, "filter_report.json"), evaluation.to_dict())
    print(evaluation.render())
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_config_arg(parser):
    parser.add_argument("--config", required=True, help="pipeline config file (YAML key-value)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="taskmirror",
        description="Mirror real-world issues into pre-configured executable gyms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("collect", "mirror", "verify", "assemble"):
        _add_config_arg(sub.add_parser(name))

    p_stats = sub.add_parser("stats")
    p_stats.add_argument("--dataset", required=True)

    p_mask = sub.add_parser("mask")
    p_mask.add_argument("--input", required=True)
    p_mask.add_argument("--output", required=True)
    p_mask.add_argument("--strategy", required=True,
                        choices=[s.value for s in traj.MaskStrategy])

    p_eval = sub.add_parser("eval-filter")
    _add_config_arg(p_eval)
    p_eval.add_argument("--labeled", required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    try:
        if args.command == "stats":
            return cmd_stats(args.dataset)
        if args.command == "mask":
            return cmd_mask(args.input, args.output, args.strategy)
        config = PipelineConfig.load(args.config).resolve(
            os.path.dirname(os.path.abspath(args.config)))
        if args.command == "collect":
            return cmd_collect(config)
        if args.command == "mirror":
            return cmd_mirror(config)
        if args.command == "verify":
            return cmd_verify(config)
        if args.command == "assemble":
            return cmd_assemble(config)
        if args.command == "eval-filter":
            return cmd_eval_filter(config, args.labeled)
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (PipelineError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
