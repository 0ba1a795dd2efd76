"""Deduplicate accepted instances and compute dataset statistics.

Two instances are duplicates when they share either their fail-to-pass test
set or the fingerprint of what their fix patch changes; the kept instance
is the one with the lexicographically smallest id.  Fingerprints normalize
whitespace so cosmetic generation variance collapses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import patchkit
from .model import TaskInstance


def fix_fingerprint(fix_patch_text: str) -> tuple:
    """Sorted multiset of (file, whitespace-normalized changed line)."""
    if not fix_patch_text.strip():
        return ()
    patch = patchkit.parse_unified_diff(fix_patch_text)
    entries = []
    for fp in patch.files:
        for h in fp.hunks:
            for hl in h.lines:
                if hl.tag in (patchkit.TAG_ADD, patchkit.TAG_DEL):
                    entries.append((fp.path, " ".join(hl.text.split())))
    return tuple(sorted(entries))


def dedup(instances) -> list:
    """Keep a subset whose members pairwise differ on both duplicate keys.

    Deterministic and idempotent: instances are visited in instance_id
    order and dropped as soon as either key was already claimed.
    """
    kept = []
    seen_f2p = set()
    seen_fp = set()
    for inst in sorted(instances, key=lambda i: i.instance_id):
        f2p_key = frozenset(inst.f2p_tests)
        fp_key = fix_fingerprint(inst.fix_patch)
        if f2p_key in seen_f2p or fp_key in seen_fp:
            continue
        seen_f2p.add(f2p_key)
        seen_fp.add(fp_key)
        kept.append(inst)
    return kept


@dataclass(frozen=True)
class LanguageRow:
    repos: int
    instances: int
    mean_fix_hunks: float
    mean_fix_lines: float
    mean_p2p: float
    mean_f2p: float


@dataclass(frozen=True)
class DatasetStats:
    rows: dict = field(default_factory=dict)  # language name -> LanguageRow

    @property
    def total_instances(self) -> int:
        return sum(r.instances for r in self.rows.values())

    def to_dict(self) -> dict:
        return {
            lang: {
                "repos": row.repos,
                "instances": row.instances,
                "mean_fix_hunks": row.mean_fix_hunks,
                "mean_fix_lines": row.mean_fix_lines,
                "mean_p2p": row.mean_p2p,
                "mean_f2p": row.mean_f2p,
            }
            for lang, row in sorted(self.rows.items())
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def render_table(self) -> str:
        header = f"{'Language':<12}{'Repos':>7}{'Instances':>11}{'Hunks':>8}{'Lines':>8}{'P2P':>9}{'F2P':>8}"
        lines = [header, "-" * len(header)]
        for lang, r in sorted(self.rows.items()):
            lines.append(
                f"{lang:<12}{r.repos:>7}{r.instances:>11}"
                f"{r.mean_fix_hunks:>8.1f}{r.mean_fix_lines:>8.1f}"
                f"{r.mean_p2p:>9.1f}{r.mean_f2p:>8.1f}"
            )
        lines.append(f"{'Total':<12}{'':>7}{self.total_instances:>11}")
        return "\n".join(lines) + "\n"


def _fix_counts(inst: TaskInstance):
    if not inst.fix_patch.strip():
        return 0, 0
    patch = patchkit.parse_unified_diff(inst.fix_patch)
    hunks = sum(len(fp.hunks) for fp in patch.files)
    lines = sum(
        1
        for fp in patch.files
        for h in fp.hunks
        for hl in h.lines
        if hl.tag in (patchkit.TAG_ADD, patchkit.TAG_DEL)
    )
    return hunks, lines


def compute_stats(instances) -> DatasetStats:
    """Per-language means over exactly the included instances."""
    if not instances:
        raise ValueError("no instances to summarize")
    groups = {}
    for inst in instances:
        groups.setdefault(inst.gym.language.value, []).append(inst)
    rows = {}
    for lang, group in groups.items():
        n = len(group)
        hunks = []
        lines = []
        for inst in group:
            h, l = _fix_counts(inst)
            hunks.append(h)
            lines.append(l)
        rows[lang] = LanguageRow(
            repos=len({i.gym.repo for i in group}),
            instances=n,
            mean_fix_hunks=sum(hunks) / n,
            mean_fix_lines=sum(lines) / n,
            mean_p2p=sum(len(i.p2p_tests) for i in group) / n,
            mean_f2p=sum(len(i.f2p_tests) for i in group) / n,
        )
    return DatasetStats(rows)
