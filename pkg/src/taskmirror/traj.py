"""Trajectory curation: success filtering and the three loss-mask strategies.

A trajectory is successful only if it ends with a finish action and the
tests passing after its patch are a superset of the ground-truth
fail-to-pass set.  Masking treats erroneous assistant turns three ways:
keep them (response-only), delete them with their observations
(error-pruning), or keep them with their loss bit cleared (error-masking).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .errors import ConfigError, DegenerateSample, EvaluationUnavailable

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"
ROLE_OBSERVATION = "observation"

ACTION_KINDS = ("edit", "shell", "finish", "malformed")

#: Observation prefixes that mark the preceding assistant turn as erroneous.
#: Scaffold-specific; extend per deployment.
DEFAULT_ERROR_SIGNATURES = (
    "ERROR:",
    "OBSERVATION ERROR",
    "[Tool Error]",
    "Invalid function call",
    "Invalid action",
    "Malformed action",
    "Tool execution failed",
)


@dataclass(frozen=True)
class Turn:
    role: str
    content: str
    action_kind: Optional[str] = None
    is_error: bool = False

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "content": self.content,
            "action_kind": self.action_kind,
            "is_error": self.is_error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        return cls(d["role"], d.get("content", ""), d.get("action_kind"),
                   d.get("is_error", False))


@dataclass(frozen=True)
class Trajectory:
    instance_id: str
    turns: tuple = ()
    final_patch: str = ""
    passed_tests_after_patch: Optional[frozenset] = None

    def __post_init__(self):
        finishes = [t for t in self.turns
                    if t.role == ROLE_ASSISTANT and t.action_kind == "finish"]
        if len(finishes) > 1:
            raise ValueError("at most one finish action per trajectory")
        if finishes:
            last_assistant = next(t for t in reversed(self.turns)
                                  if t.role == ROLE_ASSISTANT)
            if last_assistant is not finishes[0]:
                raise ValueError("finish must be the last assistant turn")

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "turns": [t.to_dict() for t in self.turns],
            "final_patch": self.final_patch,
            "passed_tests_after_patch": (
                sorted(self.passed_tests_after_patch)
                if self.passed_tests_after_patch is not None else None
            ),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        passed = d.get("passed_tests_after_patch")
        return cls(
            instance_id=d["instance_id"],
            turns=tuple(Turn.from_dict(t) for t in d.get("turns", ())),
            final_patch=d.get("final_patch", ""),
            passed_tests_after_patch=frozenset(passed) if passed is not None else None,
        )


class MaskStrategy(str, Enum):
    RESPONSE_ONLY = "response_only"
    ERROR_PRUNING = "error_pruning"
    ERROR_MASKING = "error_masking"


@dataclass(frozen=True)
class TurnMask:
    bits: tuple  # one include-in-loss bit per turn; non-assistant turns are 0
    strategy: MaskStrategy


def is_successful(t: Trajectory, ground_truth_f2p) -> bool:
    """Success = ends with a finish action and the passed-test set covers
    every ground-truth fail-to-pass test."""
    if t.passed_tests_after_patch is None:
        raise EvaluationUnavailable(t.instance_id)
    assistants = [turn for turn in t.turns if turn.role == ROLE_ASSISTANT]
    if not assistants or assistants[-1].action_kind != "finish":
        return False
    return t.passed_tests_after_patch >= frozenset(ground_truth_f2p)


def detect_error_turn(turn: Turn, following_observation: str,
                      signatures=DEFAULT_ERROR_SIGNATURES) -> bool:
    """An assistant turn is erroneous when its action was malformed or its
    observation starts with a known error signature."""
    if turn.role != ROLE_ASSISTANT:
        raise ValueError("detect_error_turn expects an assistant turn")
    if turn.action_kind == "malformed" or turn.is_error:
        return True
    obs = (following_observation or "").lstrip()
    return any(obs.startswith(sig) for sig in signatures)


def _error_flags(turns, signatures):
    flags = []
    for i, turn in enumerate(turns):
        if turn.role != ROLE_ASSISTANT:
            flags.append(False)
            continue
        obs = ""
        if i + 1 < len(turns) and turns[i + 1].role == ROLE_OBSERVATION:
            obs = turns[i + 1].content
        flags.append(detect_error_turn(turn, obs, signatures))
    return flags


def build_mask(t: Trajectory, strategy: MaskStrategy,
               signatures=DEFAULT_ERROR_SIGNATURES):
    """Return ``(turns, TurnMask)`` for one of the three strategies.

    Response-only is the identity with every assistant bit set.
    Error-masking keeps the sequence but clears bits on erroneous assistant
    turns; an all-error trajectory raises :class:`DegenerateSample`.
    Error-pruning removes erroneous assistant turns together with their
    paired observations (keeping the observation would orphan its context).
    """
    try:
        strategy = MaskStrategy(strategy)
    except ValueError:
        raise ConfigError(f"unknown mask strategy: {strategy!r}")
    turns = list(t.turns)
    errors = _error_flags(turns, signatures)

    if strategy == MaskStrategy.RESPONSE_ONLY:
        bits = tuple(1 if turn.role == ROLE_ASSISTANT else 0 for turn in turns)
        return tuple(turns), TurnMask(bits, strategy)

    if strategy == MaskStrategy.ERROR_MASKING:
        bits = tuple(
            1 if turn.role == ROLE_ASSISTANT and not err else 0
            for turn, err in zip(turns, errors)
        )
        if not any(bits):
            raise DegenerateSample(t.instance_id)
        return tuple(turns), TurnMask(bits, strategy)

    # error pruning
    kept = []
    skip_next_observation = False
    for turn, err in zip(turns, errors):
        if skip_next_observation and turn.role == ROLE_OBSERVATION:
            skip_next_observation = False
            continue
        skip_next_observation = False
        if turn.role == ROLE_ASSISTANT and err:
            skip_next_observation = True
            continue
        kept.append(turn)
    bits = tuple(1 if turn.role == ROLE_ASSISTANT else 0 for turn in kept)
    if not any(bits):
        raise DegenerateSample(t.instance_id)
    return tuple(kept), TurnMask(bits, strategy)
