"""Combine the three task outputs into a five-grade prediction.

Two strategies:
  - ensemble: Lo/Hi decided by majority vote of the three models, then the
    matching specialist picks the grade by argmax over its concrete grade
    classes (the group placeholder is ignored).
  - gate: the binary neutrophil model alone decides Lo/Hi before specialist
    delegation (hierarchical baseline).

Exact probability ties break toward Lo / the lower grade everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ActivityGroup, TaskKind
from .errors import DataError


class Strategy(str, Enum):
    ENSEMBLE = "ensemble"
    GATE = "gate"


@dataclass
class TaskOutputs:
    """Per-slide probability distributions from the three task models."""

    neutrophil: np.ndarray   # over (Lo, Hi)
    nancy_low: np.ndarray    # over (0, 1, Hi) — or (0, 1) in gate mode
    nancy_high: np.ndarray   # over (Lo, 2, 3, 4) — or (2, 3, 4) in gate mode

    def __post_init__(self):
        for name, arr, sizes in (("neutrophil", self.neutrophil, (2,)),
                                 ("nancy_low", self.nancy_low, (2, 3)),
                                 ("nancy_high", self.nancy_high, (3, 4))):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 1 or arr.shape[0] not in sizes:
                raise DataError(f"{name}: bad distribution shape {arr.shape}")
            if np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-9:
                raise DataError(f"{name}: not a probability distribution "
                                f"(sum {arr.sum():.12f})")
            setattr(self, name, arr)

    @property
    def reduced(self) -> bool:
        # gate-mode specialists trained without the placeholder class
        return len(self.nancy_low) == 2


@dataclass
class FinalPrediction:
    grade: int
    group: ActivityGroup
    votes: tuple[ActivityGroup, ActivityGroup, ActivityGroup]
    delegated_task: TaskKind
    strategy: Strategy


def _vote_neutrophil(p: np.ndarray) -> ActivityGroup:
    return ActivityGroup.HI if p[1] > p[0] else ActivityGroup.LO


def _vote_nancy_low(p: np.ndarray) -> ActivityGroup:
    if len(p) == 2:  # reduced specialist cannot see Hi; votes Lo
        return ActivityGroup.LO
    return ActivityGroup.HI if p[2] > p[0] + p[1] else ActivityGroup.LO


def _vote_nancy_high(p: np.ndarray) -> ActivityGroup:
    if len(p) == 3:
        return ActivityGroup.HI
    return ActivityGroup.HI if p[1] + p[2] + p[3] > p[0] else ActivityGroup.LO


def group_vote(outputs: TaskOutputs):
    """Each model casts one Lo/Hi vote; returns (majority group, votes).

    Specialist votes compare grouped probability mass; ties go to Lo.
    """
    votes = (_vote_neutrophil(outputs.neutrophil),
             _vote_nancy_low(outputs.nancy_low),
             _vote_nancy_high(outputs.nancy_high))
    n_hi = sum(v is ActivityGroup.HI for v in votes)
    return (ActivityGroup.HI if n_hi >= 2 else ActivityGroup.LO), votes


def final_grade(outputs: TaskOutputs, group: ActivityGroup) -> int:
    """Argmax over the delegated specialist's concrete grade classes only."""
    if group is ActivityGroup.LO:
        p = outputs.nancy_low
        grades = p[:2]                    # classes 0, 1 in both layouts
        return int(np.argmax(grades))     # first max -> lower grade on ties
    p = outputs.nancy_high
    grades = p[1:] if len(p) == 4 else p  # drop the Lo placeholder
    return 2 + int(np.argmax(grades))


def ensemble_predict(outputs: TaskOutputs) -> FinalPrediction:
    group, votes = group_vote(outputs)
    return FinalPrediction(
        grade=final_grade(outputs, group),
        group=group,
        votes=votes,
        delegated_task=(TaskKind.NANCY_LOW if group is ActivityGroup.LO
                        else TaskKind.NANCY_HIGH),
        strategy=Strategy.ENSEMBLE,
    )


def hierarchical_gate(outputs: TaskOutputs) -> FinalPrediction:
    """Baseline: the neutrophil model alone decides the activity group."""
    _, votes = group_vote(outputs)
    group = votes[0]
    return FinalPrediction(
        grade=final_grade(outputs, group),
        group=group,
        votes=votes,
        delegated_task=(TaskKind.NANCY_LOW if group is ActivityGroup.LO
                        else TaskKind.NANCY_HIGH),
        strategy=Strategy.GATE,
    )


def predict_final(outputs: TaskOutputs, strategy: Strategy) -> FinalPrediction:
    if strategy is Strategy.ENSEMBLE:
        return ensemble_predict(outputs)
    return hierarchical_gate(outputs)
