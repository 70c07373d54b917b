"""Shared domain types: grades, activity groups, task label spaces, tiles, bags.

The five-grade ordinal index (0..4) is split into two activity groups,
Lo = {0, 1} and Hi = {2, 3, 4}. Three task label spaces are derived from
that split; each grade maps to exactly one class of each task.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DataError

GRADES = (0, 1, 2, 3, 4)


class ActivityGroup(str, Enum):
    LO = "Lo"
    HI = "Hi"


class TaskKind(str, Enum):
    NEUTROPHIL = "neutrophil"
    NANCY_LOW = "nancy-low"
    NANCY_HIGH = "nancy-high"


class LinkKind(str, Enum):
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


def check_grade(value: int) -> int:
    if not isinstance(value, (int, np.integer)) or not 0 <= int(value) <= 4:
        raise DataError(f"grade must be an integer in [0, 4], got {value!r}")
    return int(value)


def group_of(grade: int) -> ActivityGroup:
    """Lo for grades 0-1, Hi for grades 2-4."""
    check_grade(grade)
    return ActivityGroup.LO if grade <= 1 else ActivityGroup.HI


@dataclass(frozen=True)
class TaskSpec:
    """One of the three task label spaces.

    classes is the fixed, serialized class order. specific_classes are the
    classes that correspond to concrete grades (group placeholders "Lo"/"Hi"
    excluded).
    """

    kind: TaskKind
    classes: tuple[str, ...]
    link: LinkKind
    specific_classes: frozenset[str] = field(default_factory=frozenset)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def head_dim(self) -> int:
        # the sigmoid task uses a single logit for P(Hi)
        return 1 if self.link is LinkKind.SIGMOID else len(self.classes)

    def map_label(self, grade: int) -> int:
        """Map a grade to this task's class index. Total over grades 0-4."""
        check_grade(grade)
        if self.kind is TaskKind.NEUTROPHIL:
            return 0 if grade <= 1 else 1
        if self.kind is TaskKind.NANCY_LOW:
            if "Hi" in self.classes:
                return grade if grade <= 1 else self.classes.index("Hi")
            # reduced gate-mode variant: only Lo grades are valid
            if grade <= 1:
                return grade
            raise DataError(f"grade {grade} not representable by {self.classes}")
        # NANCY_HIGH
        if "Lo" in self.classes:
            return 0 if grade <= 1 else self.classes.index(str(grade))
        if grade >= 2:
            return self.classes.index(str(grade))
        raise DataError(f"grade {grade} not representable by {self.classes}")

    def class_of(self, grade: int) -> str:
        return self.classes[self.map_label(grade)]


NEUTROPHIL = TaskSpec(
    kind=TaskKind.NEUTROPHIL,
    classes=("Lo", "Hi"),
    link=LinkKind.SIGMOID,
)
NANCY_LOW = TaskSpec(
    kind=TaskKind.NANCY_LOW,
    classes=("0", "1", "Hi"),
    link=LinkKind.SOFTMAX,
    specific_classes=frozenset({"0", "1"}),
)
NANCY_HIGH = TaskSpec(
    kind=TaskKind.NANCY_HIGH,
    classes=("Lo", "2", "3", "4"),
    link=LinkKind.SOFTMAX,
    specific_classes=frozenset({"2", "3", "4"}),
)

TASKS: dict[TaskKind, TaskSpec] = {
    TaskKind.NEUTROPHIL: NEUTROPHIL,
    TaskKind.NANCY_LOW: NANCY_LOW,
    TaskKind.NANCY_HIGH: NANCY_HIGH,
}


def reduced_task(task: TaskSpec) -> TaskSpec:
    """Gate-mode variant of a specialist: the group placeholder class dropped.

    Only meaningful for the two specialist tasks; the binary task is returned
    unchanged.
    """
    if task.kind is TaskKind.NANCY_LOW:
        return TaskSpec(task.kind, ("0", "1"), LinkKind.SOFTMAX,
                        frozenset({"0", "1"}))
    if task.kind is TaskKind.NANCY_HIGH:
        return TaskSpec(task.kind, ("2", "3", "4"), LinkKind.SOFTMAX,
                        frozenset({"2", "3", "4"}))
    return task


def task_by_name(name: str) -> TaskSpec:
    for kind, spec in TASKS.items():
        if kind.value == name:
            return spec
    raise DataError(f"unknown task {name!r}; expected one of "
                    f"{[k.value for k in TASKS]}")


@dataclass(frozen=True)
class TileRef:
    """Geometric reference to one tile within a slide pyramid level."""

    slide_id: str
    level: int
    x: int
    y: int
    width: int
    height: int
    microns_per_pixel: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"tile size must be positive: {self}")
        if self.x < 0 or self.y < 0:
            raise DataError(f"tile origin must be nonnegative: {self}")
        if self.microns_per_pixel <= 0:
            raise DataError(f"microns_per_pixel must be positive: {self}")


@dataclass
class EmbeddingBag:
    """One slide's bag: tile refs, embedding matrix, and the weak slide label.

    Supervision is slide-/case-level only: there are no per-tile labels
    anywhere in the data model.
    """

    slide_id: str
    case_id: str
    tiles: list[TileRef]
    embeddings: np.ndarray  # (N, d) float
    label: int
    center: str = ""

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] == 0:
            raise DataError(
                f"bag {self.slide_id}: embeddings must be a nonempty (N, d) "
                f"matrix, got shape {self.embeddings.shape}")
        if len(self.tiles) != self.embeddings.shape[0]:
            raise DataError(
                f"bag {self.slide_id}: {len(self.tiles)} tile refs vs "
                f"{self.embeddings.shape[0]} embedding rows")
        if not np.all(np.isfinite(self.embeddings)):
            raise DataError(f"bag {self.slide_id}: non-finite embedding values")
        check_grade(self.label)

    @property
    def n_tiles(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]
