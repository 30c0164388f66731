"""Domain types shared by every module, and the preference-label convention.

Label convention used throughout the package:

    y = 0.0  ->  seg0 preferred
    y = 1.0  ->  seg1 preferred
    y = 0.5  ->  equal preference

Privileged (predefined task) rewards ride along with each segment but are
only reachable through :meth:`TrajectorySegment.oracle_rewards`, which
counts every access by purpose so training code can prove it never looked.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

LEGAL_LABELS = (0.0, 0.5, 1.0)

# purpose -> number of privileged-reward reads; see TrajectorySegment.oracle_rewards
privileged_access = Counter()


class InvalidLabelError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class Preferred(enum.Enum):
    FIRST = "first"
    SECOND = "second"
    EQUAL = "equal"


class Source(enum.Enum):
    SAMPLED = "sampled"
    AUGMENTED = "augmented"


Span = tuple[int, int]


@dataclass(frozen=True)
class StateLayout:
    """Where each channel lives inside a flat state vector.

    Spans are half-open ``(start, stop)`` index pairs. Channels that a task
    lacks (grip, obj) are ``None``.
    """

    total_dims: int
    tcp: Span
    prev_tcp: Span
    target: Span
    grip: Span | None = None
    obj: Span | None = None
    prev_grip: Span | None = None
    prev_obj: Span | None = None

    def __post_init__(self):
        if self.total_dims < 1:
            raise LayoutError("total_dims must be positive")
        covered = []
        for name, span in self.spans().items():
            start, stop = span
            if not 0 <= start < stop <= self.total_dims:
                raise LayoutError(f"{name} span {span} outside [0, {self.total_dims})")
            covered.extend(range(start, stop))
        if sorted(covered) != list(range(self.total_dims)):
            raise LayoutError("channel spans must be disjoint and cover every dimension")
        for cur, prev in (("tcp", "prev_tcp"), ("grip", "prev_grip"), ("obj", "prev_obj")):
            a, b = getattr(self, cur), getattr(self, prev)
            if (a is None) != (b is None):
                raise LayoutError(f"{cur} and {prev} must both be present or both absent")
            if a is not None and a[1] - a[0] != b[1] - b[0]:
                raise LayoutError(f"{prev} must mirror the width of {cur}")

    def spans(self) -> dict[str, Span]:
        names = ("tcp", "grip", "obj", "prev_tcp", "prev_grip", "prev_obj", "target")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def slice(self, name: str) -> slice:
        span = getattr(self, name)
        if span is None:
            raise LayoutError(f"layout has no {name} channel")
        return slice(*span)

    @property
    def position_dims(self) -> int:
        return self.tcp[1] - self.tcp[0]

    def current_to_previous(self) -> list[tuple[slice, slice]]:
        pairs = [(self.slice("tcp"), self.slice("prev_tcp"))]
        if self.grip is not None:
            pairs.append((self.slice("grip"), self.slice("prev_grip")))
        if self.obj is not None:
            pairs.append((self.slice("obj"), self.slice("prev_obj")))
        return pairs


# (3 + 1 + 3) x 2 + 3: tcp, grip, obj for current and previous step, then target
MANIPULATION_LAYOUT = StateLayout(
    total_dims=17,
    tcp=(0, 3),
    grip=(3, 4),
    obj=(4, 7),
    prev_tcp=(7, 10),
    prev_grip=(10, 11),
    prev_obj=(11, 14),
    target=(14, 17),
)
# 3 x 2 + 3
REACH_LAYOUT = StateLayout(total_dims=9, tcp=(0, 3), prev_tcp=(3, 6), target=(6, 9))
# 2 x 2 + 2
MAZE_LAYOUT = StateLayout(total_dims=6, tcp=(0, 2), prev_tcp=(2, 4), target=(4, 6))


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class State:
    values: np.ndarray
    layout: StateLayout

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != (self.layout.total_dims,):
            raise LayoutError(f"state has shape {values.shape}, layout wants ({self.layout.total_dims},)")
        if not np.all(np.isfinite(values)):
            raise LayoutError("state contains non-finite values")
        object.__setattr__(self, "values", values)

    def channel(self, name: str) -> np.ndarray:
        return self.values[self.layout.slice(name)]


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    """H consecutive states from one episode.

    ``synthetic`` marks LLM-generated segments, whose privileged rewards are
    zero-filled placeholders that no oracle may score.
    """

    states: np.ndarray
    layout: StateLayout
    privileged_rewards: np.ndarray = field(repr=False)
    actions: np.ndarray | None = None
    episode_id: int = -1
    start_step: int = 0
    synthetic: bool = False

    def __post_init__(self):
        states = _frozen(self.states)
        if states.ndim != 2 or states.shape[1] != self.layout.total_dims:
            raise LayoutError(f"segment states have shape {states.shape}")
        if not np.all(np.isfinite(states)):
            raise LayoutError("segment contains non-finite states")
        rewards = _frozen(self.privileged_rewards)
        if rewards.shape != (states.shape[0],):
            raise LayoutError("privileged_rewards must have one entry per state")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "privileged_rewards", rewards)
        if self.actions is not None:
            actions = _frozen(self.actions)
            if actions.shape[0] != states.shape[0]:
                raise LayoutError("actions must have one row per state")
            object.__setattr__(self, "actions", actions)

    def __len__(self):
        return self.states.shape[0]

    @property
    def H(self) -> int:
        return self.states.shape[0]

    def state(self, i: int) -> State:
        return State(self.states[i], self.layout)

    def oracle_rewards(self, purpose: str) -> np.ndarray:
        """Privileged per-step rewards. Every call is tallied under ``purpose``."""
        privileged_access[purpose] += 1
        return self.privileged_rewards

    def oracle_return(self, purpose: str) -> float:
        return float(np.sum(self.oracle_rewards(purpose)))


@dataclass(frozen=True, eq=False)
class PreferenceTriple:
    seg0: TrajectorySegment
    seg1: TrajectorySegment
    label: float
    source: Source = Source.SAMPLED

    def __post_init__(self):
        label = float(self.label)
        if label not in LEGAL_LABELS:
            raise InvalidLabelError(f"label must be one of {LEGAL_LABELS}, got {self.label!r}")
        object.__setattr__(self, "label", label)
        if self.seg0.layout != self.seg1.layout:
            raise LayoutError("segments of a triple must share one layout")
        if self.source is Source.AUGMENTED and (label != 0.0 or not self.seg0.synthetic):
            raise InvalidLabelError("augmented triples carry label 0 with the generated segment first")


def preferred_index(triple_or_label) -> Preferred:
    label = triple_or_label.label if isinstance(triple_or_label, PreferenceTriple) else triple_or_label
    try:
        label = float(label)
    except (TypeError, ValueError):
        raise InvalidLabelError(f"not a label: {label!r}") from None
    if label == 0.0:
        return Preferred.FIRST
    if label == 1.0:
        return Preferred.SECOND
    if label == 0.5:
        return Preferred.EQUAL
    raise InvalidLabelError(f"label must be one of {LEGAL_LABELS}, got {label!r}")
