"""Trajectory text grammar, prompt construction, and strict reply parsing.

A trajectory block looks like::

    {
        "tcp":[
            [-0.0567,0.8098,0.4486],[-0.0652,0.8094,0.4480],...,
            [-0.1080,0.7924,0.4709],[-0.1078,0.7896,0.4745]
        ],
        "obj":[
            ...
        ],
        "target":
            [-0.0229,0.7739,0.1150];
    };

Every number carries exactly four decimals. Only current-step positions are
written; previous-step slices and the gripper channel are left out and
rebuilt by :func:`generated_to_segment`.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from importlib import resources
from string import Template

import numpy as np

from .core import State, TrajectorySegment
from .envs import TaskSpec

DECIMALS = 4
POINTS_PER_LINE = 4
BOUNDS_MARGIN = 1.0
INITIAL_STATE_TOL = 5e-4
TEMPLATE_VERSION = "v1"


class Verdict(enum.Enum):
    FIRST = 1
    SECOND = 2
    UNSURE = 0


class UnparseableReplyError(ValueError):
    """The judge reply holds no line that is exactly 0, 1 or 2."""


class TrajectoryError(ValueError):
    NO_BLOCK = "no-block-found"
    STEP_COUNT = "wrong-step-count"
    MALFORMED = "malformed-number"
    OUT_OF_BOUNDS = "out-of-bounds"
    INITIAL_STATE = "wrong-initial-state"

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


@dataclass(frozen=True)
class TrajectoryText:
    raw: str
    H: int
    keys: tuple[str, ...]


@dataclass(frozen=True)
class JudgeReply:
    raw: str
    verdict: Verdict


@dataclass(frozen=True, eq=False)
class GeneratedTrajectory:
    channels: dict[str, np.ndarray]
    target: np.ndarray

    @property
    def H(self) -> int:
        return next(iter(self.channels.values())).shape[0]


# ---------------------------------------------------------------------------
# serialization


def format_number(x: float) -> str:
    # "%.4f" rounds the exact binary value half-to-even
    s = f"{float(x):.{DECIMALS}f}"
    return "0.0000" if s == "-0.0000" else s


def format_point(p) -> str:
    return "[" + ",".join(format_number(v) for v in p) + "]"


def _format_point_list(points) -> str:
    rendered = [format_point(p) for p in points]
    rows = [",".join(rendered[i : i + POINTS_PER_LINE]) for i in range(0, len(rendered), POINTS_PER_LINE)]
    return ",\n".join("        " + r for r in rows)


def format_block(channels: dict[str, np.ndarray], target) -> str:
    parts = ["{"]
    for name, points in channels.items():
        parts.append(f'    "{name}":[')
        parts.append(_format_point_list(points))
        parts.append("    ],")
    parts.append('    "target":')
    parts.append("        " + format_point(target) + ";")
    parts.append("};")
    return "\n".join(parts)


def segment_channels(states: np.ndarray, task: TaskSpec) -> tuple[dict[str, np.ndarray], np.ndarray]:
    channels = {name: states[:, task.channel_slice(name)] for name in task.channels if name != "target"}
    return channels, states[0, task.channel_slice("target")]


def serialize_segment(segment: TrajectorySegment, task: TaskSpec) -> TrajectoryText:
    if segment.layout != task.layout:
        raise ValueError(f"segment layout does not match task {task.name}")
    channels, target = segment_channels(segment.states, task)
    return TrajectoryText(format_block(channels, target), segment.H, task.channels)


# ---------------------------------------------------------------------------
# templates


def load_template(name: str) -> Template:
    text = resources.files("selfaug_pbrl.templates").joinpath(f"{name}_{TEMPLATE_VERSION}.txt").read_text()
    return Template(text)


def build_judge_prompt(text_a: TrajectoryText | str, text_b: TrajectoryText | str, task: TaskSpec, H: int, one_shot: bool = False) -> str:
    raw_a = text_a.raw if isinstance(text_a, TrajectoryText) else text_a
    raw_b = text_b.raw if isinstance(text_b, TrajectoryText) else text_b
    prompt = load_template("judge").substitute(
        goal=task.task_goal_text,
        steps=H,
        legend="\n".join(task.legend),
        trajectory_1=raw_a,
        trajectory_2=raw_b,
    )
    if one_shot:
        prompt += load_template("oneshot").template
    return prompt.rstrip("\n")


def first_state_block(text: TrajectoryText | str, task: TaskSpec) -> str:
    raw = text.raw if isinstance(text, TrajectoryText) else text
    channels, target = parse_trajectory_block(raw, task)
    return format_block({k: v[:1] for k, v in channels.items()}, target)


def build_generate_prompt(better_text: TrajectoryText | str, task: TaskSpec, H: int) -> str:
    return (
        load_template("generate")
        .substitute(
            hints="\n".join(task.generation_hints),
            format_index=len(task.generation_hints) + 1,
            steps=H,
            first_state=first_state_block(better_text, task),
        )
        .rstrip("\n")
    )


# ---------------------------------------------------------------------------
# parsing

_EMPHASIS = "*_`"
_KEY_RE = re.compile(r'"([A-Za-z_][A-Za-z0-9_]*)"\s*:')
_POINT_RE = re.compile(r"\[([^\[\]]*)\]")


def parse_judge_reply(raw: str) -> JudgeReply:
    """The last line that is exactly 0, 1 or 2 (markdown emphasis allowed) is the verdict."""
    for line in reversed(raw.splitlines()):
        token = line.strip().strip(_EMPHASIS).strip()
        if token in ("0", "1", "2"):
            return JudgeReply(raw, Verdict(int(token)))
    raise UnparseableReplyError("no line consisting of 0, 1 or 2")


def outermost_block(raw: str, start: int = 0) -> tuple[int, int]:
    """Span of the first balanced ``{...}`` block at or after ``start``."""
    open_at = raw.find("{", start)
    if open_at < 0:
        raise TrajectoryError(TrajectoryError.NO_BLOCK, "no opening brace")
    depth = 0
    for i in range(open_at, len(raw)):
        if raw[i] == "{":
            depth += 1
        elif raw[i] == "}":
            depth -= 1
            if depth == 0:
                return open_at, i + 1
    raise TrajectoryError(TrajectoryError.NO_BLOCK, "unbalanced braces")


def _parse_points(region: str, dims: int, key: str) -> np.ndarray:
    points = []
    for m in _POINT_RE.finditer(region):
        tokens = [t.strip() for t in m.group(1).split(",")]
        if tokens and tokens[-1] == "":
            tokens = tokens[:-1]
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            raise TrajectoryError(TrajectoryError.MALFORMED, f"{key}: {m.group(0)!r}") from None
        if len(values) != dims or not all(np.isfinite(values)):
            raise TrajectoryError(TrajectoryError.MALFORMED, f"{key}: {m.group(0)!r}")
        points.append(values)
    return np.array(points, dtype=np.float64).reshape(-1, dims)


def parse_trajectory_block(raw: str, task: TaskSpec, start: int = 0) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Channels and target of the first block in ``raw``; no length or range checks."""
    lo, hi = outermost_block(raw, start)
    block = raw[lo:hi]
    keys = list(_KEY_RE.finditer(block))
    regions = {}
    for i, m in enumerate(keys):
        end = keys[i + 1].start() if i + 1 < len(keys) else len(block)
        regions.setdefault(m.group(1), block[m.end() : end])
    dims = task.layout.position_dims
    channels = {}
    for name in task.channels:
        if name == "target":
            continue
        channels[name] = _parse_points(regions.get(name, ""), dims, name)
    if "target" not in regions:
        raise TrajectoryError(TrajectoryError.STEP_COUNT, "target missing")
    target = _parse_points(regions["target"], dims, "target")
    if target.shape[0] != 1:
        raise TrajectoryError(TrajectoryError.STEP_COUNT, f"target has {target.shape[0]} points")
    return channels, target[0]


def parse_generated_trajectory(raw: str, task: TaskSpec, H: int, required_first_state: State | np.ndarray) -> GeneratedTrajectory:
    """Parse and validate an LLM-written trajectory; raises TrajectoryError with a code."""
    first = required_first_state.values if isinstance(required_first_state, State) else np.asarray(required_first_state)
    channels, target = parse_trajectory_block(raw, task)
    for name, pts in channels.items():
        if pts.shape[0] != H:
            raise TrajectoryError(TrajectoryError.STEP_COUNT, f"{name} has {pts.shape[0]} points, expected {H}")
    lo, hi = task.coord_lo - BOUNDS_MARGIN, task.coord_hi + BOUNDS_MARGIN
    for name, pts in list(channels.items()) + [("target", target[None, :])]:
        if np.any(pts < lo) or np.any(pts > hi):
            raise TrajectoryError(TrajectoryError.OUT_OF_BOUNDS, name)
    for name, pts in list(channels.items()) + [("target", target[None, :])]:
        want = first[task.channel_slice(name)]
        if np.max(np.abs(pts[0] - want)) > INITIAL_STATE_TOL:
            raise TrajectoryError(TrajectoryError.INITIAL_STATE, f"{name} starts at {pts[0]}, expected {want}")
    return GeneratedTrajectory(channels, target)


def generated_to_segment(gen: GeneratedTrajectory, template: TrajectorySegment, task: TaskSpec) -> TrajectorySegment:
    """Rebuild full states from a generated trajectory.

    Current-step slices come from the text; previous-step slices shift the
    generated points by one step (step 0 keeps the template's previous
    slices); the gripper is copied step by step from the template.
    """
    lay = task.layout
    H = gen.H
    if H != template.H:
        raise ValueError("generated trajectory and template differ in length")
    states = np.array(template.states, copy=True)
    for name, pts in gen.channels.items():
        cur = task.channel_slice(name)
        prev = lay.slice("prev_tcp") if cur == lay.slice("tcp") else lay.slice("prev_" + name)
        states[:, cur] = pts
        states[1:, prev] = pts[:-1]
        states[0, prev] = template.states[0, prev]
    if lay.grip is not None:
        states[1:, lay.slice("prev_grip")] = template.states[:-1, lay.slice("grip")]
    states[:, lay.slice("target")] = gen.target
    return TrajectorySegment(
        states=states,
        layout=lay,
        privileged_rewards=np.zeros(H),
        episode_id=template.episode_id,
        start_step=template.start_step,
        synthetic=True,
    )
