"""Desk-scale analytic tasks with the tcp/obj/target state structure.

Every task is a pure transition function over flat state vectors plus a thin
:class:`Env` wrapper that tracks the step counter. Positions move by
``0.05 * action`` per step and are clamped to the task's coordinate box.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import MANIPULATION_LAYOUT, MAZE_LAYOUT, REACH_LAYOUT, State, StateLayout

STEP_SCALE = 0.05
GRIP_SCALE = 0.1
BUTTON_CONTACT = 0.03
DRAWER_CONTACT = 0.04
DRAWER_TRAVEL = 0.2
BUTTON_TRAVEL = 0.0936

ARM_LO = np.array([-0.5, 0.4, 0.0])
ARM_HI = np.array([0.5, 0.9, 0.5])
MAZE_LO = np.array([0.0, 0.0])
MAZE_HI = np.array([1.0, 1.0])

_TCP_LEGEND = (
    '"tcp" represents the end position of the robot actuator, which is expressed in '
    "three-dimensional Cartesian coordinates in the range of [0,1];"
)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    layout: StateLayout
    action_dims: int
    episode_len: int
    success_radius: float
    task_goal_text: str
    coord_lo: np.ndarray = field(repr=False)
    coord_hi: np.ndarray = field(repr=False)
    legend: tuple[str, ...] = field(default=(), repr=False)
    generation_hints: tuple[str, ...] = field(default=(), repr=False)
    position_key: str = "tcp"
    walls: tuple[tuple[float, float, float, float], ...] = ()

    def __post_init__(self):
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")
        if self.episode_len < 1:
            raise ValueError("episode_len must be positive")

    @property
    def channels(self) -> tuple[str, ...]:
        """Serialized channels, in prompt order (target last)."""
        names = [self.position_key]
        if self.layout.obj is not None:
            names.append("obj")
        return tuple(names) + ("target",)

    def channel_slice(self, name: str) -> slice:
        return self.layout.slice("tcp" if name == self.position_key else name)

    def with_episode_len(self, episode_len: int) -> "TaskSpec":
        return replace(self, episode_len=episode_len)


@dataclass(frozen=True)
class StepResult:
    next_state: State
    privileged_reward: float
    success: bool
    terminal: bool


def _rect_walls(x0, y0, x1, y1):
    return ((x0, y0, x1, y0), (x1, y0, x1, y1), (x1, y1, x0, y1), (x0, y1, x0, y0))


UMAZE_BLOCK = (0.0, 0.4, 0.65, 0.6)

TASKS: dict[str, TaskSpec] = {
    "point_reach": TaskSpec(
        name="point_reach",
        layout=REACH_LAYOUT,
        action_dims=3,
        episode_len=100,
        success_radius=0.05,
        task_goal_text="control the Tool Center Point (TCP) of the robot to reach a goal position",
        coord_lo=ARM_LO,
        coord_hi=ARM_HI,
        legend=(
            "(1) " + _TCP_LEGEND,
            '(2) "target" represents the goal position the TCP needs to reach, which is expressed '
            "in three-dimensional Cartesian coordinates in the range of [0,1];",
        ),
        generation_hints=(
            "(1) The movement of TCP should be smooth, avoid sudden changes in coordinates and "
            "finally the TCP should reach the target and stay there;",
        ),
    ),
    "button_press_lite": TaskSpec(
        name="button_press_lite",
        layout=MANIPULATION_LAYOUT,
        action_dims=4,
        episode_len=100,
        success_radius=0.02,
        task_goal_text="control the Tool Center Point (TCP) of the robot to press a button",
        coord_lo=ARM_LO,
        coord_hi=ARM_HI,
        legend=(
            "(1) " + _TCP_LEGEND,
            '(2) "obj" represents the object position that the robot needs to touch, which is '
            "expressed in three-dimensional Cartesian coordinates in the range of [0,1];",
            '(3) "target" represents the position of the target button, which is expressed in '
            "three-dimensional Cartesian coordinates in the range of [0,1];",
        ),
        generation_hints=(
            "(1) The movement of TCP should be smooth and touch obj as quickly as possible, then the "
            "change of obj should conform to the laws of physics, change smoothly, avoid sudden changes "
            "in coordinates and finally the obj should reach the target;",
            "(2) TCP should first move to the position of obj, that is, the coordinates of TCP and obj "
            "should be at similar values, and then push obj to move;",
        ),
    ),
    "drawer_open_lite": TaskSpec(
        name="drawer_open_lite",
        layout=MANIPULATION_LAYOUT,
        action_dims=4,
        episode_len=100,
        success_radius=0.02,
        task_goal_text="control the Tool Center Point (TCP) of the robot to grab the drawer handle and pull the drawer open",
        coord_lo=ARM_LO,
        coord_hi=ARM_HI,
        legend=(
            "(1) " + _TCP_LEGEND,
            '(2) "obj" represents the position of the drawer handle the robot needs to grab, which is '
            "expressed in three-dimensional Cartesian coordinates in the range of [0,1];",
            '(3) "target" represents the position of the handle when the drawer is open, which is '
            "expressed in three-dimensional Cartesian coordinates in the range of [0,1];",
        ),
        generation_hints=(
            "(1) The movement of TCP should be smooth and reach obj as quickly as possible, then the "
            "change of obj should change smoothly, avoid sudden changes in coordinates and finally the "
            "obj should reach the target;",
            "(2) TCP should first move to the position of obj, that is, the coordinates of TCP and obj "
            "should be at similar values, and then pull obj to move;",
        ),
    ),
    "drawer_close_lite": TaskSpec(
        name="drawer_close_lite",
        layout=MANIPULATION_LAYOUT,
        action_dims=4,
        episode_len=100,
        success_radius=0.02,
        task_goal_text="control the Tool Center Point (TCP) of the robot to push and close a drawer",
        coord_lo=ARM_LO,
        coord_hi=ARM_HI,
        legend=(
            "(1) " + _TCP_LEGEND,
            '(2) "obj" represents the position of the drawer handle the robot needs to touch, which is '
            "expressed in three-dimensional Cartesian coordinates in the range of [0,1];",
            '(3) "target" represents the position of the handle when the drawer is closed, which is '
            "expressed in three-dimensional Cartesian coordinates in the range of [0,1];",
        ),
        generation_hints=(
            "(1) The movement of TCP should be smooth and reach obj as quickly as possible, then the "
            "change of obj should change smoothly, avoid sudden changes in coordinates and finally the "
            "obj should reach the target;",
            "(2) TCP should first move to the position of obj, that is, the coordinates of TCP and obj "
            "should be at similar values, and then push obj to move;",
        ),
    ),
    "maze_open": TaskSpec(
        name="maze_open",
        layout=MAZE_LAYOUT,
        action_dims=2,
        episode_len=100,
        success_radius=0.05,
        task_goal_text="move the point ball through the maze to the target position",
        coord_lo=MAZE_LO,
        coord_hi=MAZE_HI,
        legend=(
            '(1) "pos" represents the position of the point ball, which is expressed in '
            "two-dimensional Cartesian coordinates in the range of [0,1];",
            '(2) "target" represents the target position, which is expressed in two-dimensional '
            "Cartesian coordinates in the range of [0,1];",
        ),
        generation_hints=(
            "(1) The movement of the ball should be smooth, avoid sudden changes in coordinates and "
            "finally the ball should reach the target and stay there;",
        ),
        position_key="pos",
    ),
    "maze_umaze": TaskSpec(
        name="maze_umaze",
        layout=MAZE_LAYOUT,
        action_dims=2,
        episode_len=100,
        success_radius=0.05,
        task_goal_text=(
            "move the point ball through a U-shaped maze to the target position; a wall block covers "
            "x in [0.00,0.65], y in [0.40,0.60] and must be walked around"
        ),
        coord_lo=MAZE_LO,
        coord_hi=MAZE_HI,
        legend=(
            '(1) "pos" represents the position of the point ball, which is expressed in '
            "two-dimensional Cartesian coordinates in the range of [0,1];",
            '(2) "target" represents the target position, which is expressed in two-dimensional '
            "Cartesian coordinates in the range of [0,1];",
        ),
        generation_hints=(
            "(1) The movement of the ball should be smooth, never pass through the wall block, avoid "
            "sudden changes in coordinates and finally the ball should reach the target and stay there;",
        ),
        position_key="pos",
        walls=_rect_walls(*UMAZE_BLOCK),
    ),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


# ---------------------------------------------------------------------------
# initial states


def initial_vector(task: TaskSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5EED])
    lay = task.layout
    x = np.zeros(lay.total_dims)
    name = task.name
    if name == "point_reach":
        tcp = rng.uniform(ARM_LO, ARM_HI)
        target = rng.uniform(ARM_LO, ARM_HI)
    elif name in ("maze_open", "maze_umaze"):
        if name == "maze_open":
            tcp = rng.uniform([0.05, 0.05], [0.95, 0.95])
            target = rng.uniform([0.05, 0.05], [0.95, 0.95])
        else:
            tcp = rng.uniform([0.05, 0.05], [0.5, 0.3])
            target = rng.uniform([0.05, 0.7], [0.5, 0.95])
    else:
        tcp = rng.uniform(ARM_LO, ARM_HI)
        if name == "button_press_lite":
            obj = np.array([rng.uniform(-0.3, 0.3), rng.uniform(0.6, 0.7), 0.115])
            target = obj + np.array([0.0, BUTTON_TRAVEL, 0.0])
        elif name == "drawer_open_lite":
            obj = np.array([rng.uniform(-0.2, 0.2), rng.uniform(0.75, 0.85), 0.09])
            target = obj - np.array([0.0, DRAWER_TRAVEL, 0.0])
        elif name == "drawer_close_lite":
            obj = np.array([rng.uniform(-0.2, 0.2), rng.uniform(0.55, 0.65), 0.09])
            target = obj + np.array([0.0, DRAWER_TRAVEL, 0.0])
        else:  # pragma: no cover - registry and this switch are kept in sync
            raise KeyError(name)
        x[lay.slice("obj")] = obj
        x[lay.slice("prev_obj")] = obj
        x[lay.slice("grip")] = 1.0
        x[lay.slice("prev_grip")] = 1.0
    x[lay.slice("tcp")] = tcp
    x[lay.slice("prev_tcp")] = tcp
    x[lay.slice("target")] = target
    return x


def reset(task: TaskSpec, seed: int) -> State:
    """Randomized initial state; identical seeds give identical states."""
    return State(initial_vector(task, seed), task.layout)


# ---------------------------------------------------------------------------
# dynamics


def _orient(ax, ay, bx, by, cx, cy):
    v = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return 0 if v == 0 else (1 if v > 0 else -1)


def _on_segment(ax, ay, bx, by, cx, cy):
    return min(ax, bx) <= cx <= max(ax, bx) and min(ay, by) <= cy <= max(ay, by)


def segments_intersect(p, q, wall) -> bool:
    """True if segment p-q touches the wall segment (x0, y0, x1, y1)."""
    x0, y0, x1, y1 = wall
    o1 = _orient(p[0], p[1], q[0], q[1], x0, y0)
    o2 = _orient(p[0], p[1], q[0], q[1], x1, y1)
    o3 = _orient(x0, y0, x1, y1, p[0], p[1])
    o4 = _orient(x0, y0, x1, y1, q[0], q[1])
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and _on_segment(p[0], p[1], q[0], q[1], x0, y0):
        return True
    if o2 == 0 and _on_segment(p[0], p[1], q[0], q[1], x1, y1):
        return True
    if o3 == 0 and _on_segment(x0, y0, x1, y1, p[0], p[1]):
        return True
    if o4 == 0 and _on_segment(x0, y0, x1, y1, q[0], q[1]):
        return True
    return False


def transition(task: TaskSpec, x: np.ndarray, action) -> tuple[np.ndarray, float, bool]:
    """Pure dynamics: ``(next_vector, privileged_reward, success)``."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (task.action_dims,):
        raise ValueError(f"action has shape {a.shape}, task {task.name} expects ({task.action_dims},)")
    a = np.clip(a, -1.0, 1.0)
    lay = task.layout
    tcp_s, target_s = lay.slice("tcp"), lay.slice("target")
    nxt = x.copy()
    for cur, prev in lay.current_to_previous():
        nxt[prev] = x[cur]
    tcp = x[tcp_s]
    move = STEP_SCALE * a[: lay.position_dims]
    new_tcp = np.clip(tcp + move, task.coord_lo, task.coord_hi)
    if task.walls and any(segments_intersect(tcp, new_tcp, w) for w in task.walls):
        new_tcp = tcp.copy()
    nxt[tcp_s] = new_tcp
    target = x[target_s]

    if lay.obj is None:
        dist = float(np.linalg.norm(new_tcp - target))
        return nxt, -dist, dist < task.success_radius

    obj_s, grip_s = lay.slice("obj"), lay.slice("grip")
    nxt[grip_s] = np.clip(x[grip_s] + GRIP_SCALE * a[3], 0.0, 1.0)
    obj = x[obj_s].copy()
    delta = new_tcp - tcp
    contact = float(np.linalg.norm(tcp - obj))
    if task.name == "button_press_lite":
        if contact < BUTTON_CONTACT and a[1] > 0:
            obj[1] = min(obj[1] + max(delta[1], 0.0), target[1])
    else:
        if contact < DRAWER_CONTACT and a[3] < 0:
            if task.name == "drawer_open_lite":
                lo, hi = target[1], target[1] + DRAWER_TRAVEL
            else:
                lo, hi = target[1] - DRAWER_TRAVEL, target[1]
            obj[1] = float(np.clip(obj[1] + delta[1], lo, hi))
    nxt[obj_s] = obj
    obj_dist = float(np.linalg.norm(obj - target))
    reward = -float(np.linalg.norm(new_tcp - obj)) - 2.0 * obj_dist
    return nxt, reward, obj_dist < task.success_radius


def step(task: TaskSpec, state: State, action) -> tuple[State, float, bool]:
    nxt, reward, success = transition(task, state.values, action)
    return State(nxt, task.layout), reward, success


def episode_success(success_flags) -> bool:
    """Success must be reached at some step and held through the final step."""
    flags = [bool(f) for f in success_flags]
    # "reached and held to the end" collapses to the final flag
    return bool(flags) and flags[-1]


class Env:
    """Single-owner episode runner around :func:`transition`."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.t = 0
        self.x: np.ndarray | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.x = initial_vector(self.task, seed)
        self.t = 0
        return self.x.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        if self.x is None:
            raise RuntimeError("call reset() first")
        if self.t >= self.task.episode_len:
            raise RuntimeError("episode already terminated")
        self.x, reward, success = transition(self.task, self.x, action)
        self.t += 1
        return self.x.copy(), reward, success, self.t == self.task.episode_len

    def step_result(self, action) -> StepResult:
        x, reward, success, terminal = self.step(action)
        return StepResult(State(x, self.task.layout), reward, success, terminal)
