import numpy as np
import pytest

from selfaug_pbrl import envs, textio
from selfaug_pbrl.agent import ReplayBuffer
from selfaug_pbrl.core import TrajectorySegment


# (criterion number, status, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def report_criterion(n: int, passed, detail: str):
    """Record one acceptance line; ``passed`` is a bool or the string "SKIP"."""
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    ACCEPTANCE.append((n, status, detail))
    print(f"criterion {n}: {status} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


@pytest.fixture
def reach():
    return envs.get_task("point_reach")


@pytest.fixture
def press():
    return envs.get_task("button_press_lite")


def random_segment(task, rng, H=10, episode_id=0):
    """A segment of H states from a random-action rollout (privileged rewards attached)."""
    env = envs.Env(task)
    x = env.reset(int(rng.integers(1 << 30)))
    states, rewards = [], []
    for _ in range(H):
        x, r, _, _ = env.step(rng.uniform(-1, 1, task.action_dims))
        states.append(x)
        rewards.append(r)
    return TrajectorySegment(np.array(states), task.layout, np.array(rewards), episode_id=episode_id)


def fill_buffer(task, episodes=6, seed=0, capacity=None):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(task.layout.total_dims, task.action_dims, capacity or episodes * task.episode_len)
    env = envs.Env(task)
    for e in range(episodes):
        x = env.reset(seed * 1000 + e)
        for t in range(task.episode_len):
            a = rng.uniform(-1, 1, task.action_dims)
            x2, r, _, term = env.step(a)
            buf.add(x, a, 0.0, x2, term, r, e, t)
            x = x2
    return buf


def segment_from_block(raw, task, start=0, grip=1.0):
    """Rebuild a segment from a serialized trajectory block (prev channels lag by one step)."""
    channels, target = textio.parse_trajectory_block(raw, task, start)
    lay = task.layout
    H = len(channels[task.position_key])
    states = np.zeros((H, lay.total_dims))
    for name, pts in channels.items():
        cur = task.channel_slice(name)
        prev = lay.slice("prev_" + ("tcp" if name == task.position_key else name))
        states[:, cur] = pts
        states[1:, prev] = pts[:-1]
        states[0, prev] = pts[0]
    if lay.grip is not None:
        states[:, lay.slice("grip")] = grip
        states[:, lay.slice("prev_grip")] = grip
    states[:, lay.slice("target")] = target
    return TrajectorySegment(states, lay, np.zeros(H))
