"""Deterministic pixel toy domains and the transition-dataset file format.

Two domains stand in for Atari: ``goal-grid`` (sparse reward, reach the far
corner) and ``paddle-ball`` (a one-row paddle keeps a bouncing ball alive).
Frames are rendered directly at target size, one ``cell x cell`` pixel block
per grid cell. A state is a ``(r, m, n)`` uint8 stack of the most recent
frames, oldest first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigurationError, FormatError, InputValidationError, UsageError

BACKGROUND, WALL, GOAL, AGENT, PADDLE = 0, 77, 153, 255, 204
BALL = AGENT

GOAL_GRID_ACTIONS = ("up", "down", "left", "right")
PADDLE_BALL_ACTIONS = ("noop", "left", "right")
_MOVES = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}

FLAG_TERMINAL = 1
FLAG_TRUNCATED = 2


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "goal-grid"
    grid: int = 15
    cell: int = 2
    frames: int = 4
    max_steps: int = 300
    start: tuple = (0, 0)
    goal: tuple | None = None
    walls: tuple = ()
    random_start: bool = False
    paddle_width: int = 3

    def __post_init__(self):
        if self.kind not in ("goal-grid", "paddle-ball"):
            raise ConfigurationError(f"unknown env kind '{self.kind}'")
        if self.cell < 2 or self.grid < 2:
            raise ConfigurationError("grid >= 2 and cell >= 2 required")
        if self.height % 2:
            raise ConfigurationError(f"frame size {self.height} must be even")
        if self.frames < 1 or self.max_steps < 1:
            raise ConfigurationError("frames and max_steps must be positive")
        if self.kind == "goal-grid":
            g = self.goal_cell
            for cell in (tuple(self.start), g, *map(tuple, self.walls)):
                if not (0 <= cell[0] < self.grid and 0 <= cell[1] < self.grid):
                    raise ConfigurationError(f"cell {cell} outside the {self.grid}x{self.grid} grid")
            if tuple(self.start) in self.wall_set or g in self.wall_set:
                raise ConfigurationError("start and goal must not be walls")
        elif not 1 <= self.paddle_width <= self.grid or self.grid < 4:
            raise ConfigurationError("paddle-ball needs grid >= 4 and 1 <= paddle_width <= grid")

    @property
    def height(self) -> int:
        return self.grid * self.cell

    @property
    def width(self) -> int:
        return self.grid * self.cell

    @property
    def n_actions(self) -> int:
        return len(GOAL_GRID_ACTIONS) if self.kind == "goal-grid" else len(PADDLE_BALL_ACTIONS)

    @property
    def goal_cell(self) -> tuple:
        return tuple(self.goal) if self.goal is not None else (self.grid - 1, self.grid - 1)

    @property
    def wall_set(self) -> frozenset:
        return frozenset(map(tuple, self.walls))


def goal_grid(grid=15, cell=2, max_steps=300, **kw) -> EnvSpec:
    return EnvSpec(kind="goal-grid", grid=grid, cell=cell, max_steps=max_steps, **kw)


def paddle_ball(grid=12, cell=2, max_steps=200, **kw) -> EnvSpec:
    return EnvSpec(kind="paddle-ball", grid=grid, cell=cell, max_steps=max_steps, **kw)


def _paint(frame, cell, rc, value):
    r, c = rc
    frame[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = value


def render_goal_grid(spec: EnvSpec, agent=None, show_goal=True) -> np.ndarray:
    frame = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for w in spec.walls:
        _paint(frame, spec.cell, w, WALL)
    if show_goal:
        _paint(frame, spec.cell, spec.goal_cell, GOAL)
    if agent is not None:
        _paint(frame, spec.cell, agent, AGENT)
    return frame


def render_paddle_ball(spec: EnvSpec, ball=None, paddle_left=None) -> np.ndarray:
    frame = np.zeros((spec.height, spec.width), dtype=np.uint8)
    if paddle_left is not None:
        for c in range(paddle_left, paddle_left + spec.paddle_width):
            _paint(frame, spec.cell, (spec.grid - 1, c), PADDLE)
    if ball is not None and 0 <= ball[0] < spec.grid:
        _paint(frame, spec.cell, ball, BALL)
    return frame


def initial_stack(frame: np.ndarray, r: int) -> np.ndarray:
    return np.repeat(frame[None], r, axis=0)


def push_frame(stack: np.ndarray, frame: np.ndarray) -> np.ndarray:
    """Drop the oldest frame and append ``frame`` (returns a new array)."""
    if frame.shape != stack.shape[1:]:
        raise ConfigurationError(f"frame shape {frame.shape} does not match stack {stack.shape}")
    return np.concatenate([stack[1:], frame[None].astype(stack.dtype)], axis=0)


class _Env:
    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.rng = np.random.default_rng(0)
        self.stack = None
        self.t = 0
        self.done = True

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self._reset_logic()
        self.stack = initial_stack(self.render(), self.spec.frames)
        return self.stack

    def step(self, action: int):
        """Advance one step; returns ``(stack, reward, terminal, truncated)``."""
        if self.done:
            raise UsageError("step() called on a finished episode; call reset() first")
        if not 0 <= int(action) < self.spec.n_actions:
            raise InputValidationError(f"action {action} outside [0, {self.spec.n_actions})")
        reward, terminal = self._step_logic(int(action))
        self.t += 1
        truncated = not terminal and self.t >= self.spec.max_steps
        self.done = terminal or truncated
        self.stack = push_frame(self.stack, self.render())
        return self.stack, float(reward), terminal, truncated


class GoalGridEnv(_Env):
    """Agent moves one cell per step; walls and borders block; +1 and terminal at the goal."""

    def _reset_logic(self):
        spec = self.spec
        if spec.random_start:
            blocked = spec.wall_set | {spec.goal_cell}
            free = [(r, c) for r in range(spec.grid) for c in range(spec.grid) if (r, c) not in blocked]
            self.agent = free[int(self.rng.integers(len(free)))]
        else:
            self.agent = tuple(spec.start)

    def _step_logic(self, action):
        dr, dc = _MOVES[action]
        r, c = self.agent[0] + dr, self.agent[1] + dc
        if 0 <= r < self.spec.grid and 0 <= c < self.spec.grid and (r, c) not in self.spec.wall_set:
            self.agent = (r, c)
        if self.agent == self.spec.goal_cell:
            return 1.0, True
        return 0.0, False

    def render(self):
        return render_goal_grid(self.spec, self.agent)


class PaddleBallEnv(_Env):
    """Ball moves diagonally, reflecting off the side walls, the ceiling and the paddle.

    The paddle spans ``paddle_width`` cells of the bottom row. A ball about to
    enter the bottom row inside the paddle span bounces (+1 reward); otherwise
    it enters the bottom row and leaves the grid on the following step, which
    ends the episode.
    """

    def _reset_logic(self):
        g = self.spec.grid
        self.ball = (int(self.rng.integers(0, g // 2)), int(self.rng.integers(0, g)))
        self.velocity = (1, 1)
        self.paddle_left = (g - self.spec.paddle_width) // 2

    def _step_logic(self, action):
        g, w = self.spec.grid, self.spec.paddle_width
        shift = (0, -1, 1)[action]
        self.paddle_left = min(max(self.paddle_left + shift, 0), g - w)
        (r, c), (vr, vc) = self.ball, self.velocity
        nc = c + vc
        if not 0 <= nc < g:
            vc = -vc
            nc = c + vc
        nr = r + vr
        if nr < 0:
            vr = -vr
            nr = r + vr
        reward = 0.0
        if vr == 1 and nr == g - 1 and self.paddle_left <= nc < self.paddle_left + w:
            vr = -1
            nr = r + vr
            reward = 1.0
        self.ball, self.velocity = (nr, nc), (vr, vc)
        return reward, nr >= g

    def render(self):
        return render_paddle_ball(self.spec, self.ball, self.paddle_left)


def make_env(spec: EnvSpec):
    return GoalGridEnv(spec) if spec.kind == "goal-grid" else PaddleBallEnv(spec)


def reset(spec: EnvSpec, seed: int) -> np.ndarray:
    return make_env(spec).reset(seed)


# ---------------------------------------------------------------------------
# transition dataset
# ---------------------------------------------------------------------------

MAGIC = b"IEXD"
VERSION = 1
_HEADER = struct.Struct("<4sIBHHBQ")
HEADER_SIZE = _HEADER.size


@dataclass
class TransitionRecord:
    state: np.ndarray
    action: int
    reward: float
    next_frame: np.ndarray
    terminal: bool
    truncated: bool = False


def record_dtype(r, m, n):
    return np.dtype([
        ("state", np.uint8, (r, m, n)),
        ("next_frame", np.uint8, (m, n)),
        ("action", np.uint8),
        ("reward", "<f4"),
        ("flags", np.uint8),
    ])


def record_size(r, m, n) -> int:
    return r * m * n + m * n + 1 + 4 + 1


@dataclass
class Dataset:
    """Columnar view of a dataset file."""

    r: int
    m: int
    n: int
    n_actions: int
    records: np.ndarray = field(repr=False)

    @property
    def states(self):
        return self.records["state"]

    @property
    def next_frames(self):
        return self.records["next_frame"]

    @property
    def actions(self):
        return self.records["action"].astype(np.int64)

    @property
    def rewards(self):
        return self.records["reward"]

    @property
    def terminal(self):
        return (self.records["flags"] & FLAG_TERMINAL) != 0

    @property
    def truncated(self):
        return (self.records["flags"] & FLAG_TRUNCATED) != 0

    def __len__(self):
        return len(self.records)

    def episode_ids(self) -> np.ndarray:
        """Episode index per record; a record closing an episode belongs to it."""
        ends = (self.records["flags"] & (FLAG_TERMINAL | FLAG_TRUNCATED)) != 0
        ids = np.zeros(len(self), dtype=np.int64)
        if len(self) > 1:
            ids[1:] = np.cumsum(ends[:-1])
        return ids

    def subset(self, index) -> "Dataset":
        return Dataset(self.r, self.m, self.n, self.n_actions, self.records[index])

    def validation_mask(self, rng, val_fraction=0.05) -> np.ndarray:
        """Seeded episode-level hold-out mask; at least one episode is held out when there are two or more."""
        ids = self.episode_ids()
        n_ep = int(ids.max()) + 1 if len(ids) else 0
        order = rng.permutation(n_ep)
        n_val = max(1, int(round(val_fraction * n_ep))) if n_ep > 1 else 0
        val_eps = np.zeros(n_ep, dtype=bool)
        val_eps[order[:n_val]] = True
        return val_eps[ids] if n_ep else np.zeros(0, dtype=bool)

    def split_by_episode(self, rng, val_fraction=0.05):
        """``(train, validation)`` subsets split by whole episodes."""
        mask = self.validation_mask(rng, val_fraction)
        return self.subset(~mask), self.subset(mask)

    def iter_records(self) -> Iterator[TransitionRecord]:
        for rec in self.records:
            flags = int(rec["flags"])
            yield TransitionRecord(
                state=rec["state"].copy(),
                action=int(rec["action"]),
                reward=float(rec["reward"]),
                next_frame=rec["next_frame"].copy(),
                terminal=bool(flags & FLAG_TERMINAL),
                truncated=bool(flags & FLAG_TRUNCATED),
            )


def records_to_array(records, r, m, n):
    records = list(records)
    arr = np.zeros(len(records), dtype=record_dtype(r, m, n))
    for i, rec in enumerate(records):
        if not 0 <= rec.action < 256:
            raise InputValidationError(f"record {i}: action {rec.action} does not fit in u8")
        arr[i]["state"] = rec.state
        arr[i]["next_frame"] = rec.next_frame
        arr[i]["action"] = rec.action
        arr[i]["reward"] = rec.reward
        arr[i]["flags"] = (FLAG_TERMINAL if rec.terminal else 0) | (FLAG_TRUNCATED if rec.truncated else 0)
    return arr


def dataset_write(path, records, r, m, n, n_actions):
    """Write records (a structured array or an iterable of :class:`TransitionRecord`)."""
    path = Path(path)
    arr = records if isinstance(records, np.ndarray) else records_to_array(records, r, m, n)
    if arr.dtype != record_dtype(r, m, n):
        raise ConfigurationError(f"record layout {arr.dtype} does not match r={r}, m={m}, n={n}")
    header = _HEADER.pack(MAGIC, VERSION, r, m, n, n_actions, len(arr))
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def load_dataset(path) -> Dataset:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad dataset magic", offset=0, path=path)
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated dataset header", offset=len(buf), path=path)
    _, version, r, m, n, n_actions, count = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4, path=path)
    size = record_size(r, m, n)
    have = (len(buf) - HEADER_SIZE) // size
    if have < count:
        raise FormatError(f"truncated: header declares {count} records, file holds {have}",
                          offset=HEADER_SIZE + have * size, path=path)
    if len(buf) != HEADER_SIZE + count * size:
        raise FormatError("trailing bytes after last record", offset=HEADER_SIZE + count * size, path=path)
    records = np.frombuffer(buf, dtype=record_dtype(r, m, n), count=count, offset=HEADER_SIZE)
    return Dataset(r, m, n, n_actions, records)


def dataset_read(path) -> Iterator[TransitionRecord]:
    return load_dataset(path).iter_records()


Policy = Callable[[np.ndarray, np.random.Generator], int]


def uniform_policy(n_actions: int) -> Policy:
    def act(stack, rng):
        return int(rng.integers(n_actions))
    return act


def generate_records(spec: EnvSpec, policy: Policy, n: int, epsilon: float, seed: int) -> np.ndarray:
    """Roll ``policy`` under epsilon-greedy for ``n`` transitions, restarting finished episodes."""
    rng = np.random.default_rng(seed)
    env = make_env(spec)
    arr = np.zeros(n, dtype=record_dtype(spec.frames, spec.height, spec.width))
    stack = env.reset(int(rng.integers(2**63)))
    for i in range(n):
        if rng.random() < epsilon:
            action = int(rng.integers(spec.n_actions))
        else:
            action = int(policy(stack, rng))
        nxt, reward, terminal, truncated = env.step(action)
        rec = arr[i]
        rec["state"] = stack
        rec["next_frame"] = nxt[-1]
        rec["action"] = action
        rec["reward"] = reward
        rec["flags"] = (FLAG_TERMINAL if terminal else 0) | (FLAG_TRUNCATED if truncated else 0)
        stack = env.reset() if (terminal or truncated) else nxt
    return arr


def gen_dataset(spec: EnvSpec, policy: Policy, n: int, epsilon: float, seed: int, path) -> Path:
    arr = generate_records(spec, policy, n, epsilon, seed)
    dataset_write(path, arr, spec.frames, spec.height, spec.width, spec.n_actions)
    return Path(path)
