"""DQN with informed exploration.

On an exploratory step the informed policy rolls out every action for ``H``
predicted frames, looks up how often each predicted frame's hash code has
been seen, and takes the action whose predicted future is most novel. The
count table only ever receives codes of frames the agent actually observed.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .envs import EnvSpec, make_env
from .errors import ConfigurationError, InputValidationError, NonFiniteError
from .hashcount import AE_LAYERS, CountTable, FrameHasher, encoder_blocks
from .numerics import Adam, Dense, Flatten, ReLU, Sequential
from .prediction import PredictionNet, compose_state, rollout_all_actions, to_float

log = logging.getLogger(__name__)

MODES = ("random", "informed-hash")
COUNT_OFFSET = 0.01


def novelty_score(counts, beta: float) -> float:
    """Discounted sum of ``beta**i / sqrt(count_i + 0.01)`` over the rollout steps."""
    total, w = 0.0, 1.0
    for c in counts:
        c = float(c)
        if not c >= 0:
            raise InputValidationError(f"counts must be non-negative, got {c}")
        total += w / math.sqrt(c + COUNT_OFFSET)
        w *= beta
    return total


@dataclass
class PolicyConfig:
    eps_start: float = 1.0
    eps_end: float = 0.1
    anneal_steps: int | None = None  # None: the first anneal_fraction of the budget
    anneal_fraction: float = 0.2
    horizon: int = 3
    beta: float = 0.9
    gamma: float = 0.99
    mode: str = "informed-hash"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"exploration mode must be one of {MODES}, got '{self.mode}'")
        if not 0 < self.beta <= 1:
            raise ConfigurationError(f"beta must lie in (0, 1], got {self.beta}")
        if not 0 <= self.gamma <= 1:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.mode == "informed-hash" and self.horizon < 1:
            raise ConfigurationError("informed exploration needs horizon >= 1")

    def epsilon(self, step: int, budget: int) -> float:
        n = self.anneal_steps if self.anneal_steps is not None else int(self.anneal_fraction * budget)
        if n <= 0 or step >= n:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * step / n


class InformedExplorer:
    """Scores actions by the novelty of their predicted futures.

    Models are frozen, so the predicted codes per state are memoised; counts
    are read from the live table at every call and never written.
    """

    def __init__(self, net: PredictionNet, hasher: FrameHasher, table: CountTable, horizon=3, beta=0.9):
        self.net, self.hasher, self.table = net, hasher, table
        self.horizon, self.beta = horizon, beta
        self._codes = {}

    def predicted_codes(self, state) -> list:
        state = np.asarray(state, dtype=np.uint8)
        key = state.tobytes()
        codes = self._codes.get(key)
        if codes is None:
            frames = rollout_all_actions(self.net, state, self.horizon)
            l, h = frames.shape[:2]
            flat = self.hasher.codes(frames.reshape(l * h, *frames.shape[2:]))
            codes = [flat[i * h:(i + 1) * h] for i in range(l)]
            self._codes[key] = codes
        return codes

    def scores(self, state) -> np.ndarray:
        return np.array([novelty_score([self.table.query(c) for c in codes], self.beta)
                         for codes in self.predicted_codes(state)])

    def action(self, state) -> int:
        return int(np.argmax(self.scores(state)))


def informed_action(state, explorer: InformedExplorer) -> int:
    """Action with the highest novelty score; ties go to the lowest index."""
    return explorer.action(state)


class QNetwork:
    """Conv encoder over the frame stack plus a dense head with one output per action."""

    def __init__(self, frames, height, width, n_actions, hidden=128, rng=None, layers=AE_LAYERS, body=None):
        self.frames, self.height, self.width, self.n_actions = frames, height, width, n_actions
        self.hidden, self.layers = hidden, tuple(tuple(x) for x in layers)
        if body is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            blocks, sizes, c = encoder_blocks(frames, height, width, self.layers, rng)
            d = c * sizes[-1][0] * sizes[-1][1]
            body = Sequential(*blocks, Flatten(), Dense(d, hidden, rng=rng), ReLU(),
                              Dense(hidden, n_actions, rng=rng))
        self.body = body

    def params(self):
        return self.body.params()

    def forward(self, states) -> np.ndarray:
        x = to_float(states)
        if x.ndim == 3:
            x = x[None]
        return self.body.forward(x)

    def backward(self, dq):
        self.body.backward(dq)

    def copy_params(self):
        return [p.value.copy() for _, p in self.params()]

    def set_params(self, values):
        for (_, p), v in zip(self.params(), values):
            p.value[...] = v

    def clone(self):
        twin = QNetwork(self.frames, self.height, self.width, self.n_actions, self.hidden,
                        rng=np.random.default_rng(0), layers=self.layers)
        twin.set_params(self.copy_params())
        return twin


def greedy_action(qnet: QNetwork, state) -> int:
    return int(np.argmax(qnet.forward(state)[0]))


def select_action(state, qnet: QNetwork, cfg: PolicyConfig, rng, epsilon: float, explorer=None) -> int:
    """Greedy on Q when ``p >= epsilon``, otherwise explore (informed or uniform)."""
    p = rng.random()
    if p >= epsilon:
        return greedy_action(qnet, state)
    if cfg.mode == "informed-hash":
        if explorer is None:
            raise ConfigurationError("informed-hash mode needs an explorer")
        return explorer.action(state)
    return int(rng.integers(qnet.n_actions))


class ReplayBuffer:
    """FIFO ring of transitions; the next state is rebuilt from the stored next frame."""

    def __init__(self, capacity, frames, height, width):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, frames, height, width), np.uint8)
        self.next_frames = np.zeros((capacity, height, width), np.uint8)
        self.actions = np.zeros(capacity, np.int64)
        self.rewards = np.zeros(capacity, np.float32)
        self.terminal = np.zeros(capacity, bool)
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def add(self, state, action, reward, next_frame, terminal):
        i = self.pos
        self.states[i] = state
        self.next_frames[i] = next_frame
        self.actions[i] = action
        self.rewards[i] = reward
        self.terminal[i] = terminal
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def oldest_index(self):
        return self.pos if self.size == self.capacity else 0

    def sample(self, batch_size, rng) -> dict:
        if self.size == 0:
            raise InputValidationError("cannot sample from an empty replay buffer")
        idx = rng.integers(self.size, size=batch_size)
        return self.gather(idx)

    def gather(self, idx) -> dict:
        states = self.states[idx]
        return {
            "states": states,
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_states": compose_state(states, self.next_frames[idx]),
            "terminal": self.terminal[idx],
        }


def td_targets(target_net, batch, gamma) -> np.ndarray:
    """``r + gamma * max_a' Q_target(s', a')``; no bootstrap past a true terminal."""
    r = batch["rewards"].astype(np.float64)
    if gamma == 0:
        return r
    q_next = target_net.forward(batch["next_states"]).max(axis=1).astype(np.float64)
    return r + gamma * np.where(batch["terminal"], 0.0, q_next)


def dqn_update(qnet, target_net, batch, gamma, opt: Adam) -> float:
    """One Adam step on the mean squared TD error of the taken actions."""
    y = td_targets(target_net, batch, gamma)
    opt.zero_grad()
    q = qnet.forward(batch["states"])
    rows = np.arange(len(y))
    err = q[rows, batch["actions"]].astype(np.float64) - y
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise NonFiniteError("TD loss became non-finite")
    dq = np.zeros_like(q)
    dq[rows, batch["actions"]] = 2.0 * err / len(y)
    qnet.backward(dq)
    opt.step()
    return loss


@dataclass
class AgentConfig:
    budget: int = 200_000
    buffer_size: int = 50_000
    batch_size: int = 32
    target_sync: int = 500  # in updates
    train_freq: int = 4
    learning_starts: int = 1000
    lr: float = 5e-4
    hidden: int = 128


CURVE_HEADER = ("seed", "env_step", "episode_index", "episode_return", "steps_to_first_reward")


def train_agent(spec: EnvSpec, policy: PolicyConfig, agent: AgentConfig, seed: int, rng,
                pred_net: PredictionNet | None = None, hasher: FrameHasher | None = None,
                curve_path=None, qnet: QNetwork | None = None):
    """Run the act/store/learn loop for ``agent.budget`` environment steps.

    Every observed frame's code is inserted into a fresh count table, in both
    exploration modes. Returns ``(curve, qnet, table)``; one curve row per
    finished episode, with ``steps_to_first_reward`` empty until the first
    reward has been collected.
    """
    if hasher is None:
        raise ConfigurationError("train_agent needs a frame hasher for counting")
    table = CountTable()
    explorer = None
    if policy.mode == "informed-hash":
        if pred_net is None:
            raise ConfigurationError("informed-hash mode needs a prediction net")
        explorer = InformedExplorer(pred_net, hasher, table, policy.horizon, policy.beta)
    env = make_env(spec)
    if qnet is None:
        qnet = QNetwork(spec.frames, spec.height, spec.width, spec.n_actions, agent.hidden, rng=rng)
    target = qnet.clone()
    opt = Adam(qnet.params(), lr=agent.lr)
    buffer = ReplayBuffer(min(agent.buffer_size, max(agent.budget, 1)), spec.frames, spec.height, spec.width)

    curve, first_reward = [], None
    episode, ep_return, updates = 0, 0.0, 0
    state = env.reset(seed=int(rng.integers(2**31))) if agent.budget > 0 else None
    for step in range(1, agent.budget + 1):
        eps = policy.epsilon(step - 1, agent.budget)
        action = select_action(state, qnet, policy, rng, eps, explorer)
        next_state, reward, terminal, truncated = env.step(action)
        table.insert(hasher.code(next_state[-1]))
        buffer.add(state, action, reward, next_state[-1], terminal)
        ep_return += reward
        if reward > 0 and first_reward is None:
            first_reward = step
        if step > agent.learning_starts and step % agent.train_freq == 0:
            dqn_update(qnet, target, buffer.sample(agent.batch_size, rng), policy.gamma, opt)
            updates += 1
            if updates % agent.target_sync == 0:
                target.set_params(qnet.copy_params())
        if terminal or truncated:
            curve.append((seed, step, episode, ep_return, "" if first_reward is None else first_reward))
            episode += 1
            ep_return = 0.0
            state = env.reset(seed=int(rng.integers(2**31)))
        else:
            state = next_state
    if curve_path is not None:
        with open(curve_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_HEADER)
            w.writerows((s, t, e, repr(float(r)), f) for s, t, e, r, f in curve)
    log.info("seed %d: %d episodes, first reward at %s, table total %d", seed, episode, first_reward, table.total)
    return curve, qnet, table
