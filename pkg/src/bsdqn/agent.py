"""Gateway scheduling agents: DQN family with experience replay, and tabular Q-learning.

Infeasible allocations are masked to ``-inf`` both when acting and inside the
TD target, using the busy-slot count stored with every transition.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import ActionSpace, EnvConfig, NetworkState, encode_state
from .nn import (
    OptimizerState,
    QNetwork,
    backward,
    backward_selected,
    forward,
    forward_cached,
    forward_selected,
    mlp_init,
    optimizer_step,
    td_loss,
)

VARIANTS = ("dqn", "double", "duel", "doubleduel")
DEFAULT_LR = {"adam": 1e-4, "sgd": 1e-3}


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 0.9
    end: float = 0.0
    decay_steps: int = 400_000

    def __call__(self, step: int) -> float:
        return epsilon_at(self, step)


def epsilon_at(schedule: EpsilonSchedule, step: int) -> float:
    """Linear decay from ``start`` to ``end`` over ``decay_steps``, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.decay_steps <= 0:
        return schedule.end
    frac = min(step / schedule.decay_steps, 1.0)
    eps = schedule.start + frac * (schedule.end - schedule.start)
    lo, hi = sorted((schedule.start, schedule.end))
    return float(min(max(eps, lo), hi))


@dataclass(frozen=True)
class AgentConfig:
    variant: str = "dqn"
    gamma: float = 0.9
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float | None = None
    hidden: int = 128
    layers: int = 1
    replay_capacity: int = 500_000
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    target_sync: str = "hard"
    target_sync_every: int = 10_000
    target_tau: float = 1e-4
    learn_start: int = 1000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown agent variant {self.variant!r}; choose from {VARIANTS}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must satisfy 0 <= gamma < 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in DEFAULT_LR:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.target_sync not in ("hard", "soft"):
            raise ValueError("target_sync must be 'hard' or 'soft'")
        if self.hidden < 1 or self.layers < 1:
            raise ValueError("hidden and layers must be >= 1")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must hold at least one batch")
        if self.target_sync_every < 1 or not 0.0 <= self.target_tau <= 1.0:
            raise ValueError("invalid target synchronisation settings")

    @property
    def lr(self) -> float:
        return DEFAULT_LR[self.optimizer] if self.learning_rate is None else self.learning_rate

    @property
    def dueling(self) -> bool:
        return self.variant in ("duel", "doubleduel")

    @property
    def double(self) -> bool:
        return self.variant in ("double", "doubleduel")


@dataclass(frozen=True)
class Experience:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    next_b: int
    terminal: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_b: np.ndarray
    terminal: np.ndarray
    slots: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_b = np.zeros(capacity, dtype=np.int64)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    def push(self, e: Experience) -> None:
        i = self.cursor
        self.states[i] = e.state
        self.actions[i] = e.action
        self.rewards[i] = e.reward
        self.next_states[i] = e.next_state
        self.next_b[i] = e.next_b
        self.terminal[i] = e.terminal
        self.cursor = (i + 1) % self.capacity
        self.fill = min(self.fill + 1, self.capacity)

    def ready(self, batch_size: int) -> bool:
        return self.fill >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch | None:
        """Uniform sample without replacement, or ``None`` while underfilled."""
        if not self.ready(batch_size):
            return None
        idx = rng.choice(self.fill, size=batch_size, replace=False)
        return Batch(
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.next_b[idx],
            self.terminal[idx],
            idx,
        )

    def contents(self) -> list[Experience]:
        """Stored transitions, oldest first."""
        start = self.cursor if self.fill == self.capacity else 0
        order = [(start + k) % self.capacity for k in range(self.fill)]
        return [
            Experience(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                       self.next_states[i].copy(), int(self.next_b[i]), bool(self.terminal[i]))
            for i in order
        ]


def replay_push(buf: ReplayBuffer, e: Experience) -> None:
    buf.push(e)


def replay_sample(buf: ReplayBuffer, batch_size: int, rng) -> Batch | None:
    return buf.sample(batch_size, rng)


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise argmax over feasible entries; ties go to the lowest index."""
    return np.where(mask, q, -np.inf).argmax(axis=-1)


def select_action(net: QNetwork, x, b: int, epsilon: float, rng, actions: ActionSpace) -> int:
    """Epsilon-greedy choice restricted to actions feasible with ``b`` busy slots."""
    if rng.random() < epsilon:
        feasible = actions.feasible_indices(b)
        return int(feasible[rng.integers(len(feasible))])
    return int(masked_argmax(forward(net, x), actions.mask(b)))


def compute_targets(variant: str, online: QNetwork, target: QNetwork, batch: Batch, gamma: float,
                    actions: ActionSpace) -> np.ndarray:
    """TD targets; terminal transitions do not bootstrap."""
    mask = actions.mask(batch.next_b)
    q_target = forward(target, batch.next_states)
    if variant in ("double", "doubleduel"):
        chosen = masked_argmax(forward(online, batch.next_states), mask)
        boot = q_target[np.arange(len(batch)), chosen]
    else:
        boot = np.where(mask, q_target, -np.inf).max(axis=1)
    return np.where(batch.terminal, batch.rewards, batch.rewards + gamma * boot)


class DQNAgent:
    """Online and target Q-networks, optimizer state and replay memory.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`; it is split
    into independent streams for weight initialisation and for exploration
    plus replay sampling.
    """

    def __init__(self, cfg: AgentConfig, env_cfg: EnvConfig, actions: ActionSpace, seed=None):
        self.cfg = cfg
        self.env_cfg = env_cfg
        self.actions = actions
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_ss, act_ss = ss.spawn(2)
        dims = (1 + 2 * env_cfg.N,) + (cfg.hidden,) * cfg.layers + (actions.size,)
        self.online = mlp_init(dims, np.random.default_rng(init_ss), dueling=cfg.dueling)
        self.target = self.online.copy()
        self.opt = OptimizerState(kind=cfg.optimizer, lr=cfg.lr)
        self.replay = ReplayBuffer(cfg.replay_capacity, dims[0])
        self.rng = np.random.default_rng(act_ss)
        self.steps = 0
        self.updates = 0

    def epsilon(self) -> float:
        return epsilon_at(self.cfg.epsilon, self.steps)

    def act(self, x, b: int, epsilon: float) -> int:
        return select_action(self.online, x, b, epsilon, self.rng, self.actions)

    def q_values(self, x) -> np.ndarray:
        return forward(self.online, x)

    def __call__(self, s: NetworkState) -> int:
        """Greedy action for a state; makes the agent usable as a policy."""
        q = forward(self.online, encode_state(s, self.env_cfg))
        return int(masked_argmax(q, self.actions.mask(s.b)))

    def remember(self, e: Experience) -> None:
        self.replay.push(e)

    def learn(self) -> float | None:
        """One minibatch update once the replay holds ``max(L_b, learn_start)`` items."""
        if not self.replay.ready(max(self.cfg.batch_size, self.cfg.learn_start)):
            return None
        batch = self.replay.sample(self.cfg.batch_size, self.rng)
        return learn_step(self, batch)

    def end_step(self) -> None:
        """Advance the step counter and synchronise the target network."""
        self.steps += 1
        sync_target(self)


def learn_step(agent: DQNAgent, batch: Batch) -> float:
    """Targets, TD loss, backprop and one optimizer step on the online network."""
    y = compute_targets(agent.cfg.variant, agent.online, agent.target, batch, agent.cfg.gamma, agent.actions)
    if agent.online.dueling:
        q, acts = forward_cached(agent.online, batch.states)
        loss, dq = td_loss(q, batch.actions, y)
        grads = backward(agent.online, acts, dq)
    else:
        # only the taken actions enter the loss, so the other outputs are never formed
        q, acts = forward_selected(agent.online, batch.states, batch.actions)
        err = y - q
        loss = float(np.mean(err * err))
        grads = backward_selected(agent.online, acts, batch.actions, -2.0 * err / len(err))
    optimizer_step(agent.online, grads, agent.opt)
    agent.updates += 1
    return loss


def sync_target(agent: DQNAgent) -> None:
    """Hard copy every ``target_sync_every`` steps, or Polyak averaging every step."""
    cfg = agent.cfg
    if cfg.target_sync == "soft":
        soft_update(agent.target, agent.online, cfg.target_tau)
    elif agent.steps % cfg.target_sync_every == 0:
        agent.target.load_from(agent.online)


def soft_update(target: QNetwork, online: QNetwork, tau: float) -> None:
    target.flat *= 1.0 - tau
    target.flat += tau * online.flat


def tabular_q_update(table: np.ndarray, s: int, a: int, r: float, s_next: int, lr: float, gamma: float,
                     mask_next: np.ndarray) -> np.ndarray:
    """In-place Q-learning update ``Q(s,a) <- (1-lr) Q(s,a) + lr (r + gamma max Q(s',.))``."""
    best = np.max(table[s_next][mask_next])
    table[s, a] = (1.0 - lr) * table[s, a] + lr * (r + gamma * best)
    return table


class TabularQAgent:
    """Q-table over the oracle's state grid with visit-count learning rates."""

    def __init__(self, index, actions: ActionSpace, gamma: float = 0.9,
                 epsilon: EpsilonSchedule | None = None, lr_decay: float = 0.01, seed=None):
        self.index = index
        self.actions = actions
        self.gamma = gamma
        self.schedule = epsilon or EpsilonSchedule()
        self.lr_decay = lr_decay
        self.q = np.zeros((index.size, actions.size))
        self.visits = np.zeros((index.size, actions.size), dtype=np.int64)
        self.rng = np.random.default_rng(seed)
        self.steps = 0

    def learning_rate(self, s: int, a: int) -> float:
        return 1.0 / (1.0 + self.visits[s, a] * self.lr_decay)

    def act(self, state: NetworkState, epsilon: float) -> int:
        if self.rng.random() < epsilon:
            feasible = self.actions.feasible_indices(state.b)
            return int(feasible[self.rng.integers(len(feasible))])
        return self(state)

    def __call__(self, state: NetworkState) -> int:
        return int(masked_argmax(self.q[self.index.encode(state)], self.actions.mask(state.b)))

    def update(self, state: NetworkState, a: int, r: float, next_state: NetworkState) -> None:
        s, s_next = self.index.encode(state), self.index.encode(next_state)
        lr = self.learning_rate(s, a)
        tabular_q_update(self.q, s, a, r, s_next, lr, self.gamma, self.actions.mask(next_state.b))
        self.visits[s, a] += 1
        self.steps += 1
