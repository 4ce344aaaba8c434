"""Episode loop, training runs, convergence detection and evaluation."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .agent import AgentConfig, DQNAgent, Experience, TabularQAgent
from .env import CRNEnv, EnvConfig, encode_state, enumerate_actions, initial_state, step_frame


@dataclass(frozen=True)
class HarnessConfig:
    train_iterations: int = 1_000_000
    convergence_window: int = 100
    convergence_rel_tol: float = 0.05
    stop_at_convergence: bool = False
    grace_episodes: int = 100
    eval_episodes: int = 10

    def __post_init__(self):
        if self.train_iterations < 0:
            raise ValueError("train_iterations must be >= 0")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be >= 1")
        if self.convergence_rel_tol < 0:
            raise ValueError("convergence_rel_tol must be >= 0")
        if self.grace_episodes < 0 or self.eval_episodes < 0:
            raise ValueError("grace_episodes and eval_episodes must be >= 0")


@dataclass
class EpisodeRecord:
    episode: int
    reward: int
    mean_loss: float | None  # None when no minibatch update ran
    epsilon: float
    steps: int
    wall_ms: float = field(default=0.0, compare=False)


@dataclass
class RunSummary:
    """Outcome of :func:`train`.

    Equality ignores wall-clock fields, so two runs with the same seed and
    configuration compare equal.
    """

    seed: int
    config: dict
    records: list[EpisodeRecord]
    convergence_episode: int | None
    converged_mean: float | None
    final_mean: float | None
    total_steps: int
    eval_mean: float | None = None
    eval_stderr: float | None = None
    wall_s: float = field(default=0.0, compare=False)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records], dtype=float)


def run_episode(env: CRNEnv, agent, learn: bool, epsilon: float | None = None) -> EpisodeRecord:
    """One episode of ``env.cfg.horizon`` frames from the empty, discharged state.

    With ``learn=True`` every frame is stored, a minibatch update is attempted
    and the target network is synchronised. ``epsilon`` defaults to the agent's
    schedule while learning and to 0 (greedy) otherwise.
    """
    t0 = time.perf_counter()
    s = env.reset()
    x = encode_state(s, env.cfg)
    total, losses, eps = 0, [], 0.0
    done = False
    while not done:
        eps = (agent.epsilon() if learn else 0.0) if epsilon is None else epsilon
        a = agent.act(x, s.b, eps)
        out, done = env.step(a)
        s_next = out.next_state
        x_next = encode_state(s_next, env.cfg)
        total += out.reward
        if learn:
            agent.remember(Experience(x, a, float(out.reward), x_next, s_next.b, done))
            loss = agent.learn()
            if loss is not None:
                losses.append(loss)
            agent.end_step()
        s, x = s_next, x_next
    return EpisodeRecord(
        episode=0,
        reward=int(total),
        mean_loss=float(np.mean(losses)) if losses else None,
        epsilon=float(eps),
        steps=env.t,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def detect_convergence(rewards, window: int = 100, rel_tol: float = 0.05) -> int | None:
    """First episode (1-based) ending a window whose reward spread is within tolerance.

    The window qualifies when ``max - min <= rel_tol * mean`` and the mean is
    positive.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    r = np.array([getattr(x, "reward", x) for x in rewards], dtype=float)
    if len(r) < window:
        return None
    w = sliding_window_view(r, window)
    mean = w.mean(axis=1)
    ok = (mean > 0) & (w.max(axis=1) - w.min(axis=1) <= rel_tol * mean)
    hits = np.flatnonzero(ok)
    return int(hits[0]) + window if len(hits) else None


def train(env_cfg: EnvConfig, agent_cfg: AgentConfig, harness_cfg: HarnessConfig, seed: int,
          callback=None) -> tuple[RunSummary, DQNAgent]:
    """Run the DQN training loop for ``train_iterations`` environment steps.

    The seed is split into independent streams for the environment, the agent
    and the final greedy evaluation. ``callback(record)`` is invoked after each
    episode.
    """
    t0 = time.perf_counter()
    env_ss, agent_ss, eval_ss = np.random.SeedSequence(seed).spawn(3)
    env = CRNEnv(env_cfg, np.random.default_rng(env_ss))
    agent = DQNAgent(agent_cfg, env_cfg, env.actions, agent_ss)
    steps_per_episode = env_cfg.horizon
    n_episodes = harness_cfg.train_iterations // steps_per_episode
    records: list[EpisodeRecord] = []
    converged = None
    for ep in range(1, n_episodes + 1):
        rec = run_episode(env, agent, learn=True)
        rec.episode = ep
        records.append(rec)
        if callback is not None:
            callback(rec)
        if converged is None and ep >= harness_cfg.convergence_window:
            tail = records[-harness_cfg.convergence_window:]
            if detect_convergence(tail, harness_cfg.convergence_window, harness_cfg.convergence_rel_tol):
                converged = ep
        if harness_cfg.stop_at_convergence and converged is not None and ep >= converged + harness_cfg.grace_episodes:
            break

    rewards = np.array([r.reward for r in records], dtype=float)
    summary = RunSummary(
        seed=seed,
        config={"env": asdict(env_cfg), "agent": asdict(agent_cfg), "harness": asdict(harness_cfg)},
        records=records,
        convergence_episode=converged,
        converged_mean=float(rewards[converged - 1:].mean()) if converged else None,
        final_mean=float(rewards[-100:].mean()) if len(rewards) else None,
        total_steps=sum(r.steps for r in records),
    )
    if harness_cfg.eval_episodes:
        summary.eval_mean, summary.eval_stderr = evaluate(agent, env_cfg, harness_cfg.eval_episodes,
                                                          np.random.default_rng(eval_ss))
    summary.wall_s = time.perf_counter() - t0
    return summary, agent


def evaluate(policy, env_cfg: EnvConfig, episodes: int, rng) -> tuple[float, float]:
    """Mean packets per episode under a greedy policy, with its standard error.

    ``policy`` is anything callable on a :class:`NetworkState` that returns an
    action index (agents, value tables, :class:`RandomPolicy`).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(rng)
    actions = enumerate_actions(env_cfg)
    totals = np.empty(episodes)
    for e in range(episodes):
        s = initial_state(env_cfg, rng)
        total = 0
        for _ in range(env_cfg.horizon):
            out = step_frame(s, actions[policy(s)], env_cfg, rng)
            total += out.reward
            s = out.next_state
        totals[e] = total
    stderr = float(totals.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(totals.mean()), stderr


class RandomPolicy:
    """Uniformly random feasible action, drawn from its own generator."""

    def __init__(self, env_cfg: EnvConfig, seed=None):
        self.actions = enumerate_actions(env_cfg)
        self.rng = np.random.default_rng(seed)

    def __call__(self, s) -> int:
        feasible = self.actions.feasible_indices(s.b)
        return int(feasible[self.rng.integers(len(feasible))])


def train_tabular(env_cfg: EnvConfig, index, frames: int, seed=None, gamma: float = 0.9,
                  epsilon=None, lr_decay: float = 0.01) -> TabularQAgent:
    """Q-learning on one continuing trajectory of ``frames`` frames."""
    env_ss, agent_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(env_ss)
    actions = enumerate_actions(env_cfg)
    agent = TabularQAgent(index, actions, gamma, epsilon, lr_decay, agent_ss)
    s = initial_state(env_cfg, rng)
    for _ in range(frames):
        a = agent.act(s, agent.schedule(agent.steps))
        out = step_frame(s, actions[a], env_cfg, rng)
        agent.update(s, a, out.reward, out.next_state)
        s = out.next_state
    return agent


def compute_speedup(baseline: float, candidate: float) -> float:
    """Ratio ``baseline / candidate``."""
    if candidate <= 0:
        raise ValueError("candidate metric must be positive")
    return baseline / candidate
