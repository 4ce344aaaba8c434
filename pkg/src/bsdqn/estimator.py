"""scikit-learn style wrappers around the schedulers.

The environment plays the role of the data: ``fit`` ignores ``X`` and learns
from simulated interaction with ``env_config``. ``predict`` maps encoded
states (rows of ``[b/K, q_1/Q_1, c_1/C_1, ...]``, see
:func:`bsdqn.env.encode_state`) to feasible action indices, and ``score``
returns the mean packets delivered per episode under the greedy policy.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .agent import AgentConfig, EpsilonSchedule, masked_argmax
from .env import EnvConfig, decode_state, enumerate_actions
from .harness import HarnessConfig, evaluate, train, train_tabular
from .mdp import enumerate_states, value_iteration
from .nn import forward


def _busy_slots(X, env_config: EnvConfig) -> np.ndarray:
    b = np.rint(X[:, 0] * env_config.K).astype(int)
    if b.min() < 0 or b.max() > env_config.K:
        raise ValueError("first column must be b/K with 0 <= b <= K")
    return b


class _SchedulerMixin:
    """Shared predict/score on top of a fitted ``policy_``."""

    def _validate(self, X):
        check_is_fitted(self, "actions_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        """Greedy feasible action index for each encoded state."""
        X = self._validate(X)
        return masked_argmax(self.decision_function(X), self.actions_.mask(_busy_slots(X, self._env())))

    def predict_allocation(self, X):
        """Like :meth:`predict` but returns the ``(alpha_1..alpha_N, eta_1..eta_N)`` rows."""
        return self.actions_.table[self.predict(X)]

    def score(self, X=None, y=None, episodes: int = 10):
        """Mean packets per episode of the greedy policy (higher is better)."""
        check_is_fitted(self, "actions_")
        mean, _ = evaluate(self.policy_, self._env(), episodes, np.random.default_rng(self.random_state))
        return mean

    def _env(self) -> EnvConfig:
        return self.env_config if self.env_config is not None else EnvConfig()

    def _prepare(self):
        env = self._env()
        self.actions_ = enumerate_actions(env)
        self.n_features_in_ = 1 + 2 * env.N
        return env


class DQNScheduler(_SchedulerMixin, BaseEstimator):
    """Deep Q-network gateway scheduler.

    Parameters mirror :class:`bsdqn.agent.AgentConfig` and
    :class:`bsdqn.harness.HarnessConfig`.
    """

    def __init__(self, env_config=None, variant="dqn", optimizer="adam", hidden=128, layers=1,
                 learning_rate=None, gamma=0.9, batch_size=32, replay_capacity=500_000,
                 eps_start=0.9, eps_end=0.0, eps_decay_steps=400_000, target_sync="hard",
                 target_sync_every=10_000, target_tau=1e-4, learn_start=1000,
                 train_iterations=1_000_000, eval_episodes=10, random_state=0):
        self.env_config = env_config
        self.variant = variant
        self.optimizer = optimizer
        self.hidden = hidden
        self.layers = layers
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.batch_size = batch_size
        self.replay_capacity = replay_capacity
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.eps_decay_steps = eps_decay_steps
        self.target_sync = target_sync
        self.target_sync_every = target_sync_every
        self.target_tau = target_tau
        self.learn_start = learn_start
        self.train_iterations = train_iterations
        self.eval_episodes = eval_episodes
        self.random_state = random_state

    def fit(self, X=None, y=None):
        env = self._prepare()
        agent_cfg = AgentConfig(
            variant=self.variant, gamma=self.gamma, batch_size=self.batch_size, optimizer=self.optimizer,
            learning_rate=self.learning_rate, hidden=self.hidden, layers=self.layers,
            replay_capacity=self.replay_capacity,
            epsilon=EpsilonSchedule(self.eps_start, self.eps_end, self.eps_decay_steps),
            target_sync=self.target_sync, target_sync_every=self.target_sync_every,
            target_tau=self.target_tau, learn_start=self.learn_start,
        )
        harness_cfg = HarnessConfig(train_iterations=self.train_iterations, eval_episodes=self.eval_episodes)
        self.summary_, self.agent_ = train(env, agent_cfg, harness_cfg, self.random_state)
        self.policy_ = self.agent_
        return self

    def decision_function(self, X):
        """Q-values, with infeasible actions set to ``-inf``."""
        X = self._validate(X)
        q = forward(self.agent_.online, X)
        return np.where(self.actions_.mask(_busy_slots(X, self._env())), q, -np.inf)


class _GridScheduler(_SchedulerMixin):
    def decision_function(self, X):
        X = self._validate(X)
        env = self._env()
        rows = [self.index_.encode(decode_state(x, env)) for x in X]
        return np.where(self.actions_.mask(_busy_slots(X, env)), self.q_[rows], -np.inf)


class ValueIterationScheduler(_GridScheduler, BaseEstimator):
    """Exact discounted-optimal scheduler for small instances."""

    def __init__(self, env_config=None, gamma=0.9, tol=1e-6, random_state=0):
        self.env_config = env_config
        self.gamma = gamma
        self.tol = tol
        self.random_state = random_state

    def fit(self, X=None, y=None):
        env = self._prepare()
        self.table_ = value_iteration(env, self.gamma, self.tol)
        self.index_ = self.table_.index
        self.q_ = self.table_.q
        self.policy_ = self.table_
        return self


class TabularQScheduler(_GridScheduler, BaseEstimator):
    """Q-learning over the exact state grid."""

    def __init__(self, env_config=None, gamma=0.9, frames=200_000, eps_start=0.9, eps_end=0.0,
                 eps_decay_steps=100_000, lr_decay=0.01, random_state=0):
        self.env_config = env_config
        self.gamma = gamma
        self.frames = frames
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.eps_decay_steps = eps_decay_steps
        self.lr_decay = lr_decay
        self.random_state = random_state

    def fit(self, X=None, y=None):
        env = self._prepare()
        self.index_ = enumerate_states(env)
        schedule = EpsilonSchedule(self.eps_start, self.eps_end, self.eps_decay_steps)
        self.agent_ = train_tabular(env, self.index_, self.frames, self.random_state, self.gamma,
                                    schedule, self.lr_decay)
        self.q_ = np.where(self.actions_.mask(self.index_.grid()[0]), self.agent_.q, -np.inf)
        self.policy_ = self.agent_
        return self
