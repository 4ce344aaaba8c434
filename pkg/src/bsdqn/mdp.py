"""Exact MDP model of small instances and synchronous value iteration.

The oracle builds the full transition kernel from the same deterministic frame
dynamics the simulator uses, combined with the binomial arrival pmf and the
channel pmf, then solves for the discounted-optimal value function. Learned
agents are checked against its greedy policy.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .env import (
    Action,
    ActionSpace,
    ContractViolation,
    EnvConfig,
    NetworkState,
    action_feasible,
    apply_arrivals,
    binomial_pmf,
    enumerate_actions,
    frame_dynamics,
    initial_state,
    step_frame,
)

DEFAULT_STATE_CAP = 10**7


class StateSpaceTooLarge(ValueError):
    pass


class StateIndex:
    """Mixed-radix bijection between :class:`NetworkState` and ``0..size-1``.

    The busy-slot coordinate is most significant, followed by ``(q_1, c_1)``,
    ``(q_2, c_2)`` and so on.
    """

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.busy = [int(b) for b in cfg.busy_support]
        self._busy_pos = {b: i for i, b in enumerate(self.busy)}
        radices = [len(self.busy)]
        for st in cfg.sts:
            radices += [st.queue_capacity + 1, st.energy_capacity + 1]
        self.radices = np.array(radices, dtype=np.int64)
        # place value of each digit, most significant first
        self.strides = np.concatenate([np.cumprod(self.radices[::-1])[::-1][1:], [1]])
        self.size = int(np.prod(self.radices))

    def __len__(self) -> int:
        return self.size

    def encode(self, s: NetworkState) -> int:
        digits = [self._busy_pos[s.b]]
        for q, c in zip(s.q, s.c):
            digits += [q, c]
        return int(np.dot(digits, self.strides))

    def decode(self, i: int) -> NetworkState:
        if not 0 <= i < self.size:
            raise IndexError(i)
        digits = (i // self.strides) % self.radices
        return NetworkState(self.busy[digits[0]], tuple(int(v) for v in digits[1::2]), tuple(int(v) for v in digits[2::2]))

    def encode_arrays(self, b, q, c) -> np.ndarray:
        """Vectorised :meth:`encode` for arrays ``b (...)``, ``q, c (..., N)``."""
        lookup = np.full(self.cfg.K + 1, -1, dtype=np.int64)
        lookup[self.busy] = np.arange(len(self.busy))
        idx = lookup[np.asarray(b)] * self.strides[0]
        idx = idx + (np.asarray(q) * self.strides[1::2]).sum(axis=-1)
        idx = idx + (np.asarray(c) * self.strides[2::2]).sum(axis=-1)
        return idx

    def grid(self):
        """All states as arrays ``(b, q, c)`` in index order."""
        digits = (np.arange(self.size)[:, None] // self.strides) % self.radices
        b = np.asarray(self.busy)[digits[:, 0]]
        return b, digits[:, 1::2], digits[:, 2::2]


def enumerate_states(cfg: EnvConfig, cap: int = DEFAULT_STATE_CAP) -> StateIndex:
    size = len(cfg.busy_support)
    for st in cfg.sts:
        size *= (st.queue_capacity + 1) * (st.energy_capacity + 1)
    if size > cap:
        raise StateSpaceTooLarge(f"{size} states exceed the cap of {cap}; use fewer STs or smaller capacities")
    return StateIndex(cfg)


def _arrival_pmfs(cfg: EnvConfig) -> list[np.ndarray]:
    return [np.array([binomial_pmf(cfg.K, st.arrival_prob, m) for m in range(cfg.K + 1)]) for st in cfg.sts]


def transition_distribution(s: NetworkState, a: Action, cfg: EnvConfig):
    """Exact successor distribution of ``(s, a)``.

    Returns a list of ``(next_state, probability, reward)`` with strictly
    positive probabilities. The reward does not depend on the successor.
    """
    if not action_feasible(a, s.b, cfg):
        raise ContractViolation(f"action {a} infeasible with {s.b} busy slots")
    q2, c_next, bs, act = frame_dynamics(s.q, s.c, s.b, a.alpha, a.eta, cfg)
    reward = int(bs.sum() + act.sum())
    per_st = []
    for n, pmf in enumerate(_arrival_pmfs(cfg)):
        dist: dict[int, float] = {}
        for m, p in enumerate(pmf):
            if p > 0:
                qn = int(min(q2[n] + m, cfg.sts[n].queue_capacity))
                dist[qn] = dist.get(qn, 0.0) + p
        per_st.append(sorted(dist.items()))
    c_tuple = tuple(int(v) for v in c_next)
    out = []
    for b, pb in zip(cfg.busy_support, cfg.busy_probs):
        if pb <= 0:
            continue
        for combo in itertools.product(*per_st):
            p = pb * float(np.prod([pq for _, pq in combo]))
            if p > 0:
                out.append((NetworkState(int(b), tuple(qn for qn, _ in combo), c_tuple), p, reward))
    return out


@dataclass
class MDPModel:
    """Sparse transition matrix over feasible state-action pairs.

    Row ``k`` of ``P`` is the successor distribution of the pair
    ``(pair_state[k], pair_action[k])``.
    """

    index: StateIndex
    actions: ActionSpace
    pair_state: np.ndarray
    pair_action: np.ndarray
    reward: np.ndarray
    P: sparse.csr_matrix = field(repr=False)


def build_model(cfg: EnvConfig, cap: int = DEFAULT_STATE_CAP) -> MDPModel:
    index = enumerate_states(cfg, cap)
    actions = enumerate_actions(cfg)
    b, q, c = index.grid()
    feasible = actions.mask(b)
    pair_state, pair_action = np.nonzero(feasible)
    alpha, eta = actions.alpha[pair_action], actions.eta[pair_action]
    q2, c_next, bs, act = frame_dynamics(q[pair_state], c[pair_state], b[pair_state], alpha, eta, cfg)
    reward = (bs + act).sum(axis=1).astype(float)

    n_pairs, N, K = len(pair_state), cfg.N, cfg.K
    pmfs = _arrival_pmfs(cfg)
    arrivals = np.array(list(itertools.product(range(K + 1), repeat=N)), dtype=np.int64)
    p_arr = np.prod([pmfs[n][arrivals[:, n]] for n in range(N)], axis=0)
    keep = p_arr > 0
    arrivals, p_arr = arrivals[keep], p_arr[keep]

    q_next, _ = apply_arrivals(q2[:, None, :], arrivals[None, :, :], cfg)
    rows, cols, vals = [], [], []
    for b_next, pb in zip(cfg.busy_support, cfg.busy_probs):
        if pb <= 0:
            continue
        b_arr = np.full(q_next.shape[:2], b_next)
        succ = index.encode_arrays(b_arr, q_next, np.broadcast_to(c_next[:, None, :], q_next.shape))
        rows.append(np.repeat(np.arange(n_pairs), len(arrivals)))
        cols.append(succ.ravel())
        vals.append(np.tile(p_arr * pb, n_pairs))
    P = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_pairs, index.size),
    )
    P.sum_duplicates()
    return MDPModel(index, actions, pair_state, pair_action, reward, P)


@dataclass
class ValueTable:
    """Optimal values and the greedy policy over a finite state grid.

    Instances are callable on :class:`NetworkState` and return the policy's
    action index, so they can be fed to :func:`evaluate_policy`.
    """

    index: StateIndex
    actions: ActionSpace
    values: np.ndarray
    policy: np.ndarray
    q: np.ndarray = field(repr=False)
    gamma: float = 0.9
    iterations: int = 0
    residuals: list = field(default_factory=list, repr=False)

    def value(self, s: NetworkState) -> float:
        return float(self.values[self.index.encode(s)])

    def __call__(self, s: NetworkState) -> int:
        return int(self.policy[self.index.encode(s)])

    def action(self, s: NetworkState) -> Action:
        return self.actions[self(s)]


def value_iteration(
    cfg: EnvConfig,
    gamma: float = 0.9,
    tol: float = 1e-6,
    *,
    model: MDPModel | None = None,
    max_iter: int = 100_000,
) -> ValueTable:
    """Jacobi value iteration until the sup-norm change is at most ``tol``.

    Ties between actions go to the lowest action index.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount {gamma} must satisfy 0 <= gamma < 1")
    if model is None:
        model = build_model(cfg)
    S, A = model.index.size, model.actions.size
    V = np.zeros(S)
    q = np.full((S, A), -np.inf)
    residuals = []
    for it in range(1, max_iter + 1):
        q[model.pair_state, model.pair_action] = model.reward + gamma * (model.P @ V)
        V_new = q.max(axis=1)
        residual = float(np.max(np.abs(V_new - V)))
        residuals.append(residual)
        V = V_new
        if residual <= tol:
            break
    else:
        raise RuntimeError(f"value iteration did not reach tol={tol} in {max_iter} sweeps")
    q[model.pair_state, model.pair_action] = model.reward + gamma * (model.P @ V)
    return ValueTable(model.index, model.actions, V, q.argmax(axis=1), q, gamma, it, residuals)


def _batch_stderr(x: np.ndarray, n_batches: int = 20) -> float:
    # batch means absorb the autocorrelation of a single trajectory
    if len(x) < 2:
        return 0.0
    if len(x) < 2 * n_batches:
        return float(np.std(x, ddof=1) / np.sqrt(len(x)))
    usable = len(x) - len(x) % n_batches
    means = x[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(n_batches))


def evaluate_policy(policy, cfg: EnvConfig, frames: int, rng, start: NetworkState | None = None):
    """Run one trajectory of ``frames`` frames under ``policy``.

    ``policy`` maps a :class:`NetworkState` to an action index. Returns the
    mean packets per frame and its batch-means standard error.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = np.random.default_rng(rng)
    actions = enumerate_actions(cfg)
    s = initial_state(cfg, rng) if start is None else start
    rewards = np.empty(frames)
    for t in range(frames):
        out = step_frame(s, actions[policy(s)], cfg, rng)
        rewards[t] = out.reward
        s = out.next_state
    return float(rewards.mean()), _batch_stderr(rewards)


def random_deterministic_policy(index: StateIndex, actions: ActionSpace, rng) -> np.ndarray:
    """A stationary deterministic policy picking a uniform feasible action per state."""
    rng = np.random.default_rng(rng)
    b, _, _ = index.grid()
    out = np.empty(index.size, dtype=np.int64)
    for i, bi in enumerate(b):
        feas = actions.feasible_indices(bi)
        out[i] = feas[rng.integers(len(feas))]
    return out


class TablePolicy:
    """Wraps a per-state action array as a callable policy."""

    def __init__(self, index: StateIndex, table):
        self.index = index
        self.table = np.asarray(table)

    def __call__(self, s: NetworkState) -> int:
        return int(self.table[self.index.encode(s)])


def write_value_csv(table: ValueTable, path) -> None:
    """One row per state: state fields, optimal value, chosen action tuple."""
    cfg = table.index.cfg
    N = cfg.N
    header = ["state", "b"]
    for n in range(1, N + 1):
        header += [f"q_{n}", f"c_{n}"]
    header += ["value", "action"]
    header += [f"alpha_{n}" for n in range(1, N + 1)] + [f"eta_{n}" for n in range(1, N + 1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(table.index.size):
            s = table.index.decode(i)
            row = [i, s.b]
            for qn, cn in zip(s.q, s.c):
                row += [qn, cn]
            a = int(table.policy[i])
            row += [repr(float(table.values[i])), a]
            row += list(table.actions.table[a])
            w.writerow(row)
