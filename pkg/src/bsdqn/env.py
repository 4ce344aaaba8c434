"""RF-powered backscatter cognitive radio network as a discrete-time MDP.

One primary transmitter occupies a single channel for ``b`` of the ``K`` slots
in each frame. Every secondary transmitter (ST) may backscatter in busy slots,
harvests energy in the busy slots it does not backscatter, and may actively
transmit in idle slots using stored energy. The gateway picks, once per frame,
an allocation ``(alpha_1..alpha_N, eta_1..eta_N)`` of backscatter and active
slots.

The transition kernel is split into a deterministic part
(:func:`frame_dynamics`, vectorised over any leading batch shape) and the
random draws (:func:`sample_arrivals`, :func:`sample_channel`), so the exact
solver and the simulator share one implementation of the physics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np


class ContractViolation(ValueError):
    """An operation was called with arguments outside its precondition."""


@dataclass(frozen=True)
class STConfig:
    """Physical parameters of one secondary transmitter."""

    queue_capacity: int = 10
    energy_capacity: int = 10
    backscatter_rate: int = 1
    harvest_rate: int = 1
    active_rate: int = 2
    active_cost: int = 1
    arrival_prob: float = 0.5

    def __post_init__(self):
        if self.queue_capacity < 0 or self.energy_capacity < 0:
            raise ValueError("queue_capacity and energy_capacity must be >= 0")
        for name in ("backscatter_rate", "harvest_rate", "active_rate", "active_cost"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.arrival_prob <= 1.0:
            raise ValueError("arrival_prob must lie in [0, 1]")


def _uniform_idle(K: int) -> tuple[tuple[int, float], ...]:
    n = K - 1
    return tuple((beta, 1.0 / n) for beta in range(1, K))


@dataclass(frozen=True)
class EnvConfig:
    """Frame length, the ST population and the idle-slot distribution.

    ``idle_slot_support`` is a tuple of ``(beta, probability)`` pairs; when
    left as ``None`` it becomes uniform over ``1..K-1``.
    """

    K: int = 10
    sts: tuple[STConfig, ...] = (STConfig(), STConfig())
    idle_slot_support: tuple[tuple[int, float], ...] | None = None
    horizon: int = 200

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if len(self.sts) < 1:
            raise ValueError("at least one secondary transmitter is required")
        object.__setattr__(self, "sts", tuple(self.sts))
        if self.idle_slot_support is None:
            object.__setattr__(self, "idle_slot_support", _uniform_idle(self.K))
        support = tuple((int(b), float(p)) for b, p in self.idle_slot_support)
        object.__setattr__(self, "idle_slot_support", support)
        if not support:
            raise ValueError("idle_slot_support is empty")
        betas = [b for b, _ in support]
        if len(set(betas)) != len(betas):
            raise ValueError("duplicate beta in idle_slot_support")
        for beta, p in support:
            if not 1 <= beta <= self.K - 1:
                raise ValueError(f"idle slots {beta} outside 1..{self.K - 1}")
            if p < 0:
                raise ValueError("negative idle-slot probability")
        if abs(sum(p for _, p in support) - 1.0) > 1e-12:
            raise ValueError("idle-slot probabilities must sum to 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def N(self) -> int:
        return len(self.sts)

    @cached_property
    def busy_support(self) -> np.ndarray:
        """Busy-slot counts ``K - beta`` in ascending order."""
        out = np.array(sorted(self.K - b for b, _ in self.idle_slot_support))
        out.setflags(write=False)
        return out

    @cached_property
    def busy_probs(self) -> np.ndarray:
        """Probabilities aligned with :attr:`busy_support`."""
        pmf = {self.K - b: p for b, p in self.idle_slot_support}
        out = np.array([pmf[b] for b in self.busy_support])
        out.setflags(write=False)
        return out

    @cached_property
    def _columns(self) -> dict:
        cols = {}
        for name in STConfig.__dataclass_fields__:
            dtype = float if name == "arrival_prob" else np.int64
            arr = np.array([getattr(st, name) for st in self.sts], dtype=dtype)
            arr.setflags(write=False)
            cols[name] = arr
        return cols

    def column(self, name: str) -> np.ndarray:
        """Per-ST parameter ``name`` as a read-only array of length N."""
        return self._columns[name]


@dataclass(frozen=True)
class NetworkState:
    b: int
    q: tuple[int, ...]
    c: tuple[int, ...]

    def validate(self, cfg: EnvConfig) -> None:
        lo, hi = int(cfg.busy_support.min()), int(cfg.busy_support.max())
        if not lo <= self.b <= hi:
            raise ContractViolation(f"busy slots {self.b} outside [{lo}, {hi}]")
        if len(self.q) != cfg.N or len(self.c) != cfg.N:
            raise ContractViolation("state length does not match number of STs")
        for n, st in enumerate(cfg.sts):
            if not 0 <= self.q[n] <= st.queue_capacity:
                raise ContractViolation(f"queue of ST {n} out of range: {self.q[n]}")
            if not 0 <= self.c[n] <= st.energy_capacity:
                raise ContractViolation(f"energy of ST {n} out of range: {self.c[n]}")


@dataclass(frozen=True)
class Action:
    alpha: tuple[int, ...]
    eta: tuple[int, ...]

    def harvest_slots(self, b: int) -> int:
        """Busy slots left over after all backscatter, ``b - sum(alpha)``."""
        return b - sum(self.alpha)


@dataclass(frozen=True)
class StepOutcome:
    next_state: NetworkState
    reward: int
    backscatter: tuple[int, ...]
    active: tuple[int, ...]
    arrivals: tuple[int, ...]
    dropped: tuple[int, ...]


def _enumerate_tuples(length: int, budget: int):
    if length == 0:
        yield ()
        return
    for first in range(budget + 1):
        for rest in _enumerate_tuples(length - 1, budget - first):
            yield (first,) + rest


@dataclass
class ActionSpace:
    """All allocations with ``sum(alpha) + sum(eta) <= K``, in lexicographic order.

    ``table`` has shape ``(|A|, 2N)``: columns ``0..N-1`` are the backscatter
    slots and ``N..2N-1`` the active slots.
    """

    K: int
    N: int
    table: np.ndarray = field(repr=False)
    _index: dict = field(default_factory=dict, repr=False)
    _masks: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {tuple(int(v) for v in row): i for i, row in enumerate(self.table)}
        alpha_sum = self.table[:, : self.N].sum(axis=1)
        eta_sum = self.table[:, self.N :].sum(axis=1)
        b = np.arange(self.K + 1)[:, None]
        self._masks = (alpha_sum[None, :] <= b) & (eta_sum[None, :] <= self.K - b)
        self._masks.setflags(write=False)

    def __len__(self) -> int:
        return len(self.table)

    @property
    def size(self) -> int:
        return len(self.table)

    @property
    def alpha(self) -> np.ndarray:
        return self.table[:, : self.N]

    @property
    def eta(self) -> np.ndarray:
        return self.table[:, self.N :]

    def __getitem__(self, i: int) -> Action:
        row = self.table[i]
        return Action(tuple(int(v) for v in row[: self.N]), tuple(int(v) for v in row[self.N :]))

    def index(self, a: Action) -> int:
        try:
            return self._index[tuple(a.alpha) + tuple(a.eta)]
        except KeyError:
            raise KeyError(f"{a} is not in the action space") from None

    def mask(self, b) -> np.ndarray:
        """Feasibility mask(s) for busy-slot count(s) ``b``."""
        return self._masks[b]

    def feasible_indices(self, b: int) -> np.ndarray:
        return np.flatnonzero(self._masks[b])


def enumerate_actions(cfg: EnvConfig) -> ActionSpace:
    """Every 2N-tuple of non-negative slot counts summing to at most K."""
    rows = list(_enumerate_tuples(2 * cfg.N, cfg.K))
    return ActionSpace(cfg.K, cfg.N, np.array(rows, dtype=np.int64))


def action_feasible(a: Action, b: int, cfg: EnvConfig) -> bool:
    return sum(a.alpha) <= b and sum(a.eta) <= cfg.K - b


def binomial_pmf(trials: int, prob: float, m: int) -> float:
    if not 0 <= m <= trials:
        raise ValueError(f"m={m} outside 0..{trials}")
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"probability {prob} outside [0, 1]")
    return math.comb(trials, m) * prob**m * (1.0 - prob) ** (trials - m)


def sample_arrivals(cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """Packets arriving at each ST during one frame: Binomial(K, lambda_n)."""
    return rng.binomial(cfg.K, cfg.column("arrival_prob"))


def sample_channel(cfg: EnvConfig, rng: np.random.Generator, size=None):
    """Busy-slot count ``K - beta`` for the next frame."""
    support, probs = cfg.busy_support, cfg.busy_probs
    if size is None:
        return int(support[rng.choice(len(support), p=probs)])
    return support[rng.choice(len(support), size=size, p=probs)]


def busy_transition(q: int, c: int, alpha: int, b: int, st: STConfig) -> tuple[int, int]:
    """Backscatter ``alpha`` slots, harvest in the remaining ``b - alpha``."""
    if not 0 <= alpha <= b:
        raise ContractViolation(f"alpha={alpha} outside 0..{b}")
    c1 = min(c + (b - alpha) * st.harvest_rate, st.energy_capacity)
    q1 = max(0, q - alpha * st.backscatter_rate)
    return q1, c1


def _active_slots(q1, c1, eta, d_a, e_a):
    # data limit rounds up (a partial load still takes a slot), energy limit rounds down
    q1, c1, eta = np.asarray(q1), np.asarray(c1), np.asarray(eta)
    d_a, e_a = np.asarray(d_a), np.asarray(e_a)
    safe_d = np.where(d_a > 0, d_a, 1)
    data_limit = np.where(d_a > 0, -(-q1 // safe_d), 0)
    safe_e = np.where(e_a > 0, e_a, 1)
    energy_limit = np.where(e_a > 0, c1 // safe_e, eta)
    return np.minimum(np.minimum(eta, data_limit), energy_limit)


def idle_transition(q1: int, c1: int, eta: int, st: STConfig) -> tuple[int, int, int]:
    """Active transmission in up to ``eta`` idle slots.

    Returns ``(q2, c_prime, active_packets)``.
    """
    if eta < 0:
        raise ContractViolation("eta must be >= 0")
    t = int(_active_slots(q1, c1, eta, st.active_rate, st.active_cost))
    active = min(q1, t * st.active_rate)
    return q1 - active, c1 - t * st.active_cost, active


def frame_dynamics(q, c, b, alpha, eta, cfg: EnvConfig):
    """Deterministic within-frame transmission for arrays of states.

    ``q``, ``c``, ``alpha`` and ``eta`` have shape ``(..., N)``; ``b`` has the
    leading shape. Returns ``(q2, c_prime, backscatter, active)``, each of
    shape ``(..., N)``. Feasibility is the caller's responsibility.
    """
    q, c, alpha, eta = (np.asarray(x, dtype=np.int64) for x in (q, c, alpha, eta))
    b = np.asarray(b, dtype=np.int64)[..., None]
    d_b, e_h = cfg.column("backscatter_rate"), cfg.column("harvest_rate")
    d_a, e_a = cfg.column("active_rate"), cfg.column("active_cost")
    C = cfg.column("energy_capacity")

    c1 = np.minimum(c + (b - alpha) * e_h, C)
    q1 = np.maximum(0, q - alpha * d_b)
    t = _active_slots(q1, c1, eta, d_a, e_a)
    active = np.minimum(q1, t * d_a)
    return q1 - active, c1 - t * e_a, q - q1, active


def apply_arrivals(q2, arrivals, cfg: EnvConfig):
    """Append arrivals after transmission; returns ``(q_next, dropped)``."""
    Q = cfg.column("queue_capacity")
    total = np.asarray(q2) + np.asarray(arrivals)
    q_next = np.minimum(total, Q)
    return q_next, total - q_next


def step_frame(
    s: NetworkState,
    a: Action,
    cfg: EnvConfig,
    rng: np.random.Generator,
    *,
    arrivals: Sequence[int] | None = None,
    next_b: int | None = None,
) -> StepOutcome:
    """Advance one frame.

    Arrivals are drawn before the next channel state, so a given generator
    state always yields the same outcome. ``arrivals`` and ``next_b`` may be
    supplied to pin the random parts.
    """
    if not action_feasible(a, s.b, cfg):
        raise ContractViolation(f"action {a} infeasible with {s.b} busy slots")
    q2, c_next, bs, act = frame_dynamics(s.q, s.c, s.b, a.alpha, a.eta, cfg)
    m = sample_arrivals(cfg, rng) if arrivals is None else np.asarray(arrivals)
    q_next, dropped = apply_arrivals(q2, m, cfg)
    b_next = sample_channel(cfg, rng) if next_b is None else int(next_b)
    return StepOutcome(
        next_state=NetworkState(b_next, tuple(int(v) for v in q_next), tuple(int(v) for v in c_next)),
        reward=int(bs.sum() + act.sum()),
        backscatter=tuple(int(v) for v in bs),
        active=tuple(int(v) for v in act),
        arrivals=tuple(int(v) for v in m),
        dropped=tuple(int(v) for v in dropped),
    )


def simulate_frames(s: NetworkState, a: Action, cfg: EnvConfig, rng: np.random.Generator, size: int):
    """Draw ``size`` independent successors of ``(s, a)``; vectorised :func:`step_frame`.

    Returns ``(b_next, q_next, c_next, reward)`` with shapes ``(size,)``,
    ``(size, N)``, ``(size, N)``, ``(size,)``.
    """
    if not action_feasible(a, s.b, cfg):
        raise ContractViolation(f"action {a} infeasible with {s.b} busy slots")
    q2, c_next, bs, act = frame_dynamics(s.q, s.c, s.b, a.alpha, a.eta, cfg)
    m = rng.binomial(cfg.K, cfg.column("arrival_prob"), size=(size, cfg.N))
    q_next, _ = apply_arrivals(q2[None, :], m, cfg)
    b_next = sample_channel(cfg, rng, size=size)
    reward = np.full(size, int(bs.sum() + act.sum()))
    return b_next, q_next, np.broadcast_to(c_next, q_next.shape), reward


def encode_state(s: NetworkState, cfg: EnvConfig) -> np.ndarray:
    """``[b/K, q_1/Q_1, c_1/C_1, ..., q_N/Q_N, c_N/C_N]``."""
    out = np.empty(1 + 2 * cfg.N)
    out[0] = s.b / cfg.K
    out[1::2] = np.asarray(s.q) / np.maximum(cfg.column("queue_capacity"), 1)
    out[2::2] = np.asarray(s.c) / np.maximum(cfg.column("energy_capacity"), 1)
    return out


def decode_state(x, cfg: EnvConfig) -> NetworkState:
    """Inverse of :func:`encode_state` (values are rounded to the grid)."""
    x = np.asarray(x, dtype=float)
    b = int(round(x[0] * cfg.K))
    q = np.rint(x[1::2] * np.maximum(cfg.column("queue_capacity"), 1)).astype(int)
    c = np.rint(x[2::2] * np.maximum(cfg.column("energy_capacity"), 1)).astype(int)
    return NetworkState(b, tuple(int(v) for v in q), tuple(int(v) for v in c))


def initial_state(cfg: EnvConfig, rng: np.random.Generator) -> NetworkState:
    """Empty queues, discharged storage, fresh channel draw."""
    return NetworkState(sample_channel(cfg, rng), (0,) * cfg.N, (0,) * cfg.N)


class CRNEnv:
    """Episodic wrapper with a reset/step interface.

    Episodes never terminate on their own; the last of ``cfg.horizon`` frames
    carries ``done=True``.
    """

    def __init__(self, cfg: EnvConfig, seed=None):
        self.cfg = cfg
        self.actions = enumerate_actions(cfg)
        self.rng = np.random.default_rng(seed)
        self.state: NetworkState | None = None
        self.t = 0

    @property
    def observation_dim(self) -> int:
        return 1 + 2 * self.cfg.N

    def reset(self) -> NetworkState:
        self.state = initial_state(self.cfg, self.rng)
        self.t = 0
        return self.state

    def step(self, action_index: int) -> tuple[StepOutcome, bool]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        out = step_frame(self.state, self.actions[action_index], self.cfg, self.rng)
        self.state = out.next_state
        self.t += 1
        return out, self.t >= self.cfg.horizon
