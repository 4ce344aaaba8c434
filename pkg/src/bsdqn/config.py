"""Plain-text run configuration.

One ``key = value`` per line, ``#`` starts a comment. Unknown keys are errors.
Per-ST values use ``st.<i>.<field>`` with ``i`` counted from 1; they override
the network-wide defaults (``queue_capacity``, ``active_rate``, ...). Unless
given explicitly, arrival probabilities are spread evenly from
``lambda_min`` to ``lambda_max`` across the STs.

Example::

    n_st = 3
    st.1.lambda = 0.2
    agent = doubleduel
    hidden = 32
    layers = 3
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import VARIANTS, AgentConfig, EpsilonSchedule
from .env import EnvConfig, STConfig
from .harness import HarnessConfig


class ConfigError(ValueError):
    pass


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        value = float(text)
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {text!r}") from None
        return int(value)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _optional_float(text: str):
    return None if text.lower() in ("auto", "none", "") else float(text)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _check(pred, message):
    def check(value):
        if not pred(value):
            raise ValueError(message)
    return check


_pos = _check(lambda v: v >= 1, "must be >= 1")
_nonneg = _check(lambda v: v >= 0, "must be >= 0")
_prob = _check(lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]")

# name -> (parser, default, validator)
GLOBAL_KEYS = {
    "K": (_int, 10, _check(lambda v: v >= 2, "must be >= 2")),
    "n_st": (_int, 2, _pos),
    "steps_per_episode": (_int, 200, _pos),
    "idle_min": (_int, 1, _pos),
    "idle_max": (_int, None, _pos),
    "idle_probs": (_floats, None, None),
    "lambda_min": (float, 0.1, _prob),
    "lambda_max": (float, 0.9, _prob),
    "queue_capacity": (_int, 10, _nonneg),
    "energy_capacity": (_int, 10, _nonneg),
    "backscatter_rate": (_int, 1, _nonneg),
    "harvest_rate": (_int, 1, _nonneg),
    "active_rate": (_int, 2, _nonneg),
    "active_cost": (_int, 1, _nonneg),
    "agent": (_choice(*VARIANTS), "dqn", None),
    "optimizer": (_choice("adam", "sgd"), "adam", None),
    "hidden": (_int, 128, _pos),
    "layers": (_int, 1, _pos),
    "learning_rate": (_optional_float, None, _check(lambda v: v is None or v >= 0, "must be >= 0")),
    "gamma": (float, 0.9, _check(lambda v: 0.0 <= v < 1.0, "discount must satisfy 0 <= gamma < 1")),
    "batch_size": (_int, 32, _pos),
    "replay_capacity": (_int, 500_000, _pos),
    "eps_start": (float, 0.9, _prob),
    "eps_end": (float, 0.0, _prob),
    "eps_decay_steps": (_int, 400_000, _nonneg),
    "target_sync": (_choice("hard", "soft"), "hard", None),
    "target_sync_every": (_int, 10_000, _pos),
    "target_tau": (float, 1e-4, _prob),
    "learn_start": (_int, 1000, _nonneg),
    "train_iterations": (_int, 1_000_000, _nonneg),
    "convergence_window": (_int, 100, _pos),
    "convergence_rel_tol": (float, 0.05, _nonneg),
    "stop_at_convergence": (_bool, False, None),
    "grace_episodes": (_int, 100, _nonneg),
    "eval_episodes": (_int, 10, _nonneg),
    "seed": (_int, 0, _nonneg),
    "seeds": (_int, 10, _pos),
}

ST_FIELDS = {
    "lambda": ("arrival_prob", float, _prob),
    "queue_capacity": ("queue_capacity", _int, _nonneg),
    "energy_capacity": ("energy_capacity", _int, _nonneg),
    "backscatter_rate": ("backscatter_rate", _int, _nonneg),
    "harvest_rate": ("harvest_rate", _int, _nonneg),
    "active_rate": ("active_rate", _int, _nonneg),
    "active_cost": ("active_cost", _int, _nonneg),
}

_ST_KEY = re.compile(r"^st\.(\d+)\.([a-z_]+)$")


@dataclass
class RunConfig:
    env: EnvConfig
    agent: AgentConfig
    harness: HarnessConfig
    seed: int = 0
    seeds: int = 10
    values: dict = field(default_factory=dict, repr=False)

    def with_overrides(self, **overrides) -> RunConfig:
        """Re-resolve this configuration with some keys replaced."""
        return parse_config_text(format_config(self), "<resolved>", {k: _format(v) for k, v in overrides.items()})


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def parse_config(path, overrides=None) -> RunConfig:
    """Read a config file; ``overrides`` maps keys to value strings and wins over the file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config_text(text, str(path), overrides)


def _parse_entry(key: str, value: str, where: str):
    def fail(message):
        raise ConfigError(f"{where}: {key}: {message}")

    m = _ST_KEY.match(key)
    if m:
        if m.group(2) not in ST_FIELDS:
            fail("unknown per-ST field")
        if int(m.group(1)) < 1:
            fail("ST numbering starts at 1")
        _, parser, validator = ST_FIELDS[m.group(2)]
    elif key in GLOBAL_KEYS:
        parser, _, validator = GLOBAL_KEYS[key]
    else:
        fail("unknown key")
    try:
        parsed = parser(value)
        if validator is not None:
            validator(parsed)
    except ValueError as exc:
        fail(str(exc))
    return parsed


def parse_config_text(text: str, source: str = "<config>", overrides=None) -> RunConfig:
    raw: dict[str, object] = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key in lines:
            raise ConfigError(f"{source}:{lineno}: {key}: duplicate key (first set on line {lines[key]})")
        raw[key] = _parse_entry(key, value, f"{source}:{lineno}")
        lines[key] = lineno
    for key, value in (overrides or {}).items():
        raw[key] = _parse_entry(key, str(value), "<override>")
        lines.pop(key, None)
    return _resolve(raw, lines, source)


def _resolve(raw: dict, lines: dict, source: str) -> RunConfig:
    def fail(key, message):
        where = f"{source}:{lines[key]}" if key in lines else source
        raise ConfigError(f"{where}: {key}: {message}")

    v = {k: raw.get(k, default) for k, (_, default, _) in GLOBAL_KEYS.items()}
    K, n_st = v["K"], v["n_st"]
    if v["idle_max"] is None:
        v["idle_max"] = K - 1
    if v["idle_max"] > K - 1:
        fail("idle_max", f"must be <= K - 1 = {K - 1}")
    if v["idle_min"] > v["idle_max"]:
        fail("idle_min", "must be <= idle_max")
    betas = list(range(v["idle_min"], v["idle_max"] + 1))
    if v["idle_probs"] is None:
        probs = [1.0 / len(betas)] * len(betas)
    else:
        probs = list(v["idle_probs"])
        if len(probs) != len(betas):
            fail("idle_probs", f"need {len(betas)} probabilities for idle slots {betas[0]}..{betas[-1]}")
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            fail("idle_probs", "probabilities must be non-negative and sum to 1")

    for key in raw:
        m = _ST_KEY.match(key)
        if m and int(m.group(1)) > n_st:
            fail(key, f"refers to ST {m.group(1)} but n_st = {n_st}")

    lambdas = np.linspace(v["lambda_min"], v["lambda_max"], n_st) if n_st > 1 else [v["lambda_min"]]
    sts, st_values = [], {}
    for i in range(1, n_st + 1):
        kwargs = {}
        for short, (attr, _, _) in ST_FIELDS.items():
            key = f"st.{i}.{short}"
            if key in raw:
                kwargs[attr] = raw[key]
            elif short == "lambda":
                kwargs[attr] = float(lambdas[i - 1])
            else:
                kwargs[attr] = v[short]
            st_values[key] = kwargs[attr]
        sts.append(STConfig(**kwargs))

    try:
        env = EnvConfig(K=K, sts=tuple(sts), idle_slot_support=tuple(zip(betas, probs)),
                        horizon=v["steps_per_episode"])
        agent = AgentConfig(
            variant=v["agent"], gamma=v["gamma"], batch_size=v["batch_size"], optimizer=v["optimizer"],
            learning_rate=v["learning_rate"], hidden=v["hidden"], layers=v["layers"],
            replay_capacity=v["replay_capacity"],
            epsilon=EpsilonSchedule(v["eps_start"], v["eps_end"], v["eps_decay_steps"]),
            target_sync=v["target_sync"], target_sync_every=v["target_sync_every"],
            target_tau=v["target_tau"], learn_start=v["learn_start"],
        )
        harness = HarnessConfig(
            train_iterations=v["train_iterations"], convergence_window=v["convergence_window"],
            convergence_rel_tol=v["convergence_rel_tol"], stop_at_convergence=v["stop_at_convergence"],
            grace_episodes=v["grace_episodes"], eval_episodes=v["eval_episodes"],
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    values = dict(v)
    values["idle_probs"] = tuple(probs)
    # per-ST entries replace the spread rule in the resolved snapshot
    values.pop("lambda_min"), values.pop("lambda_max")
    values.update(st_values)
    return RunConfig(env, agent, harness, v["seed"], v["seeds"], values)


def format_config(cfg: RunConfig) -> str:
    """Fully resolved ``key = value`` text; parsing it yields an equal config."""
    lines = ["# resolved configuration"]
    lines += [f"{k} = {_format(val)}" for k, val in cfg.values.items() if val is not None]
    return "\n".join(lines) + "\n"
