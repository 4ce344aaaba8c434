"""Time-slot scheduling for RF-powered backscatter cognitive radio networks.

Modules:

- :mod:`bsdqn.env` -- the network MDP (state, actions, frame dynamics, arrivals)
- :mod:`bsdqn.mdp` -- exact transition model and value iteration for small instances
- :mod:`bsdqn.nn` -- dense Q-network, backprop, SGD/Adam, weight files
- :mod:`bsdqn.agent` -- DQN variants, replay memory, tabular Q-learning
- :mod:`bsdqn.harness` -- training loop, convergence detection, evaluation
- :mod:`bsdqn.config`, :mod:`bsdqn.cli` -- configuration files and the ``bsdqn`` command
- :mod:`bsdqn.estimator` -- scikit-learn style ``fit``/``predict`` wrappers
"""
from .agent import AgentConfig, DQNAgent, EpsilonSchedule, TabularQAgent
from .env import Action, ActionSpace, CRNEnv, EnvConfig, NetworkState, STConfig, enumerate_actions, step_frame
from .harness import HarnessConfig, RunSummary, detect_convergence, evaluate, train
from .mdp import value_iteration

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ActionSpace",
    "AgentConfig",
    "CRNEnv",
    "DQNAgent",
    "EnvConfig",
    "EpsilonSchedule",
    "HarnessConfig",
    "NetworkState",
    "RunSummary",
    "STConfig",
    "TabularQAgent",
    "detect_convergence",
    "enumerate_actions",
    "evaluate",
    "step_frame",
    "train",
    "value_iteration",
]
