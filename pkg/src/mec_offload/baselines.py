"""Non-learning comparison policies.

A policy here is any callable ``policy(env) -> encoded action`` reading the
environment's current snapshot; the DQN agent exposes the same shape.
"""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from .env import Action, MecEnv
from .simcore import (ServerState, TaskProfile, compute_time, queue_wait_time,
                      residual_time, transmission_time)


class PolicyKind(str, Enum):
    GREEDY = "greedy"
    RANDOM = "random"
    FIXED_MAX_FREQ = "fixed_max_freq"


def predicted_service_times(task: TaskProfile, servers: Sequence[ServerState],
                            rates: Sequence[float]) -> np.ndarray:
    """Deadline-check left side for every server, at its maximum frequency."""
    return np.array([
        residual_time(s) + queue_wait_time(s) + transmission_time(task, r)
        + compute_time(task, s.max_freq_hz)
        for s, r in zip(servers, rates)
    ])


def greedy_action(task: TaskProfile, servers: Sequence[ServerState],
                  rates: Sequence[float], n_freq_levels: int) -> Action:
    times = predicted_service_times(task, servers, rates)
    k = int(np.argmin(times))  # first index on ties
    return Action(k, n_freq_levels, n_freq_levels)


def random_action(rng: np.random.Generator, n_servers: int, n_freq_levels: int) -> Action:
    enc = int(rng.integers(n_servers * n_freq_levels))
    return Action.decode(enc, n_servers, n_freq_levels)


def fixed_max_freq_action(rng: np.random.Generator, n_servers: int,
                          n_freq_levels: int) -> Action:
    return Action(int(rng.integers(n_servers)), n_freq_levels, n_freq_levels)


def make_policy(kind, seed: int = 0):
    """Build ``policy(env) -> int`` for a baseline kind."""
    kind = PolicyKind(kind)
    rng = np.random.default_rng(seed)

    if kind is PolicyKind.GREEDY:
        def policy(env: MecEnv) -> int:
            return greedy_action(env.pending_task, env.servers, env.current_rates(),
                                 env.config.n_freq_levels).encoded
    elif kind is PolicyKind.RANDOM:
        def policy(env: MecEnv) -> int:
            return random_action(rng, env.config.n_servers, env.config.n_freq_levels).encoded
    else:
        def policy(env: MecEnv) -> int:
            return fixed_max_freq_action(rng, env.config.n_servers,
                                         env.config.n_freq_levels).encoded
    return policy
