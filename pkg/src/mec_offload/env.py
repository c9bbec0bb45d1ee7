"""Sequential offloading environment: one pending task per step.

Each step the agent picks a server and a frequency level for the pending
task. The task is priced (deadline check and energy) against the server's
queue at that instant, enqueued, and the clock moves on by one inter-arrival
gap before the next task is drawn. Enqueueing onto a full queue overloads
the server and ends the episode.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .simcore import (ChannelParams, ServerState, TaskProfile, compute_time,
                      deadline_met, energy, queue_wait_time, residual_time,
                      transmission_rate, transmission_time)

SERVER_FEATURES = ("queue_len", "queued_cycles", "max_freq", "residual_time", "queue_wait")

# Unit scaling applied before normalization: Mbit, Mcycles, ms.
TASK_FEATURE_SCALE = np.array([1e-6, 1e-6, 1e3])
# count, 1e7 cycles, GHz, 10 ms, 10 ms. The constant max-frequency column
# anchors the block norm, so absolute load survives normalization.
SERVER_FEATURE_SCALE = np.array([1.0, 1e-7, 1e-9, 1e2, 1e2])

INTERARRIVAL_DISTS = ("exponential", "uniform", "constant")


@dataclass
class RewardConfig:
    eta: float = 0.5
    beta1: float = 1.0
    beta2: float = 1.0
    const_c: float = 0.5
    clip_min: float = -10.0
    clip_max: float = 10.0
    energy_floor_j: float = 1e-12

    def validate(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"reward.eta must lie in [0, 1], got {self.eta}")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("reward.beta1 and reward.beta2 must be positive")
        if self.const_c < 0:
            raise ValueError("reward.const_c must be nonnegative")
        if not self.clip_min < self.clip_max:
            raise ValueError(f"reward clip bounds need clip_min < clip_max, "
                             f"got [{self.clip_min}, {self.clip_max}]")
        if not self.energy_floor_j > 0:
            raise ValueError("reward.energy_floor_j must be positive")


@dataclass
class EnvConfig:
    n_servers: int = 3
    n_users: int = 10
    server_freq_range_hz: Tuple[float, float] = (2e9, 8e9)
    queue_capacity: int = 10
    task_data_bits_range: Tuple[float, float] = (2e5, 2e7)
    task_cycles_range: Tuple[float, float] = (8e6, 1e7)
    deadline_range_s: Tuple[float, float] = (0.02, 0.06)
    mean_interarrival_s: float = 1e-3
    interarrival_dist: str = "exponential"
    lambda_max_tasks_per_slot: int = 10
    n_freq_levels: int = 10
    bandwidth_hz: float = 1e8
    tx_power_w: float = 0.5
    mean_snr: float = 100.0
    path_loss_range: Tuple[float, float] = (2e-8, 1.8e-7)
    energy_coeff: float = 1e-26
    reward: RewardConfig = field(default_factory=RewardConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        reward = RewardConfig(**d.pop("reward", {}))
        for k in list(d):
            if k.endswith("_range") or k.endswith("_range_hz") or k.endswith("_range_s"):
                d[k] = tuple(float(x) for x in d[k])
        cfg = cls(reward=reward, **d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @property
    def n_actions(self) -> int:
        return self.n_servers * self.n_freq_levels

    @property
    def obs_dim(self) -> int:
        return 3 + len(SERVER_FEATURES) * self.n_servers + self.n_servers

    @property
    def noise_power_w(self) -> float:
        # makes P * E[h] * L_mid / N0 equal to mean_snr (E[h] = 1)
        lo, hi = self.path_loss_range
        return self.tx_power_w * 0.5 * (lo + hi) / self.mean_snr

    def server_max_freqs(self) -> np.ndarray:
        lo, hi = self.server_freq_range_hz
        return np.linspace(lo, hi, self.n_servers)

    def validate(self):
        for name in ("n_servers", "n_users", "queue_capacity",
                     "lambda_max_tasks_per_slot", "n_freq_levels"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        for name in ("server_freq_range_hz", "task_data_bits_range", "task_cycles_range",
                     "deadline_range_s", "path_loss_range"):
            rng = getattr(self, name)
            if len(rng) != 2:
                raise ValueError(f"{name} must be [low, high], got {rng!r}")
            lo, hi = rng
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {rng!r}")
        for name in ("mean_interarrival_s", "bandwidth_hz", "tx_power_w", "mean_snr",
                     "energy_coeff"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.interarrival_dist not in INTERARRIVAL_DISTS:
            raise ValueError(f"interarrival_dist must be one of {INTERARRIVAL_DISTS}")
        self.reward.validate()


@dataclass(frozen=True)
class Action:
    server_index: int
    freq_level: int
    n_freq_levels: int

    @property
    def encoded(self) -> int:
        return self.server_index * self.n_freq_levels + (self.freq_level - 1)

    @property
    def freq_fraction(self) -> float:
        return self.freq_level / self.n_freq_levels

    @classmethod
    def decode(cls, encoded: int, n_servers: int, n_freq_levels: int) -> "Action":
        encoded = int(encoded)
        if not 0 <= encoded < n_servers * n_freq_levels:
            raise ValueError(f"action {encoded} outside [0, {n_servers * n_freq_levels})")
        k, lvl = divmod(encoded, n_freq_levels)
        return cls(k, lvl + 1, n_freq_levels)


@dataclass
class Observation:
    task_block: np.ndarray
    server_block: np.ndarray  # (K, 5), normalized as one matrix
    rate_block: np.ndarray
    flattened: np.ndarray

    def blocks(self) -> List[np.ndarray]:
        return [self.task_block, self.server_block, self.rate_block]


@dataclass
class StepOutcome:
    next_observation: Observation
    reward: float
    terminal: bool
    info: dict


def normalize_block(block) -> np.ndarray:
    """Divide by the Frobenius norm; an all-zero block is returned unchanged."""
    a = np.asarray(block, dtype=np.float64)
    peak = np.max(np.abs(a)) if a.size else 0.0
    if peak == 0.0:
        return a.copy()
    # scale first so tiny or huge entries do not under/overflow when squared
    s = a / peak
    return s / np.sqrt(np.sum(s * s))


def server_features(server: ServerState) -> np.ndarray:
    raw = np.array([server.queue_len, server.queued_cycles, server.max_freq_hz,
                    residual_time(server), queue_wait_time(server)])
    return raw * SERVER_FEATURE_SCALE


def build_observation(pending_task: TaskProfile, servers: Sequence[ServerState],
                      rates: Sequence[float]) -> Observation:
    if len(servers) != len(rates):
        raise ValueError(f"{len(servers)} servers but {len(rates)} rates")
    task_raw = np.array([pending_task.data_size_bits, pending_task.cpu_cycles,
                         pending_task.deadline_s]) * TASK_FEATURE_SCALE
    task_block = normalize_block(task_raw)
    server_block = normalize_block(np.stack([server_features(s) for s in servers]))
    rate_block = normalize_block(np.asarray(rates, dtype=np.float64) * 1e-6)
    flat = np.concatenate([task_block, server_block.ravel(), rate_block])
    return Observation(task_block, server_block, rate_block, flat)


def generate_task(rng: np.random.Generator, config: EnvConfig, task_id: int = 0) -> TaskProfile:
    d = rng.uniform(*config.task_data_bits_range)
    c = rng.uniform(*config.task_cycles_range)
    dl = rng.uniform(*config.deadline_range_s)
    user = int(rng.integers(config.n_users))
    return TaskProfile(d, c, dl, user_id=user, task_id=task_id)


def reward_raw(f_task: int, energy_j: float, rc: RewardConfig) -> float:
    e = max(energy_j, rc.energy_floor_j)
    return (1 - rc.eta) * rc.beta1 * f_task - rc.eta * rc.beta2 * math.log2(e) + rc.const_c


def clip_reward(r: float, rc: RewardConfig) -> float:
    return min(max(r, rc.clip_min), rc.clip_max)


class MecEnv:
    """Gym-style environment over the sim-core formulas."""

    def __init__(self, config: EnvConfig):
        config.validate()
        self.config = config
        self.n_actions = config.n_actions
        self.obs_dim = config.obs_dim
        self._ready = False

    # -- state ---------------------------------------------------------
    def reset(self, seed: Optional[int] = None) -> Observation:
        cfg = self.config
        seed = cfg.seed if seed is None else seed
        task_ss, arrival_ss, channel_ss = np.random.SeedSequence(seed).spawn(3)
        self._task_rng = np.random.default_rng(task_ss)
        self._arrival_rng = np.random.default_rng(arrival_ss)
        self._channel_rng = np.random.default_rng(channel_ss)

        self.servers = [ServerState(float(f), cfg.queue_capacity)
                        for f in cfg.server_max_freqs()]
        self.clock = 0.0
        self.steps = 0
        self.slot = 0
        self._slot_count = 0
        self.terminal = False
        self.path_loss = self._channel_rng.uniform(*cfg.path_loss_range,
                                                   size=(cfg.n_users, cfg.n_servers))
        self._draw_fading()
        self._next_task_id = 0
        self.pending_task = self._new_task()
        self._ready = True
        return self.observe()

    def _draw_fading(self):
        # |g|^2 for a Rayleigh(1/sqrt 2) amplitude: unit-mean exponential gain
        amp = self._channel_rng.rayleigh(scale=1 / math.sqrt(2),
                                         size=(self.config.n_users, self.config.n_servers))
        self.fading = amp * amp

    def _new_task(self) -> TaskProfile:
        t = generate_task(self._task_rng, self.config, self._next_task_id)
        self._next_task_id += 1
        return t

    def channel(self, user: int, server: int) -> ChannelParams:
        cfg = self.config
        return ChannelParams(cfg.bandwidth_hz, cfg.tx_power_w,
                             float(self.fading[user, server]),
                             float(self.path_loss[user, server]), cfg.noise_power_w)

    def current_rates(self) -> List[float]:
        u = self.pending_task.user_id
        return [transmission_rate(self.channel(u, k)) for k in range(self.config.n_servers)]

    def observe(self) -> Observation:
        return build_observation(self.pending_task, self.servers, self.current_rates())

    def _interarrival(self) -> float:
        cfg = self.config
        mean = cfg.mean_interarrival_s
        if cfg.interarrival_dist == "exponential":
            return float(self._arrival_rng.exponential(mean))
        if cfg.interarrival_dist == "uniform":
            return float(self._arrival_rng.uniform(0.0, 2 * mean))
        return mean

    # -- dynamics --------------------------------------------------------
    def step(self, action) -> StepOutcome:
        if not self._ready:
            raise RuntimeError("call reset() before step()")
        if self.terminal:
            raise RuntimeError("episode is terminal; call reset()")
        cfg = self.config
        if not isinstance(action, Action):
            action = Action.decode(action, cfg.n_servers, cfg.n_freq_levels)
        task = self.pending_task
        k = action.server_index
        server = self.servers[k]
        freq = action.freq_fraction * server.max_freq_hz
        rate = self.current_rates()[k]

        residual = residual_time(server)
        wait = queue_wait_time(server)
        tx = transmission_time(task, rate)
        comp = compute_time(task, freq)
        e = energy(task, tx, cfg.tx_power_w, freq, cfg.energy_coeff)

        accepted = server.enqueue(task, freq)
        if accepted:
            f_task = int(deadline_met(task, residual, wait, tx, comp))
        else:
            # overload: the task is still charged for its attempted service
            f_task = 0
            self.terminal = True
        raw = reward_raw(f_task, e.total_j, cfg.reward)
        reward = clip_reward(raw, cfg.reward)
        self.steps += 1

        info = {
            "task_completed": bool(f_task),
            "energy_j": e.total_j,
            "service_time_s": residual + wait + tx + comp,
            "overloaded": not accepted,
            "f_task": f_task,
            "reward_raw": raw,
            "server": k,
            "freq_hz": freq,
            "rate_bps": rate,
            "residual_s": residual,
            "wait_s": wait,
            "tx_s": tx,
            "compute_s": comp,
            "transmit_j": e.transmit_j,
            "compute_j": e.compute_j,
            "task": task,
        }

        if not self.terminal:
            self.clock += self._interarrival()
            for s in self.servers:
                s.advance_to(self.clock)
            self._slot_count += 1
            if self._slot_count >= cfg.lambda_max_tasks_per_slot:
                self._slot_count = 0
                self.slot += 1
                self._draw_fading()
            self.pending_task = self._new_task()
        return StepOutcome(self.observe(), reward, self.terminal, info)


class JsonlTrace:
    """Optional per-step trace, one JSON object per line."""

    def __init__(self, path):
        self._fh = open(path, "w")

    def write(self, episode: int, step: int, action: int, outcome: StepOutcome):
        rec = {"episode": episode, "step": step, "action": int(action),
               "reward": outcome.reward, "completed": outcome.info["task_completed"],
               "energy_j": outcome.info["energy_j"], "terminal": outcome.terminal}
        self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
