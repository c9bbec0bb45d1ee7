"""DQN learner: epsilon-greedy acting, uniform replay, fixed target network."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .env import EnvConfig, JsonlTrace, MecEnv

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, episode: int, step: int):
        super().__init__(f"non-finite loss at episode {episode}, step {step}")
        self.episode = episode
        self.step = step


@dataclass
class AgentConfig:
    gamma: float = 0.9
    batch_size: int = 256
    lr: float = 5e-4
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: float = 0.995
    target_sync_every: int = 10
    sync_unit: str = "episode"  # or "step"
    replay_capacity: int = 100_000
    t_max: int = 200
    n_episodes: int = 600
    hidden_layers: Tuple[int, ...] = (256, 512, 512, 512, 256)
    error_clip: Optional[float] = None

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
        if "hidden_layers" in d:
            d["hidden_layers"] = tuple(int(h) for h in d["hidden_layers"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_layers"] = list(self.hidden_layers)
        return out

    def validate(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0 < self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 < eps_end <= eps_start <= 1")
        if not 0 < self.eps_decay < 1:
            raise ValueError(f"eps_decay must lie in (0, 1), got {self.eps_decay}")
        for name in ("batch_size", "target_sync_every", "replay_capacity", "t_max",
                     "n_episodes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.batch_size > self.replay_capacity:
            raise ValueError("batch_size cannot exceed replay_capacity")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.sync_unit not in ("episode", "step"):
            raise ValueError("sync_unit must be 'episode' or 'step'")
        if self.error_clip is not None and not self.error_clip > 0:
            raise ValueError("error_clip must be positive when set")


@dataclass
class Transition:
    observation: np.ndarray
    action_encoded: int
    reward: float
    next_observation: np.ndarray
    terminal: bool


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return len(self.actions)

    def transitions(self) -> List[Transition]:
        return [Transition(self.obs[i], int(self.actions[i]), float(self.rewards[i]),
                           self.next_obs[i], bool(self.terminals[i]))
                for i in range(len(self))]

    @classmethod
    def from_transitions(cls, ts: Sequence[Transition]) -> "Batch":
        return cls(np.stack([t.observation for t in ts]),
                   np.array([t.action_encoded for t in ts], dtype=np.int64),
                   np.array([t.reward for t in ts], dtype=np.float64),
                   np.stack([t.next_observation for t in ts]),
                   np.array([t.terminal for t in ts], dtype=bool))


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten when full."""

    def __init__(self, capacity: int, obs_dim: int,
                 reward_bounds: Optional[Tuple[float, float]] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.reward_bounds = reward_bounds
        self._obs = np.zeros((capacity, obs_dim))
        self._next = np.zeros((capacity, obs_dim))
        self._act = np.zeros(capacity, dtype=np.int64)
        self._rew = np.zeros(capacity)
        self._term = np.zeros(capacity, dtype=bool)
        self.write_cursor = 0
        self.current_len = 0

    def __len__(self):
        return self.current_len

    def push(self, t: Transition) -> None:
        if self.reward_bounds is not None:
            lo, hi = self.reward_bounds
            if not lo <= t.reward <= hi:
                raise ValueError(f"reward {t.reward} outside clip bounds [{lo}, {hi}]")
        if len(t.observation) != self.obs_dim or len(t.next_observation) != self.obs_dim:
            raise ValueError("observation length mismatch")
        i = self.write_cursor
        self._obs[i] = t.observation
        self._next[i] = t.next_observation
        self._act[i] = t.action_encoded
        self._rew[i] = t.reward
        self._term[i] = t.terminal
        self.write_cursor = (i + 1) % self.capacity
        self.current_len = min(self.current_len + 1, self.capacity)

    def ready(self, batch_size: int) -> bool:
        return self.current_len >= batch_size

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> Optional[np.ndarray]:
        if not self.ready(batch_size):
            return None
        return rng.integers(0, self.current_len, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Optional[Batch]:
        """Uniform draw with replacement; ``None`` while fewer than ``batch_size`` are stored."""
        idx = self.sample_indices(batch_size, rng)
        if idx is None:
            return None
        return Batch(self._obs[idx], self._act[idx], self._rew[idx],
                     self._next[idx], self._term[idx])

    def stored(self) -> List[Transition]:
        """Contents oldest-first."""
        start = self.write_cursor if self.current_len == self.capacity else 0
        order = [(start + j) % self.capacity for j in range(self.current_len)]
        return [Transition(self._obs[i].copy(), int(self._act[i]), float(self._rew[i]),
                           self._next[i].copy(), bool(self._term[i])) for i in order]


def select_action(q_values, epsilon: float, rng: np.random.Generator) -> int:
    q = np.asarray(q_values)
    if q.size == 0:
        raise ValueError("empty Q-value vector")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    # draw the coin every call so the RNG stream does not depend on epsilon
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))  # lowest index on ties


def td_targets(batch: Batch, target_params: nn.MlpParams, gamma: float) -> np.ndarray:
    q_next = nn.forward(target_params, batch.next_obs)
    bootstrap = gamma * q_next.max(axis=1)
    return np.where(batch.terminals, batch.rewards, batch.rewards + bootstrap)


def decay_epsilon(eps: float, eps_decay: float, eps_end: float) -> float:
    return max(eps_end, eps * eps_decay)


class DQNAgent:
    def __init__(self, obs_dim: int, n_actions: int, config: AgentConfig, seed: int = 0,
                 reward_bounds: Optional[Tuple[float, float]] = None):
        config.validate()
        self.config = config
        init_ss, act_ss, replay_ss = np.random.SeedSequence(seed).spawn(3)
        self.act_rng = np.random.default_rng(act_ss)
        self.replay_rng = np.random.default_rng(replay_ss)
        sizes = (obs_dim, *config.hidden_layers, n_actions)
        self.params = nn.init_params(sizes, np.random.default_rng(init_ss))
        self.target = nn.copy_params(self.params)
        self.adam = nn.AdamState.for_params(self.params, lr=config.lr)
        self.buffer = ReplayBuffer(config.replay_capacity, obs_dim, reward_bounds)
        self.epsilon = config.eps_start

    def q_values(self, obs) -> np.ndarray:
        return nn.forward(self.params, obs)

    def act(self, obs, epsilon: Optional[float] = None) -> int:
        eps = self.epsilon if epsilon is None else epsilon
        return select_action(self.q_values(obs), eps, self.act_rng)

    def train_step(self, batch: Batch) -> float:
        targets = td_targets(batch, self.target, self.config.gamma)
        loss, grads = nn.mse_loss_and_grad(self.params, batch.obs, batch.actions, targets,
                                           error_clip=self.config.error_clip)
        self.params = nn.adam_step(self.params, grads, self.adam)
        return loss

    def sync_target(self) -> None:
        self.target = nn.copy_params(self.params)

    def policy(self, epsilon: float = 0.0) -> Callable[[MecEnv], int]:
        """``policy(env)`` acting on the env's current observation."""
        def _policy(env: MecEnv) -> int:
            return self.act(env.observe().flattened, epsilon)
        return _policy


@dataclass
class TrainingReport:
    rows: List[dict] = field(default_factory=list)
    agent: Optional[DQNAgent] = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


def episode_env_seed(run_seed: int, episode: int) -> Tuple[int, int]:
    return (int(run_seed), int(episode))


def run_training(env_config: EnvConfig, agent_config: AgentConfig, seed: Optional[int] = None,
                 trace: Optional[JsonlTrace] = None, progress_every: int = 0) -> TrainingReport:
    """Train a DQN agent; one report row per episode."""
    seed = env_config.seed if seed is None else seed
    env = MecEnv(env_config)
    rc = env_config.reward
    agent = DQNAgent(env.obs_dim, env.n_actions, agent_config, seed=seed,
                     reward_bounds=(rc.clip_min, rc.clip_max))
    cfg = agent_config
    report = TrainingReport(agent=agent)
    total_steps = 0

    for episode in range(1, cfg.n_episodes + 1):
        obs = env.reset(seed=episode_env_seed(seed, episode)).flattened
        reward_sum = energy = 0.0
        completed = steps = 0
        losses = []
        for step in range(1, cfg.t_max + 1):
            a = agent.act(obs)
            out = env.step(a)
            nxt = out.next_observation.flattened
            # hitting t_max is a truncation, not a terminal state
            agent.buffer.push(Transition(obs, a, out.reward, nxt, out.terminal))
            if trace is not None:
                trace.write(episode, step, a, out)
            reward_sum += out.reward
            energy += out.info["energy_j"]
            completed += out.info["f_task"]
            steps += 1
            total_steps += 1

            batch = agent.buffer.sample(cfg.batch_size, agent.replay_rng)
            if batch is not None:
                loss = agent.train_step(batch)
                if not math.isfinite(loss):
                    raise TrainingDiverged(episode, step)
                losses.append(loss)
            if cfg.sync_unit == "step" and total_steps % cfg.target_sync_every == 0:
                agent.sync_target()
            obs = nxt
            if out.terminal:
                break

        report.rows.append({
            "episode": episode,
            "reward_sum": reward_sum,
            "tasks_completed": completed,
            "tasks_failed": steps - completed,
            "energy_j": energy,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "epsilon": agent.epsilon,
        })
        if cfg.sync_unit == "episode" and episode % cfg.target_sync_every == 0:
            agent.sync_target()
        agent.epsilon = decay_epsilon(agent.epsilon, cfg.eps_decay, cfg.eps_end)
        if progress_every and episode % progress_every == 0:
            log.info("episode %d reward %.2f steps %d eps %.3f", episode, reward_sum,
                     steps, report.rows[-1]["epsilon"])
    return report


def evaluate(env_config: EnvConfig, policy: Callable[[MecEnv], int], n_episodes: int,
             t_max: int, seed: int = 0, epsilon: float = 0.0,
             trace: Optional[JsonlTrace] = None) -> List[dict]:
    """Roll out a fixed policy; rows follow the training metrics schema."""
    env = MecEnv(env_config)
    rows = []
    for episode in range(1, n_episodes + 1):
        env.reset(seed=episode_env_seed(seed, episode))
        reward_sum = energy = 0.0
        completed = steps = 0
        for step in range(1, t_max + 1):
            a = policy(env)
            out = env.step(a)
            if trace is not None:
                trace.write(episode, step, a, out)
            reward_sum += out.reward
            energy += out.info["energy_j"]
            completed += out.info["f_task"]
            steps += 1
            if out.terminal:
                break
        rows.append({"episode": episode, "reward_sum": reward_sum,
                     "tasks_completed": completed, "tasks_failed": steps - completed,
                     "energy_j": energy, "mean_loss": float("nan"), "epsilon": epsilon})
    return rows


def eval_summary(rows: Sequence[dict]) -> dict:
    completed = sum(r["tasks_completed"] for r in rows)
    attempted = completed + sum(r["tasks_failed"] for r in rows)
    energy = sum(r["energy_j"] for r in rows)
    return {
        "episodes": len(rows),
        "mean_reward": float(np.mean([r["reward_sum"] for r in rows])),
        "mean_completed": completed / len(rows),
        "completion_rate": completed / attempted if attempted else 0.0,
        "mean_energy_j": energy / len(rows),
        "energy_per_task_j": energy / completed if completed else float("inf"),
    }
