"""Seedable edge-offloading simulator with a from-scratch DQN scheduler."""

from .agent import AgentConfig, DQNAgent, evaluate, eval_summary, run_training
from .env import Action, EnvConfig, MecEnv, RewardConfig
from .simcore import ServerState, TaskProfile

__all__ = ["Action", "AgentConfig", "DQNAgent", "EnvConfig", "MecEnv", "RewardConfig",
           "ServerState", "TaskProfile", "evaluate", "eval_summary", "run_training"]
__version__ = "0.1.0"
