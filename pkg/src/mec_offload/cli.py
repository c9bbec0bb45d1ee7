"""Experiment runner: train, eval, sweep and summarize.

Every run writes a manifest holding the fully resolved config; passing that
manifest back through ``--config`` replays the run exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import yaml

from . import __version__, nn
from .agent import (AgentConfig, DQNAgent, TrainingDiverged, evaluate, eval_summary,
                    run_training)
from .baselines import PolicyKind, make_policy
from .env import EnvConfig, JsonlTrace
from .io import METRICS_FIELDS, atomic_write_text, read_metrics_csv, rows_to_csv, write_csv

log = logging.getLogger("mec_offload")

MODES = ("train", "eval", "sweep_epsilon", "sweep_users")
POLICIES = ("dqn",) + tuple(k.value for k in PolicyKind)
EVAL_FIELDS = ["policy", "seed", "episodes", "mean_reward", "mean_completed",
               "completion_rate", "mean_energy_j", "energy_per_task_j"]
SWEEP_FIELDS = ["kind", "value", "seed", "episodes", "first_mean_reward", "last_mean_reward",
                "ratio", "episodes_to_90pct", "last_mean_completed", "last_mean_energy_j"]
SUMMARY_FIELDS = ["run", "episodes", "first_mean_reward", "last_mean_reward",
                  "final_moving_avg", "tasks_completed", "tasks_failed", "energy_j"]


class ConfigError(ValueError):
    pass


def config_hash(env: EnvConfig, agent: AgentConfig) -> str:
    blob = json.dumps({"env": env.to_dict(), "agent": agent.to_dict()}, sort_keys=True,
                      separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e-3" (no dot) as a string; accept it as a float like JSON does
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?(?:[eE][-+]?[0-9]+)?
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def load_config(path) -> tuple:
    """Read a YAML/JSON config or a run manifest.

    Returns (env_config, agent_config, seed or None). Unknown keys are errors.
    """
    try:
        text = Path(path).read_text()
        if Path(path).suffix == ".json":
            doc = json.loads(text)
        else:
            doc = yaml.load(text, Loader=_Loader) or {}
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    extra = set(doc) - {"env", "agent", "seed", "mode", "policy", "config_sha256", "version"}
    if extra:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(extra)}")
    try:
        env = EnvConfig.from_dict(doc.get("env") or {})
        agent = AgentConfig.from_dict(doc.get("agent") or {})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e
    if "config_sha256" in doc and doc["config_sha256"] != config_hash(env, agent):
        raise ConfigError(f"{path}: manifest hash does not match its config")
    seed = doc.get("seed")
    return env, agent, None if seed is None else int(seed)


@dataclass
class ExperimentPlan:
    env: EnvConfig
    agent: AgentConfig
    mode: str
    output_dir: Path
    seeds: List[int] = field(default_factory=lambda: [0])
    policy: str = "dqn"
    checkpoint: Optional[Path] = None
    values: List[float] = field(default_factory=list)
    eval_episodes: int = 100
    epsilon: float = 0.0
    trace: bool = False
    workers: int = 1

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.mode == "eval" and self.policy == "dqn" and self.checkpoint is None:
            raise ConfigError("eval with the dqn policy needs --checkpoint")
        if self.mode == "train" and self.policy != "dqn":
            raise ConfigError("only the dqn policy can be trained")
        if self.mode.startswith("sweep") and not self.values:
            raise ConfigError("sweeps need --values")
        if self.eval_episodes < 1 or self.workers < 1:
            raise ConfigError("episode and worker counts must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        self.env.validate()
        self.agent.validate()


def write_manifest(path, plan: ExperimentPlan, env: EnvConfig, agent: AgentConfig, seed: int):
    doc = {
        "version": __version__,
        "mode": plan.mode,
        "policy": plan.policy,
        "seed": seed,
        "config_sha256": config_hash(env, agent),
        "env": env.to_dict(),
        "agent": agent.to_dict(),
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _trace_for(plan: ExperimentPlan, path: Path):
    return JsonlTrace(path) if plan.trace else None


def train_one(plan: ExperimentPlan, env: EnvConfig, agent: AgentConfig, seed: int,
              out: Path) -> List[dict]:
    out.mkdir(parents=True, exist_ok=True)
    trace = _trace_for(plan, out / "trace.jsonl")
    try:
        report = run_training(env, agent, seed=seed, trace=trace, progress_every=50)
    finally:
        if trace is not None:
            trace.close()
    write_csv(out / "metrics.csv", report.rows, METRICS_FIELDS)
    nn.save_checkpoint(report.agent.params, out / "checkpoint.bin")
    write_manifest(out / "manifest.json", plan, env, agent, seed)
    return report.rows


def build_policy(plan: ExperimentPlan, seed: int):
    if plan.policy != "dqn":
        return make_policy(plan.policy, seed)
    agent = DQNAgent(plan.env.obs_dim, plan.env.n_actions, plan.agent, seed=seed)
    sizes = (plan.env.obs_dim, *plan.agent.hidden_layers, plan.env.n_actions)
    agent.params = nn.load_checkpoint(plan.checkpoint, expect_sizes=sizes)
    return agent.policy(plan.epsilon)


def run_train(plan: ExperimentPlan) -> None:
    jobs = [(s, plan.output_dir / f"seed{s}") for s in plan.seeds]
    _map(plan.workers, lambda j: train_one(plan, plan.env, plan.agent, *j), jobs)


def run_eval(plan: ExperimentPlan) -> List[dict]:
    summary = []
    plan.output_dir.mkdir(parents=True, exist_ok=True)
    for s in plan.seeds:
        trace = _trace_for(plan, plan.output_dir / f"eval_{plan.policy}_seed{s}.jsonl")
        try:
            rows = evaluate(plan.env, build_policy(plan, s), plan.eval_episodes,
                            plan.agent.t_max, seed=s, epsilon=plan.epsilon, trace=trace)
        finally:
            if trace is not None:
                trace.close()
        write_csv(plan.output_dir / f"eval_{plan.policy}_seed{s}.csv", rows, METRICS_FIELDS)
        summary.append({"policy": plan.policy, "seed": s, **eval_summary(rows)})
    write_csv(plan.output_dir / "eval_summary.csv", summary, EVAL_FIELDS)
    write_manifest(plan.output_dir / "manifest.json", plan, plan.env, plan.agent,
                   plan.seeds[0])
    return summary


def scaled_users(env: EnvConfig, n_users: int) -> EnvConfig:
    """Change the population; aggregate arrival rate grows linearly with it."""
    ia = env.mean_interarrival_s * env.n_users / n_users
    return replace(env, n_users=int(n_users), mean_interarrival_s=ia)


def episodes_to_fraction(rewards: np.ndarray, window: int, frac: float = 0.9) -> int:
    """First episode whose moving average reaches ``frac`` of the final level."""
    ma = moving_average(rewards, window)
    final = ma[-1]
    hit = np.nonzero(ma >= frac * final)[0] if final > 0 else np.array([len(ma) - 1])
    return int(hit[0]) + 1


def run_sweep(plan: ExperimentPlan, window: int = 50) -> List[dict]:
    kind = plan.mode.split("_", 1)[1]
    jobs = []
    for v in plan.values:
        if kind == "epsilon":
            env, agent = plan.env, replace(plan.agent, eps_decay=float(v))
        else:
            env, agent = scaled_users(plan.env, int(v)), plan.agent
        for s in plan.seeds:
            jobs.append((v, s, env, agent, plan.output_dir / f"{kind}_{v:g}" / f"seed{s}"))

    def _one(job):
        v, s, env, agent, out = job
        return v, s, train_one(plan, env, agent, s, out)

    summary = []
    for v, s, rows in _map(plan.workers, _one, jobs):
        r = np.array([row["reward_sum"] for row in rows])
        n = min(window, len(r))
        first, last = r[:n].mean(), r[-n:].mean()
        summary.append({
            "kind": kind, "value": v, "seed": s, "episodes": len(r),
            "first_mean_reward": first, "last_mean_reward": last,
            "ratio": last / first if first else float("nan"),
            "episodes_to_90pct": episodes_to_fraction(r, window),
            "last_mean_completed": float(np.mean([x["tasks_completed"] for x in rows[-n:]])),
            "last_mean_energy_j": float(np.mean([x["energy_j"] for x in rows[-n:]])),
        })
    write_csv(plan.output_dir / "sweep_summary.csv", summary, SWEEP_FIELDS)
    return summary


def _map(workers: int, fn, jobs):
    # results are collected in job order, so output never depends on scheduling
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def run(plan: ExperimentPlan):
    plan.validate()
    if plan.mode == "train":
        return run_train(plan)
    if plan.mode == "eval":
        return run_eval(plan)
    return run_sweep(plan)


def moving_average(x: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` points average what exists so far."""
    if window < 1:
        raise ValueError("window must be positive")
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def summarize(csv_paths: Sequence, window: int = 50) -> List[dict]:
    out = []
    for p in csv_paths:
        rows = read_metrics_csv(p)
        if not rows:
            raise ValueError(f"{p}: no episodes")
        r = np.array([row["reward_sum"] for row in rows])
        n = min(window, len(r))
        out.append({
            "run": str(p),
            "episodes": len(r),
            "first_mean_reward": float(r[:n].mean()),
            "last_mean_reward": float(r[-n:].mean()),
            "final_moving_avg": float(moving_average(r, window)[-1]),
            "tasks_completed": int(sum(row["tasks_completed"] for row in rows)),
            "tasks_failed": int(sum(row["tasks_failed"] for row in rows)),
            "energy_j": float(sum(row["energy_j"] for row in rows)),
        })
    return out


def _int_list(s: str) -> List[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _float_list(s: str) -> List[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mec-offload", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML/JSON config or a run manifest")
        sp.add_argument("--seed", type=_int_list, help="comma-separated seeds")
        sp.add_argument("--out", type=Path, required=True)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--trace", action="store_true", help="write per-step JSONL traces")
        sp.add_argument("--workers", type=int, default=1)

    common(sub.add_parser("train", help="train DQN agents, one per seed"))
    ev = sub.add_parser("eval", help="roll out a policy at fixed epsilon")
    common(ev)
    ev.add_argument("--policy", choices=POLICIES, default="dqn")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--epsilon", type=float, default=0.0)
    sw = sub.add_parser("sweep", help="train across epsilon decays or user counts")
    common(sw)
    sw.add_argument("--kind", choices=("epsilon", "users"), required=True)
    sw.add_argument("--values", type=_float_list, required=True)
    sm = sub.add_parser("summarize", help="aggregate metrics CSVs")
    sm.add_argument("csv", nargs="+", type=Path)
    sm.add_argument("--window", type=int, default=50)
    sm.add_argument("--out", type=Path, help="write the table here instead of stdout")
    return p


def plan_from_args(args) -> ExperimentPlan:
    if args.config is not None:
        env, agent, cfg_seed = load_config(args.config)
    else:
        env, agent, cfg_seed = EnvConfig(), AgentConfig(), None
    seeds = args.seed or [cfg_seed if cfg_seed is not None else env.seed]
    mode = args.command if args.command != "sweep" else f"sweep_{args.kind}"
    plan = ExperimentPlan(env=env, agent=agent, mode=mode, output_dir=args.out, seeds=seeds,
                          trace=args.trace, workers=args.workers)
    if args.command == "eval":
        plan.policy, plan.checkpoint, plan.epsilon = args.policy, args.checkpoint, args.epsilon
        if args.episodes is not None:
            plan.eval_episodes = args.episodes
    elif args.episodes is not None:
        plan.agent = replace(agent, n_episodes=args.episodes)
    if args.command == "sweep":
        plan.values = args.values
    return plan


def _setup_logging():
    level = os.environ.get("MEC_RL_LOG", "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _error_record(exc: BaseException, code: int, out: Optional[Path]) -> int:
    rec = {"status": "error", "exit_code": code, "error_type": type(exc).__name__,
           "message": str(exc)}
    if isinstance(exc, TrainingDiverged):
        rec.update(episode=exc.episode, step=exc.step)
    line = json.dumps(rec, sort_keys=True)
    print(line, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            atomic_write_text(out / "error.json", line + "\n")
        except OSError:
            pass
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    # summarize's --out is a file, not a run directory
    out = None if args.command == "summarize" else args.out
    try:
        if args.command == "summarize":
            table = summarize(args.csv, args.window)
            if args.out is None:
                sys.stdout.write(_table_text(table))
            else:
                write_csv(args.out, table, SUMMARY_FIELDS)
            return 0
        result = run(plan_from_args(args))
        if isinstance(result, list):
            sys.stdout.write(_table_text(result))
        return 0
    except TrainingDiverged as e:
        return _error_record(e, 3, out)
    except (ConfigError, ValueError, TypeError, KeyError) as e:
        return _error_record(e, 2, out)
    except OSError as e:
        return _error_record(e, 4, out)


def _table_text(rows: List[dict]) -> str:
    if not rows:
        return ""
    return rows_to_csv(rows, list(rows[0]))


if __name__ == "__main__":
    sys.exit(main())
