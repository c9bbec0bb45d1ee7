"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The desk-scale training runs are shared through a module fixture, so the whole
file costs four desk trainings (three seeds plus a repeat for determinism).
"""

import time
from pathlib import Path

import numpy as np
import pytest

from mec_offload import nn
from mec_offload.agent import (Batch, ReplayBuffer, Transition, evaluate,
                               eval_summary, run_training, td_targets)
from mec_offload.baselines import make_policy
from mec_offload.cli import load_config
from mec_offload.env import EnvConfig, MecEnv, normalize_block, reward_raw
from mec_offload.io import METRICS_FIELDS, rows_to_csv
from mec_offload.simcore import (ChannelParams, ServerState, TaskProfile, action_space_size,
                                 compute_time, deadline_met, energy, queue_wait_time,
                                 residual_time, transmission_rate, transmission_time)

from test_nn import check_random_net_gradient
from test_simcore import RATE_HI_PREC, TX_HI_PREC, brute_force_action_space

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
DESK_SEEDS = (0, 1, 2)
EVAL_SEED = 10_000
EVAL_EPISODES = 100


def rel_ok(got, want, rel=1e-9):
    return abs(got - want) <= rel * abs(want)


def test_criterion_01_formula_oracles(record_criterion):
    t0 = time.perf_counter()
    chan = lambda b, snr: ChannelParams(b, 1.0, 1.0, snr, 1.0)  # noqa: E731
    task = lambda d=1e6, c=1e7, dl=1.0: TaskProfile(d, c, dl)  # noqa: E731
    running = ServerState(8e9, 5, running=(task(c=8e6), 2e9), head_started_s=0.0,
                          sim_clock_s=1e-3)
    checks = {
        "rate_unit": rel_ok(transmission_rate(chan(1, 1)), 1.0),
        "rate_ten": rel_ok(transmission_rate(chan(10, 3)), 20.0),
        "rate_table": rel_ok(transmission_rate(ChannelParams(1e6, 0.5, 1.0, 1e-7, 5e-15)),
                             RATE_HI_PREC),
        "tx_two": rel_ok(transmission_time(task(d=2e5), 1e5), 2.0),
        "tx_table": rel_ok(transmission_time(task(d=2e7), RATE_HI_PREC), TX_HI_PREC),
        "compute_slow": rel_ok(compute_time(task(c=8e6), 2e9), 4e-3),
        "compute_fast": rel_ok(compute_time(task(c=1e7), 8e9), 1.25e-3),
        "compute_half": rel_ok(compute_time(task(c=1e7), 4e9), 2.5e-3),
        "queue_two": rel_ok(queue_wait_time(ServerState(
            8e9, 5, queue=[(task(c=8e6), 2e9), (task(c=1e7), 8e9)])), 5.25e-3),
        "queue_empty": queue_wait_time(ServerState(8e9, 5)) == 0.0,
        "residual": rel_ok(residual_time(running), 3e-3),
        "residual_idle": residual_time(ServerState(8e9, 5)) == 0.0,
        "energy_compute": rel_ok(energy(task(c=1e7), 0.0, 0.5, 2e9).total_j, 0.4),
        "energy_transmit": rel_ok(energy(None, 2.0, 0.5, 2e9, cpu_cycles=0.0).total_j, 1.0),
        "energy_combined": rel_ok(energy(task(c=1e7), 0.86, 0.5, 8e9).total_j, 6.83),
        "deadline_inclusive": deadline_met(task(dl=1.0), 0.1, 0.2, 0.3, 0.4),
        "deadline_over": not deadline_met(task(dl=1.0), 0.1, 0.2, 0.3, 0.4001),
    }
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 1.0
    record_criterion(1, "formula oracles", ok, f"{len(checks)} checks, {elapsed*1e3:.1f} ms"
                     + (f", failed {failed}" if failed else ""))
    assert ok


def test_criterion_02_action_space(record_criterion):
    t0 = time.perf_counter()
    grid = [(n, k, f) for n in (1, 2, 3) for k in (1, 2, 3) for f in (1, 2)]
    bad = [g for g in grid if action_space_size(*g) != brute_force_action_space(*g)]
    elapsed = time.perf_counter() - t0
    ok = not bad and action_space_size(2, 2, 1) == 6 and elapsed < 1.0
    record_criterion(2, "action-space formula vs enumeration", ok,
                     f"{len(grid)} cases, {elapsed*1e3:.1f} ms")
    assert ok


def test_criterion_03_gradient_check(record_criterion):
    t0 = time.perf_counter()
    results = [check_random_net_gradient(seed) for seed in range(20)]
    elapsed = time.perf_counter() - t0
    ok = all(results) and elapsed < 10.0
    record_criterion(3, "gradient check", ok, f"{sum(results)}/20 nets, {elapsed:.2f} s")
    assert ok


def test_criterion_04_adam(record_criterion):
    errs = []
    for g in (1.0, -0.3, 2.5e-4, 42.0):
        p = nn.MlpParams((1, 1), [np.array([[0.7]])], [np.zeros(1)])
        st = nn.AdamState.for_params(p, lr=5e-4)
        out = nn.adam_step(p, nn.MlpParams((1, 1), [np.array([[g]])], [np.zeros(1)]), st)
        errs.append(abs(out.weights[0][0, 0] - (0.7 - 5e-4 * g / (abs(g) + 1e-8))))
    p = nn.init_params((3, 4, 2), np.random.default_rng(0))
    out = nn.adam_step(p, nn.zeros_like(p), nn.AdamState.for_params(p))
    fixed = max(float(np.max(np.abs(a - b))) for a, b in zip(p.arrays(), out.arrays()))
    ok = max(errs) <= 1e-12 and fixed <= 1e-12
    record_criterion(4, "Adam first step and fixed point", ok,
                     f"max step error {max(errs):.1e}, zero-grad drift {fixed:.1e}")
    assert ok


def test_criterion_05_replay(record_criterion):
    fifo = ReplayBuffer(2, 1)
    for i in range(3):
        fifo.push(Transition(np.array([float(i)]), 0, 0.0, np.zeros(1), False))
    fifo_ok = [t.observation[0] for t in fifo.stored()] == [1.0, 2.0]

    buf = ReplayBuffer(100, 1)
    for i in range(100):
        buf.push(Transition(np.array([float(i)]), 0, 0.0, np.zeros(1), False))
    rng = np.random.default_rng(12345)
    idx = np.concatenate([buf.sample_indices(1, rng) for _ in range(100_000)])
    counts = np.bincount(idx, minlength=100)
    worst = float(np.max(np.abs(counts - 1000)) / 1000)
    ok = fifo_ok and worst <= 0.10
    record_criterion(5, "replay FIFO and uniformity", ok,
                     f"fifo {'exact' if fifo_ok else 'WRONG'}, worst deviation {worst:.1%}")
    assert ok


def test_criterion_06_td_targets(record_criterion):
    rng = np.random.default_rng(0)
    target = nn.init_params((4, 6, 3), rng)
    n = 64
    b = Batch(rng.normal(size=(n, 4)), rng.integers(0, 3, n), rng.normal(size=n),
              rng.normal(size=(n, 4)), rng.random(n) < 0.5)
    t = td_targets(b, target, 0.9)
    terminal_exact = bool(np.all(t[b.terminals] == b.rewards[b.terminals]))
    gamma0_exact = bool(np.all(td_targets(b, target, 0.0) == b.rewards))
    ok = terminal_exact and gamma0_exact
    record_criterion(6, "TD target contract", ok,
                     f"terminal exact {terminal_exact}, gamma=0 exact {gamma0_exact}")
    assert ok


def test_criterion_07_reward_bounds(record_criterion):
    cfg = EnvConfig()
    rc = cfg.reward
    env = MecEnv(cfg)
    rng = np.random.default_rng(7)
    env.reset(seed=0)
    in_bounds, max_err, n = True, 0.0, 10_000
    for i in range(n):
        out = env.step(int(rng.integers(env.n_actions)))
        in_bounds &= rc.clip_min <= out.reward <= rc.clip_max
        recomputed = reward_raw(out.info["f_task"], out.info["energy_j"], rc)
        max_err = max(max_err, abs(recomputed - out.info["reward_raw"]))
        if out.terminal:
            env.reset(seed=i + 1)
    ok = in_bounds and max_err <= 1e-9
    record_criterion(7, "reward bounds and recomputation", ok,
                     f"{n} steps, max recompute error {max_err:.1e}")
    assert ok


@pytest.fixture(scope="module")
def desk():
    env_cfg, agent_cfg, _ = load_config(DESK)
    runs, seconds = {}, {}
    for s in DESK_SEEDS:
        t0 = time.perf_counter()
        runs[s] = run_training(env_cfg, agent_cfg, seed=s)
        seconds[s] = time.perf_counter() - t0
    repeat = run_training(env_cfg, agent_cfg, seed=DESK_SEEDS[0])
    return {"env": env_cfg, "agent": agent_cfg, "runs": runs, "seconds": seconds,
            "repeat": repeat}


def test_criterion_08_determinism(desk, record_criterion):
    a = rows_to_csv(desk["runs"][DESK_SEEDS[0]].rows, METRICS_FIELDS)
    b = rows_to_csv(desk["repeat"].rows, METRICS_FIELDS)
    worst = max(desk["seconds"].values())
    cfg = desk["env"], desk["agent"]
    shape_ok = (cfg[0].n_servers == 3 and cfg[0].n_users == 10
                and tuple(cfg[1].hidden_layers) == (32, 32) and cfg[1].n_episodes == 600)
    ok = a == b and worst < 600 and shape_ok
    record_criterion(8, "determinism and desk runtime", ok,
                     f"identical={a == b}, slowest run {worst:.0f} s")
    assert ok


def test_criterion_09_convergence(desk, record_criterion):
    ratios = {}
    for s, rep in desk["runs"].items():
        r = rep.column("reward_sum")
        ratios[s] = r[550:600].mean() / r[:50].mean()
    passing = sum(v >= 1.5 for v in ratios.values())
    ok = passing >= 2
    record_criterion(9, "convergence ratio", ok,
                     ", ".join(f"seed {s}: x{v:.2f}" for s, v in ratios.items())
                     + f"; {passing}/3 seeds at x1.5")
    assert ok


def test_criterion_10_baseline_ordering(desk, record_criterion):
    env_cfg, t_max = desk["env"], desk["agent"].t_max
    dqn = [eval_summary(evaluate(env_cfg, rep.agent.policy(0.0), EVAL_EPISODES, t_max,
                                 seed=EVAL_SEED)) for rep in desk["runs"].values()]
    dqn_reward = float(np.mean([d["mean_reward"] for d in dqn]))
    dqn_done = float(np.mean([d["mean_completed"] for d in dqn]))
    greedy = eval_summary(evaluate(env_cfg, make_policy("greedy"), EVAL_EPISODES, t_max,
                                   seed=EVAL_SEED))
    rnd = eval_summary(evaluate(env_cfg, make_policy("random", seed=EVAL_SEED),
                                EVAL_EPISODES, t_max, seed=EVAL_SEED))
    ordering = dqn_reward >= greedy["mean_reward"] >= rnd["mean_reward"]
    margin = dqn_reward >= 1.10 * greedy["mean_reward"]
    more_done = dqn_done > greedy["mean_completed"]
    detail = (f"reward dqn {dqn_reward:.1f} / greedy {greedy['mean_reward']:.1f} / random "
              f"{rnd['mean_reward']:.1f}; completions dqn {dqn_done:.1f} / greedy "
              f"{greedy['mean_completed']:.1f}")
    record_criterion(10, "ordering dqn >= greedy >= random", ordering, detail)
    if not margin:
        record_criterion(10, "margin >= 10% over greedy not met", False,
                         f"x{dqn_reward / greedy['mean_reward']:.3f}", flag=True)
    if not more_done:
        record_criterion(10, "dqn does not complete strictly more tasks than greedy", False,
                         f"{dqn_done:.1f} vs {greedy['mean_completed']:.1f}", flag=True)
    assert ordering


def test_criterion_11_normalization(record_criterion):
    rng = np.random.default_rng(11)
    worst, zero_ok = 0.0, True
    env = MecEnv(EnvConfig())
    env.reset(seed=3)
    blocks = []
    for i in range(500):
        out = env.step(int(rng.integers(env.n_actions)))
        blocks.extend(out.next_observation.blocks())
        if out.terminal:
            env.reset(seed=i)
    for _ in range(500):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 3)))
        raw = rng.normal(size=shape) * 10.0 ** rng.integers(-200, 200)
        blocks.append(normalize_block(raw))
    for b in blocks:
        if np.any(b != 0):
            worst = max(worst, abs(float(np.sqrt(np.sum(b * b))) - 1.0))
    for shape in ((3,), (3, 5), (1,)):
        z = np.zeros(shape)
        zero_ok &= np.array_equal(normalize_block(z), z)
    ok = worst <= 1e-12 and zero_ok
    record_criterion(11, "block normalization", ok,
                     f"{len(blocks)} blocks, worst |norm-1| {worst:.1e}, zero blocks kept "
                     f"{zero_ok}")
    assert ok
