"""Timing and energy formulas for multi-server edge offloading.

Everything here is a pure function of its arguments except the two
``ServerState`` mutators (``enqueue`` and ``advance_to``) used by the
environment to move the simulation forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

DEFAULT_ENERGY_COEFF = 1e-26
INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class TaskProfile:
    data_size_bits: float
    cpu_cycles: float
    deadline_s: float
    user_id: int = 0
    task_id: int = 0

    def __post_init__(self):
        if not self.data_size_bits > 0:
            raise ValueError(f"data_size_bits must be > 0, got {self.data_size_bits}")
        if not self.cpu_cycles > 0:
            raise ValueError(f"cpu_cycles must be > 0, got {self.cpu_cycles}")
        if not self.deadline_s > 0:
            raise ValueError(f"deadline_s must be > 0, got {self.deadline_s}")


@dataclass(frozen=True)
class ChannelParams:
    bandwidth_hz: float
    tx_power_w: float
    fading_gain: float
    path_loss: float
    noise_power_w: float

    @property
    def snr(self) -> float:
        return self.tx_power_w * self.fading_gain * self.path_loss / self.noise_power_w


@dataclass(frozen=True)
class EnergyBreakdown:
    transmit_j: float
    compute_j: float
    total_j: float


@dataclass
class ServerState:
    """One edge server.

    ``running`` is the entry currently executing (started at
    ``head_started_s``); ``queue`` holds the entries waiting behind it and is
    what ``queue_capacity`` bounds.
    """

    max_freq_hz: float
    queue_capacity: int
    queue: List[Tuple[TaskProfile, float]] = field(default_factory=list)
    running: Optional[Tuple[TaskProfile, float]] = None
    head_started_s: float = 0.0
    sim_clock_s: float = 0.0

    @property
    def residual_time_s(self) -> float:
        return residual_time(self)

    @property
    def queue_len(self) -> int:
        return len(self.queue)

    @property
    def queued_cycles(self) -> float:
        return sum(task.cpu_cycles for task, _ in self.queue)

    def is_full(self) -> bool:
        return len(self.queue) >= self.queue_capacity

    def enqueue(self, task: TaskProfile, freq_hz: float) -> bool:
        """Add a task at ``freq_hz``. Returns False (and changes nothing) on overload."""
        if not 0 < freq_hz <= self.max_freq_hz * (1 + 1e-12):
            raise ValueError(f"frequency {freq_hz} outside (0, {self.max_freq_hz}]")
        if self.running is None:
            self.running = (task, freq_hz)
            self.head_started_s = self.sim_clock_s
            return True
        if self.is_full():
            return False
        self.queue.append((task, freq_hz))
        return True

    def advance_to(self, t: float) -> int:
        """Run the FIFO non-preemptively up to clock ``t``; returns #entries finished."""
        if t < self.sim_clock_s:
            raise ValueError("simulated clock cannot move backwards")
        done = 0
        while self.running is not None:
            task, f = self.running
            finish = self.head_started_s + compute_time(task, f)
            if finish > t:
                break
            done += 1
            if self.queue:
                self.running = self.queue.pop(0)
                self.head_started_s = finish
            else:
                self.running = None
        self.sim_clock_s = t
        return done


def transmission_rate(ch: ChannelParams) -> float:
    if not ch.bandwidth_hz > 0:
        raise ValueError(f"bandwidth must be > 0, got {ch.bandwidth_hz}")
    if not ch.noise_power_w > 0:
        raise ValueError(f"noise power must be > 0, got {ch.noise_power_w}")
    return ch.bandwidth_hz * math.log2(1.0 + ch.snr)


def transmission_time(task: TaskProfile, rate_bps: float) -> float:
    if not rate_bps > 0:
        raise ValueError(f"unusable channel: rate {rate_bps} bps")
    return task.data_size_bits / rate_bps


def compute_time(task: TaskProfile, freq_hz: float) -> float:
    if not freq_hz > 0:
        raise ValueError(f"frequency must be > 0, got {freq_hz}")
    return task.cpu_cycles / freq_hz


def queue_wait_time(server: ServerState) -> float:
    return sum(compute_time(task, f) for task, f in server.queue)


def residual_time(server: ServerState) -> float:
    if server.running is None:
        return 0.0
    task, f = server.running
    elapsed = server.sim_clock_s - server.head_started_s
    return max(0.0, compute_time(task, f) - elapsed)


def deadline_met(task: TaskProfile, residual_s: float, wait_s: float,
                 tx_s: float, compute_s: float) -> bool:
    # inclusive boundary
    return residual_s + wait_s + tx_s + compute_s <= task.deadline_s


def energy(task: Optional[TaskProfile], tx_time_s: float, tx_power_w: float,
           freq_hz: float, c_coeff: float = DEFAULT_ENERGY_COEFF,
           cpu_cycles: Optional[float] = None) -> EnergyBreakdown:
    """Transmit plus compute energy of one task.

    ``cpu_cycles`` overrides ``task.cpu_cycles`` (lets callers price a zero
    cycle count, which a TaskProfile cannot hold).
    """
    cycles = task.cpu_cycles if cpu_cycles is None else cpu_cycles
    transmit = tx_time_s * tx_power_w
    compute = c_coeff * freq_hz * freq_hz * cycles
    return EnergyBreakdown(transmit, compute, transmit + compute)


def action_space_size(n_tasks: int, n_servers: int, n_freq_levels: int) -> int:
    """Size of the joint one-shot action space for a batch of tasks.

    Counts ordered placements of ``n_tasks`` tasks into ``n_servers`` queues,
    times the number of frequency levels.
    """
    for name, v in (("n_tasks", n_tasks), ("n_servers", n_servers),
                    ("n_freq_levels", n_freq_levels)):
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    size = (math.factorial(n_tasks)
            * math.comb(n_tasks + n_servers - 1, n_servers - 1)
            * n_freq_levels)
    if size > INT64_MAX:
        raise OverflowError(f"action space size overflows int64 for "
                            f"({n_tasks}, {n_servers}, {n_freq_levels})")
    return size
