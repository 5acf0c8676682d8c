"""Fluid model of core migration across the NORMAL / KV / RV levels.

Queued work is continuous volume (KB). Reads that hit the cache are served by
NORMAL alone. Misses are prefetched by KV *and* RV (each processes the full
volume) and then served by NORMAL. Writes are taken by NORMAL first and then
written back by KV and RV. Each coupled KV/RV stage completes at the minimum
of the two levels' cumulative processed volume.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .workload import IS_READ, N_TYPES, SIZES, IntervalWorkload, WorkloadTrace

__all__ = [
    "Level",
    "Action",
    "ACTION_NAMES",
    "RewardMode",
    "SimConfig",
    "StageQueues",
    "SimState",
    "StepResult",
    "SimulationDone",
    "OBS_DIM",
    "N_ACTIONS",
    "reset",
    "step",
    "decompose_demand",
    "legal_actions",
    "observe",
    "StorageEnv",
    "write_episode_log",
]

OBS_DIM = 6 + N_TYPES + 1


class Level(enum.IntEnum):
    N = 0
    K = 1
    R = 2


class Action(enum.IntEnum):
    Noop = 0
    N2K = 1
    N2R = 2
    K2N = 3
    K2R = 4
    R2N = 5
    R2K = 6

    @property
    def move(self) -> tuple[Level, Level] | None:
        return _MOVES[self]

    @property
    def label(self) -> str:
        """Display name such as ``"Noop"`` or ``"N=>R"``."""
        if self is Action.Noop:
            return "Noop"
        src, dst = self.move
        return f"{src.name}=>{dst.name}"

    @classmethod
    def from_move(cls, src: Level, dst: Level) -> "Action":
        for a, mv in _MOVES.items():
            if mv == (src, dst):
                return a
        raise ValueError(f"no action moves {src.name} to {dst.name}")


_MOVES = {
    Action.Noop: None,
    Action.N2K: (Level.N, Level.K),
    Action.N2R: (Level.N, Level.R),
    Action.K2N: (Level.K, Level.N),
    Action.K2R: (Level.K, Level.R),
    Action.R2N: (Level.R, Level.N),
    Action.R2K: (Level.R, Level.K),
}
N_ACTIONS = len(Action)
ACTION_NAMES = tuple(a.label for a in Action)


class RewardMode(str, enum.Enum):
    DENSE = "Dense"
    TERMINAL = "Terminal"
    WORK = "Work"


@dataclass(frozen=True)
class SimConfig:
    n_cores: int = 12
    core_capacity_kb: float = 1024.0
    cache_miss_rate: float = 0.3
    migration_penalty: float = 0.5
    idle_lambda: float = 0.5
    min_cores_per_level: int = 1
    horizon_factor: float = 10.0
    q_ref: int = 400
    reward_mode: RewardMode = RewardMode.DENSE
    gamma: float = 0.99
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "reward_mode", RewardMode(self.reward_mode))
        if self.min_cores_per_level < 1:
            raise ValueError("min_cores_per_level must be positive")
        if self.n_cores < 3 * self.min_cores_per_level:
            raise ValueError("n_cores must be at least 3 * min_cores_per_level")
        if self.core_capacity_kb <= 0:
            raise ValueError("core_capacity_kb must be positive")
        if not 0.0 <= self.cache_miss_rate <= 1.0:
            raise ValueError("cache_miss_rate must lie in [0, 1]")
        if not 0.0 <= self.migration_penalty <= 1.0:
            raise ValueError("migration_penalty must lie in [0, 1]")
        if self.idle_lambda < 0:
            raise ValueError("idle_lambda must be non-negative")
        if self.horizon_factor <= 1:
            raise ValueError("horizon_factor must exceed 1")
        if self.q_ref <= 0:
            raise ValueError("q_ref must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    def k_max(self, T: int) -> int:
        return math.ceil(self.horizon_factor * T)


@dataclass
class StageQueues:
    prefetch_kv: float = 0.0
    prefetch_rv: float = 0.0
    normal_read: float = 0.0
    normal_write: float = 0.0
    writeback_kv: float = 0.0
    writeback_rv: float = 0.0
    # cumulative inflow / processed volume per coupled queue
    prefetch_in: float = 0.0
    prefetch_kv_done: float = 0.0
    prefetch_rv_done: float = 0.0
    prefetch_forwarded: float = 0.0
    writeback_in: float = 0.0
    writeback_kv_done: float = 0.0
    writeback_rv_done: float = 0.0
    writeback_completed: float = 0.0

    QUEUE_FIELDS = (
        "prefetch_kv",
        "prefetch_rv",
        "normal_read",
        "normal_write",
        "writeback_kv",
        "writeback_rv",
    )

    def backlog(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.QUEUE_FIELDS)

    def empty(self) -> bool:
        return all(v == 0.0 for v in self.backlog())

    def copy(self) -> "StageQueues":
        return replace(self)


@dataclass
class SimState:
    cores: tuple[int, int, int]
    queues: StageQueues = field(default_factory=StageQueues)
    interval: int = 0
    last_util: tuple[float, float, float] = (0.0, 0.0, 0.0)
    penalized_core_level: Level | None = None
    injected_total_kb: float = 0.0
    completed_total_kb: float = 0.0
    total_volume_kb: float = 0.0
    total_work_kb: float = 0.0
    truncated: bool = False
    done: bool = False

    def copy(self) -> "SimState":
        return replace(self, queues=self.queues.copy())

    def key(self) -> tuple:
        """Hashable snapshot of everything that drives future dynamics."""
        return (
            self.cores,
            self.queues.backlog(),
            self.queues.prefetch_kv_done - self.queues.prefetch_rv_done,
            self.queues.writeback_kv_done - self.queues.writeback_rv_done,
            self.interval,
            self.penalized_core_level,
            self.done,
        )


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    makespan_so_far: int
    action_taken: Action = Action.Noop
    utilization: tuple[float, float, float] = (0.0, 0.0, 0.0)
    completed_kb: float = 0.0


class SimulationDone(RuntimeError):
    """Raised when stepping an episode that already finished."""


def decompose_demand(iw: IntervalWorkload, C: float, catalog=None) -> tuple[float, float, float]:
    """Split one interval's requests into (hit read, miss prefetch, write) KB."""
    return _decompose(np.asarray(iw.ratios, dtype=float), int(iw.count), C)


def _decompose(ratios: np.ndarray, count: int, C: float) -> tuple[float, float, float]:
    if count == 0:
        return 0.0, 0.0, 0.0
    volume = np.round(count * ratios) * SIZES
    read = float(volume[IS_READ].sum())
    write = float(volume[~IS_READ].sum())
    return (1.0 - C) * read, C * read, write


def _trace_volume(trace: WorkloadTrace, C: float) -> tuple[float, float]:
    """(requested KB, stage work KB); misses and writes pass through all three levels."""
    volume = work = 0.0
    for t in range(trace.T):
        hit, miss, write = _decompose(trace.ratios[t], int(trace.counts[t]), C)
        volume += hit + miss + write
        work += hit + 3.0 * (miss + write)
    return volume, work


def observe(state: SimState, config: SimConfig, trace: WorkloadTrace) -> np.ndarray:
    """21-vector: core shares, utilizations, next-interval mixture, scaled count."""
    obs = np.zeros(OBS_DIM)
    obs[0:3] = np.asarray(state.cores, dtype=float) / config.n_cores
    obs[3:6] = state.last_util
    if state.interval < trace.T:
        obs[6 : 6 + N_TYPES] = trace.ratios[state.interval]
        obs[-1] = min(trace.counts[state.interval] / config.q_ref, 2.0)
    return obs


def _initial_cores(config: SimConfig) -> tuple[int, int, int]:
    base, rem = divmod(config.n_cores, 3)
    return (base + rem, base, base)


def reset(config: SimConfig, trace: WorkloadTrace) -> tuple[SimState, np.ndarray]:
    """Start an episode with cores split evenly (remainder to NORMAL)."""
    if not isinstance(trace, WorkloadTrace):
        raise TypeError("trace must be a WorkloadTrace")
    cores = _initial_cores(config)
    if min(cores) < config.min_cores_per_level:
        raise ValueError("initial split violates min_cores_per_level")
    volume, work = _trace_volume(trace, config.cache_miss_rate)
    state = SimState(cores=cores, total_volume_kb=volume, total_work_kb=work)
    return state, observe(state, config, trace)


def legal_actions(state: SimState, config: SimConfig) -> set[Action]:
    legal = {Action.Noop}
    for a in Action:
        if a.move is not None and state.cores[a.move[0]] > config.min_cores_per_level:
            legal.add(a)
    return legal


def _process(cap: float, *queues: float) -> tuple[float, ...]:
    """Split capacity across queues in proportion to their volume."""
    total = sum(queues)
    if total <= cap:
        return queues
    return tuple(cap * q / total for q in queues)


def step(
    state: SimState,
    action: Action | int,
    config: SimConfig,
    trace: WorkloadTrace,
    rng: np.random.Generator,
) -> tuple[SimState, StepResult]:
    """Advance one interval. Returns a new state; ``state`` is left untouched."""
    if state.done:
        raise SimulationDone("episode already finished")
    action = Action(int(action))
    s = state.copy()
    q = s.queues
    N = config.n_cores
    m = config.core_capacity_kb

    # (1) migration; illegal moves are coerced to Noop
    cores = list(s.cores)
    penalized = None
    if action.move is not None and cores[action.move[0]] > config.min_cores_per_level:
        src, dst = action.move
        cores[src] -= 1
        cores[dst] += 1
        penalized = dst
    else:
        action = Action.Noop
    s.cores = tuple(cores)
    s.penalized_core_level = penalized

    # (2) idle cores: slots laid out N..., K..., R...; the penalized core is
    # the last slot of its level
    n_idle = min(int(rng.poisson(config.idle_lambda)), N)
    idle_slots = rng.choice(N, size=n_idle, replace=False) if n_idle else np.empty(0, dtype=int)
    bounds = np.cumsum((0,) + s.cores)
    active = [int(cores[lv]) for lv in range(3)]
    pen_active = penalized is not None
    for slot in idle_slots:
        lv = int(np.searchsorted(bounds, slot, side="right") - 1)
        active[lv] -= 1
        if penalized is not None and lv == penalized and slot == bounds[lv + 1] - 1:
            pen_active = False

    # (3) capacity
    cap = [m * active[lv] for lv in range(3)]
    if pen_active:
        cap[penalized] -= m * config.migration_penalty

    # (4) inject this interval's demand
    if s.interval < trace.T:
        hit, miss, write = _decompose(
            trace.ratios[s.interval], int(trace.counts[s.interval]), config.cache_miss_rate
        )
        q.normal_read += hit
        q.prefetch_kv += miss
        q.prefetch_rv += miss
        q.prefetch_in += miss
        q.normal_write += write
        s.injected_total_kb += hit + miss + write

    # (5) process
    p_kv, w_kv = _process(cap[Level.K], q.prefetch_kv, q.writeback_kv)
    p_rv, w_rv = _process(cap[Level.R], q.prefetch_rv, q.writeback_rv)
    n_rd, n_wr = _process(cap[Level.N], q.normal_read, q.normal_write)
    processed = (n_rd + n_wr, p_kv + w_kv, p_rv + w_rv)

    def drain(name: str, amount: float) -> None:
        left = getattr(q, name) - amount
        setattr(q, name, left if left > 0.0 else 0.0)

    for name, amount in (
        ("prefetch_kv", p_kv),
        ("prefetch_rv", p_rv),
        ("writeback_kv", w_kv),
        ("writeback_rv", w_rv),
        ("normal_read", n_rd),
        ("normal_write", n_wr),
    ):
        drain(name, amount)
    # a drained queue has processed exactly its cumulative inflow
    q.prefetch_kv_done = q.prefetch_in if q.prefetch_kv == 0.0 else q.prefetch_kv_done + p_kv
    q.prefetch_rv_done = q.prefetch_in if q.prefetch_rv == 0.0 else q.prefetch_rv_done + p_rv
    q.writeback_kv_done = q.writeback_in if q.writeback_kv == 0.0 else q.writeback_kv_done + w_kv
    q.writeback_rv_done = q.writeback_in if q.writeback_rv == 0.0 else q.writeback_rv_done + w_rv

    # (6) forwards, visible next interval
    fwd = min(q.prefetch_kv_done, q.prefetch_rv_done) - q.prefetch_forwarded
    if fwd > 0.0:
        q.normal_read += fwd
        q.prefetch_forwarded += fwd
    if n_wr > 0.0:
        q.writeback_kv += n_wr
        q.writeback_rv += n_wr
        q.writeback_in += n_wr

    # (7) utilization
    util = tuple(
        min(max(processed[lv] / cap[lv], 0.0), 1.0) if cap[lv] > 0 else 0.0 for lv in range(3)
    )
    s.last_util = util

    # (8) terminal completions
    wb_done = min(q.writeback_kv_done, q.writeback_rv_done) - q.writeback_completed
    wb_done = max(wb_done, 0.0)
    q.writeback_completed += wb_done
    completed = n_rd + wb_done
    s.completed_total_kb += completed

    # (9) termination
    s.interval += 1
    K_max = config.k_max(trace.T)
    if s.interval >= trace.T and q.empty():
        s.done = True
    elif s.interval >= K_max:
        s.done = True
        s.truncated = True

    # (10) reward
    if config.reward_mode is RewardMode.DENSE:
        reward = completed / s.total_volume_kb if s.total_volume_kb > 0 else 0.0
    elif config.reward_mode is RewardMode.WORK:
        reward = sum(processed) / s.total_work_kb if s.total_work_kb > 0 else 0.0
    else:
        reward = 1.0 / s.interval if s.done else 0.0

    result = StepResult(
        observation=observe(s, config, trace),
        reward=reward,
        done=s.done,
        makespan_so_far=s.interval,
        action_taken=action,
        utilization=util,
        completed_kb=completed,
    )
    return s, result


class StorageEnv:
    """Gym-style wrapper owning one episode's state and random stream."""

    def __init__(self, config: SimConfig, trace: WorkloadTrace, seed: int | None = None):
        self.config = config
        self.trace = trace
        self.seed = config.seed if seed is None else seed
        self.state: SimState | None = None
        self.rng: np.random.Generator | None = None
        self.log: list[dict] = []

    def reset(self) -> np.ndarray:
        self.rng = np.random.default_rng(self.seed)
        self.state, obs = reset(self.config, self.trace)
        self.log = []
        return obs

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        self.state, res = step(self.state, action, self.config, self.trace, self.rng)
        self.log.append(
            {
                "interval": self.state.interval,
                "action": res.action_taken,
                "cores": self.state.cores,
                "util": res.utilization,
                "queues": self.state.queues.backlog(),
                "reward": res.reward,
            }
        )
        info = {"makespan": res.makespan_so_far, "truncated": self.state.truncated, "action": res.action_taken}
        return res.observation, res.reward, res.done, info

    @property
    def makespan(self) -> int:
        return self.state.interval


def write_episode_log(log: list[dict], path) -> None:
    """Dump an episode log as whitespace-separated text for debugging."""
    cols = ["interval", "action", "cN", "cK", "cR", "uN", "uK", "uR"] + list(StageQueues.QUEUE_FIELDS) + ["reward"]
    lines = [" ".join(cols)]
    for row in log:
        cells = [str(row["interval"]), Action(row["action"]).label]
        cells += [str(c) for c in row["cores"]]
        cells += [f"{u:.6f}" for u in row["util"]]
        cells += [f"{v:.3f}" for v in row["queues"]]
        cells.append(repr(row["reward"]))
        lines.append(" ".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")
