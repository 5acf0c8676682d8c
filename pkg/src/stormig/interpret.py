"""State semantics of an extracted machine: fan-in/fan-out and pre-entry histories."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fsm import Fsm, FsmActor
from .qbn import QuantizedBottleneck
from .rl import eval_seed, run_actor
from .simulator import OBS_DIM, Action, SimConfig
from .workload import WorkloadTrace

__all__ = [
    "StateReport",
    "InterpretReport",
    "closed_loop_logs",
    "fan_stats",
    "history_stats",
    "interpret",
    "render_report",
    "read_report",
    "COMPONENTS",
]

# the six system components of an observation: core shares and utilizations
COMPONENTS = ("share_N", "share_K", "share_R", "util_N", "util_K", "util_R")
FLAG_DELTA = 0.05
REPORT_VERSION = 1


@dataclass
class StateReport:
    state: int
    action: int
    visit_count: int = 0
    self_loop_count: int = 0
    entry_count: int = 0
    exit_count: int = 0
    fan_in_mean: np.ndarray | None = None
    fan_out_mean: np.ndarray | None = None
    history_mean: np.ndarray | None = None
    history_counts: np.ndarray | None = None
    capacity_ratio_series: np.ndarray | None = None

    def fan_delta(self) -> np.ndarray | None:
        """fan_in - fan_out over the six system components."""
        if self.fan_in_mean is None or self.fan_out_mean is None:
            return None
        return self.fan_in_mean[:6] - self.fan_out_mean[:6]


@dataclass
class StepLog:
    """Closed-loop run of one trace: per step (state before, state after, raw obs, action)."""

    prev: np.ndarray
    next: np.ndarray
    obs: np.ndarray
    actions: np.ndarray


@dataclass
class InterpretReport:
    states: list[StateReport]
    window: int
    n_transitions: int
    n_steps: int
    trace_visits: list[list[int]] = field(default_factory=list)

    def most_visited_per_trace(self) -> list[int]:
        return [int(np.argmax(v)) for v in self.trace_visits]

    def noop_most_visited(self) -> int:
        """Number of traces whose most-visited state emits Noop."""
        return sum(
            self.states[s].action == Action.Noop for s in self.most_visited_per_trace()
        )

    def to_dict(self) -> dict:
        def arr(a):
            # absent window positions are NaN in memory and null on disk
            if a is None:
                return None
            a = np.asarray(a)
            if a.dtype.kind == "f":
                return np.where(np.isnan(a), None, a).tolist()
            return a.tolist()

        return {
            "version": REPORT_VERSION,
            "window": self.window,
            "n_transitions": self.n_transitions,
            "n_steps": self.n_steps,
            "trace_visits": self.trace_visits,
            "states": [
                {
                    "state": r.state,
                    "action": Action(r.action).name,
                    "visit_count": r.visit_count,
                    "self_loop_count": r.self_loop_count,
                    "entry_count": r.entry_count,
                    "exit_count": r.exit_count,
                    "fan_in_mean": arr(r.fan_in_mean),
                    "fan_out_mean": arr(r.fan_out_mean),
                    "history_mean": arr(r.history_mean),
                    "history_counts": arr(r.history_counts),
                    "capacity_ratio_series": arr(r.capacity_ratio_series),
                }
                for r in self.states
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "InterpretReport":
        if doc.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {doc.get('version')}")

        def arr(a, dtype=np.float64):
            if a is None:
                return None
            if dtype is np.float64:
                return np.array(a, dtype=object).astype(np.float64)
            return np.array(a, dtype=dtype)

        states = [
            StateReport(
                state=d["state"],
                action=int(Action[d["action"]]),
                visit_count=d["visit_count"],
                self_loop_count=d["self_loop_count"],
                entry_count=d["entry_count"],
                exit_count=d["exit_count"],
                fan_in_mean=arr(d["fan_in_mean"]),
                fan_out_mean=arr(d["fan_out_mean"]),
                history_mean=arr(d["history_mean"]),
                history_counts=arr(d["history_counts"], np.int64),
                capacity_ratio_series=arr(d["capacity_ratio_series"]),
            )
            for d in doc["states"]
        ]
        return cls(states, doc["window"], doc["n_transitions"], doc["n_steps"], doc["trace_visits"])

    def __eq__(self, other):
        if not isinstance(other, InterpretReport):
            return NotImplemented
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(other.to_dict(), sort_keys=True)


def closed_loop_logs(
    fsm: Fsm, qbn_obs: QuantizedBottleneck, sim_cfg: SimConfig, traces: Sequence[WorkloadTrace], metric="euclidean"
) -> list[StepLog]:
    """Run the machine as the controller on each trace with the shared evaluation seeds."""
    actor = FsmActor(fsm, qbn_obs, metric)
    logs = []
    for i, tr in enumerate(traces):
        run_actor(actor, sim_cfg, tr, eval_seed(sim_cfg.seed, i))
        prev, nxt, obs, act = zip(*actor.log)
        logs.append(StepLog(np.array(prev), np.array(nxt), np.array(obs), np.array(act)))
    return logs


def _blank(fsm: Fsm) -> list[StateReport]:
    return [StateReport(state=s, action=fsm.action_of[s]) for s in range(fsm.n_states)]


def _fan(fsm: Fsm, logs: Sequence[StepLog], window: int) -> InterpretReport:
    n = fsm.n_states
    fan_in = np.zeros((n, OBS_DIM))
    fan_out = np.zeros((n, OBS_DIM))
    states = _blank(fsm)
    trace_visits = []
    n_trans = n_steps = 0
    for lg in logs:
        visits = np.bincount(lg.next, minlength=n)
        trace_visits.append(visits.tolist())
        n_steps += len(lg.next)
        for s, t, o in zip(lg.prev, lg.next, lg.obs):
            states[t].visit_count += 1
            if s == t:
                states[s].self_loop_count += 1
                continue
            n_trans += 1
            fan_out[s] += o
            fan_in[t] += o
            states[s].exit_count += 1
            states[t].entry_count += 1
    for r in states:
        if r.entry_count:
            r.fan_in_mean = fan_in[r.state] / r.entry_count
        if r.exit_count:
            r.fan_out_mean = fan_out[r.state] / r.exit_count
    return InterpretReport(states, window, n_trans, n_steps, trace_visits)


def _capacity_ratio(obs: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return obs[..., 0] / (obs[..., 1] + obs[..., 2])


def _history(fsm: Fsm, logs: Sequence[StepLog], window: int) -> list[StateReport]:
    """Mean of the ``window`` raw observations before each entry, oldest first.

    Position ``window - 1`` is the step right before the entry step. Entries
    early in an episode fill only the newest positions.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    n = fsm.n_states
    sums = np.zeros((n, window, OBS_DIM))
    ratio_sums = np.zeros((n, window))
    counts = np.zeros((n, window), dtype=np.int64)
    for lg in logs:
        for t in range(len(lg.next)):
            s, nxt = lg.prev[t], lg.next[t]
            if s == nxt:
                continue
            lo = max(0, t - window)
            past = lg.obs[lo:t]
            k = len(past)
            if k == 0:
                continue
            sums[nxt, window - k :] += past
            ratio_sums[nxt, window - k :] += _capacity_ratio(past)
            counts[nxt, window - k :] += 1
    out = _blank(fsm)
    for r in out:
        c = counts[r.state]
        r.history_counts = c.copy()
        if c.sum() == 0:
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            r.history_mean = np.where(c[:, None] > 0, sums[r.state] / np.maximum(c, 1)[:, None], np.nan)
            r.capacity_ratio_series = np.where(c > 0, ratio_sums[r.state] / np.maximum(c, 1), np.nan)
    return out


def fan_stats(fsm, qbn_obs, sim_cfg, traces, metric="euclidean", logs=None) -> InterpretReport:
    """Fan-in / fan-out observation means per state, self-loops excluded."""
    logs = logs if logs is not None else closed_loop_logs(fsm, qbn_obs, sim_cfg, traces, metric)
    return _fan(fsm, logs, window=0)


def history_stats(fsm, qbn_obs, sim_cfg, traces, window: int = 10, metric="euclidean", logs=None) -> InterpretReport:
    """Averaged observation windows preceding each entry into a state."""
    logs = logs if logs is not None else closed_loop_logs(fsm, qbn_obs, sim_cfg, traces, metric)
    rep = _fan(fsm, logs, window)
    for r, h in zip(rep.states, _history(fsm, logs, window)):
        r.fan_in_mean = r.fan_out_mean = None
        r.history_mean, r.history_counts, r.capacity_ratio_series = h.history_mean, h.history_counts, h.capacity_ratio_series
    return rep


def interpret(fsm, qbn_obs, sim_cfg, traces, window: int = 10, metric="euclidean") -> InterpretReport:
    """Full report: fan statistics and history windows from one set of closed-loop runs."""
    logs = closed_loop_logs(fsm, qbn_obs, sim_cfg, traces, metric)
    rep = _fan(fsm, logs, window)
    for r, h in zip(rep.states, _history(fsm, logs, window)):
        r.history_mean, r.history_counts, r.capacity_ratio_series = h.history_mean, h.history_counts, h.capacity_ratio_series
    return rep


def _narrative(rep: InterpretReport) -> str:
    lines = [
        f"states: {len(rep.states)}  steps: {rep.n_steps}  transitions (non-self): {rep.n_transitions}  window: {rep.window}",
        "",
    ]
    order = sorted(rep.states, key=lambda r: -r.visit_count)
    for r in order:
        lines.append(
            f"S{r.state}  action {Action(r.action).label:5s}  visits {r.visit_count}  "
            f"self-loops {r.self_loop_count}  entries {r.entry_count}  exits {r.exit_count}"
        )
        if r.entry_count == 0 and r.exit_count == 0:
            lines.append("    no entries")
            lines.append("")
            continue
        lines.append(f"    {'component':10s} {'fan-in':>8s} {'fan-out':>8s} {'delta':>8s}")
        for j, name in enumerate(COMPONENTS):
            fin = None if r.fan_in_mean is None else r.fan_in_mean[j]
            fout = None if r.fan_out_mean is None else r.fan_out_mean[j]
            fmt = lambda v: f"{v:8.3f}" if v is not None else f"{'-':>8s}"
            if fin is not None and fout is not None:
                d = fin - fout
                flag = "  *" if abs(d) > FLAG_DELTA else ""
                lines.append(f"    {name:10s} {fmt(fin)} {fmt(fout)} {d:8.3f}{flag}")
            else:
                lines.append(f"    {name:10s} {fmt(fin)} {fmt(fout)} {'-':>8s}")
        if r.capacity_ratio_series is not None:
            series = " ".join("-" if np.isnan(v) else f"{v:.2f}" for v in r.capacity_ratio_series)
            lines.append(f"    NORMAL/(KV+RV) capacity before entry, oldest first: {series}")
        lines.append("")
    lines.append(f"* |fan-in - fan-out| > {FLAG_DELTA}")
    return "\n".join(lines) + "\n"


def render_report(rep: InterpretReport, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (all statistics) and ``<path>.txt`` (per-state table)."""
    base = Path(path)
    if base.suffix in (".json", ".txt"):
        base = base.with_suffix("")
    data, text = base.with_suffix(".json"), base.with_suffix(".txt")
    data.write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    text.write_text(_narrative(rep))
    return data, text


def read_report(path) -> InterpretReport:
    p = Path(path)
    if p.suffix != ".json":
        p = p.with_suffix(".json")
    return InterpretReport.from_dict(json.loads(p.read_text()))
