import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stormig.config import default_profiles
from stormig.fsm import Fsm, extract_fsm
from stormig.interpret import (
    InterpretReport,
    StepLog,
    closed_loop_logs,
    fan_stats,
    history_stats,
    interpret,
    read_report,
    render_report,
)
from stormig.neural import GruPolicy
from stormig.qbn import collect_dataset, train_qbn
from stormig.simulator import SimConfig
from stormig.workload import gen_real_trace


def _machine(n=3):
    return Fsm(
        state_codes=[(f"c{s}",) for s in range(n)],
        obs_codes=["o"],
        transitions={(s, 0): (s + 1) % n for s in range(n)},
        action_of=list(range(n)),
        start_state=0,
        obs_memory={},
        visit_counts=[1] * n,
    )


def _log(path, obs_dim=21):
    """StepLog following a state sequence; observation t is filled with t."""
    prev = np.array(path[:-1])
    nxt = np.array(path[1:])
    obs = np.array([np.full(obs_dim, float(t)) for t in range(len(prev))])
    return StepLog(prev, nxt, obs, np.zeros(len(prev), dtype=int))


def test_fan_bookkeeping_example():
    fsm = _machine()
    logs = [_log([0, 0, 1, 1, 1, 2, 0])]
    rep = fan_stats(fsm, None, None, None, logs=logs)
    assert rep.n_steps == 6 and rep.n_transitions == 3
    s0, s1, s2 = rep.states
    assert (s1.entry_count, s1.exit_count, s1.self_loop_count) == (1, 1, 2)
    assert s1.fan_in_mean[0] == 1.0 and s1.fan_out_mean[0] == 4.0
    assert s0.fan_in_mean[0] == 5.0 and s0.fan_out_mean[0] == 1.0
    assert sum(r.visit_count for r in rep.states) == rep.n_steps
    assert rep.trace_visits == [[2, 3, 1]]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 3), min_size=2, max_size=40), min_size=1, max_size=5))
def test_fan_totals_match_transitions(paths):
    fsm = _machine(4)
    logs = [_log(p) for p in paths]
    rep = fan_stats(fsm, None, None, None, logs=logs)
    non_self = sum(int(a != b) for p in paths for a, b in zip(p, p[1:]))
    assert sum(r.entry_count for r in rep.states) == sum(r.exit_count for r in rep.states) == rep.n_transitions == non_self


def test_history_window_aligned_to_entry():
    fsm = _machine()
    # entry into state 1 happens at step 4; the window holds steps 1..3
    logs = [_log([0, 0, 0, 0, 0, 1])]
    rep = history_stats(fsm, None, None, None, window=3, logs=logs)
    h = rep.states[1]
    assert h.history_counts.tolist() == [1, 1, 1]
    assert h.history_mean[:, 0].tolist() == [1.0, 2.0, 3.0]
    assert rep.states[0].history_mean is None


def test_history_partial_window_fills_newest_positions():
    fsm = _machine()
    logs = [_log([0, 0, 1]), _log([0, 1])]
    rep = history_stats(fsm, None, None, None, window=3, logs=logs)
    h = rep.states[1]
    # the second trace enters at step 0 with no history at all
    assert h.history_counts.tolist() == [0, 0, 1]
    assert np.isnan(h.history_mean[0, 0]) and h.history_mean[2, 0] == 0.0


def test_history_rejects_bad_window():
    with pytest.raises(ValueError):
        history_stats(_machine(), None, None, None, window=0, logs=[_log([0, 1])])


def test_capacity_ratio_series():
    fsm = _machine()
    lg = _log([0, 0, 0, 1])
    lg.obs[:2, :3] = [[0.5, 0.25, 0.25], [0.2, 0.4, 0.4]]
    rep = history_stats(fsm, None, None, None, window=2, logs=[lg])
    assert rep.states[1].capacity_ratio_series.tolist() == [1.0, 0.25]


def test_report_round_trip_and_text(tmp_path):
    fsm = _machine(4)
    logs = [_log([0, 0, 1, 2, 2, 0, 1]), _log([0, 1, 1])]
    rep = fan_stats(fsm, None, None, None, logs=logs)
    full = history_stats(fsm, None, None, None, window=3, logs=logs)
    for r, h in zip(rep.states, full.states):
        r.history_mean, r.history_counts, r.capacity_ratio_series = h.history_mean, h.history_counts, h.capacity_ratio_series
    rep.window = 3
    data, text = render_report(rep, tmp_path / "report")
    assert read_report(data) == rep
    assert InterpretReport.from_dict(rep.to_dict()) == rep
    body = text.read_text()
    assert "no entries" in body  # state 3 is never visited
    assert "S0" in body and "*" in body


@pytest.fixture(scope="module")
def machine_run():
    traces = [gen_real_trace(default_profiles(), 8, 2, seed=i) for i in range(3)]
    policy = GruPolicy(hidden=8, seed=5)
    ds = collect_dataset(policy, SimConfig(), traces)
    qo = train_qbn("obs", ds, epochs=20, latent_dim=4)
    qh = train_qbn("hidden", ds, epochs=20, latent_dim=6)
    return extract_fsm(ds, policy, qo, qh), qo, traces


def test_interpret_on_closed_loop_runs(machine_run):
    fsm, qo, traces = machine_run
    rep = interpret(fsm, qo, SimConfig(), traces, window=4)
    logs = closed_loop_logs(fsm, qo, SimConfig(), traces)
    assert rep.n_steps == sum(len(lg.next) for lg in logs)
    assert sum(r.entry_count for r in rep.states) == sum(r.exit_count for r in rep.states) == rep.n_transitions
    assert len(rep.most_visited_per_trace()) == 3
    assert 0 <= rep.noop_most_visited() <= 3
