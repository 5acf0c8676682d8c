import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stormig.config import default_profiles
from stormig.fsm import (
    Fsm,
    FsmActor,
    FsmError,
    export_fsm,
    extract_fsm,
    fidelity,
    fsm_step,
    import_fsm,
    minimize_fsm,
    run_codes,
    to_dot,
)
from stormig.neural import GruPolicy
from stormig.qbn import code_key, collect_dataset, encode, train_qbn
from stormig.simulator import Action, SimConfig
from stormig.workload import gen_real_trace

from oracles import behaviour_classes, random_fsm, replay


@pytest.fixture(scope="module")
def extracted():
    traces = [gen_real_trace(default_profiles(), 8, 2, seed=i) for i in range(4)]
    policy = GruPolicy(hidden=8, seed=3)
    ds = collect_dataset(policy, SimConfig(), traces)
    qo = train_qbn("obs", ds, epochs=30, latent_dim=4, seed=0)
    qh = train_qbn("hidden", ds, epochs=30, latent_dim=6, seed=0)
    return policy, qo, qh, ds, traces, extract_fsm(ds, policy, qo, qh)


def _tiny(action_of, transitions, start=0, memory=None, n_obs=2):
    return Fsm(
        state_codes=[(f"c{s}",) for s in range(len(action_of))],
        obs_codes=[f"o{o}" for o in range(n_obs)],
        transitions=transitions,
        action_of=action_of,
        start_state=start,
        obs_memory=memory or {},
        visit_counts=[1] * len(action_of),
    )


def test_extraction_counts_and_stats(extracted):
    policy, qo, qh, ds, _, fsm = extracted
    st_ = fsm.stats
    assert st_.n_records == len(ds)
    assert 0.0 <= st_.conflict_rate <= 1.0 and 0.0 <= st_.consistency_rate <= 1.0
    assert fsm.n_states == st_.n_raw_states
    assert sum(fsm.visit_counts) == len(ds)
    start_code = code_key(encode(qh, policy.initial_hidden()))
    assert fsm.state_codes[fsm.start_state] == (start_code,)


def test_extraction_majority_transitions(extracted):
    _, qo, qh, ds, _, fsm = extracted
    hb = [code_key(c) for c in encode(qh, ds.h_before)]
    ha = [code_key(c) for c in encode(qh, ds.h_after)]
    ob = [code_key(c) for c in encode(qo, ds.obs)]
    sid = {codes[0]: s for s, codes in enumerate(fsm.state_codes)}
    disagree = 0
    for i in range(len(ds)):
        t = fsm.transitions[(sid[hb[i]], fsm.obs_id(ob[i]))]
        disagree += int(t != sid[ha[i]])
    assert disagree / len(ds) == pytest.approx(fsm.stats.conflict_rate)


def test_extract_rejects_empty(extracted):
    policy, qo, qh, ds, _, _ = extracted
    empty = type(ds)(**{f: getattr(ds, f)[:0] for f in ds._ARRAYS})
    with pytest.raises(FsmError):
        extract_fsm(empty, policy, qo, qh)


def test_minimize_merges_equivalent_states():
    # states 1 and 2 both emit action 2 and loop to themselves on symbol 0
    fsm = _tiny([0, 2, 2], {(0, 0): 1, (0, 1): 2, (1, 0): 1, (2, 0): 2})
    m = minimize_fsm(fsm)
    assert m.n_states == 2
    assert sorted(m.action_of) == [0, 2]


def test_minimize_removes_unreachable():
    fsm = _tiny([0, 1, 3], {(0, 0): 0, (2, 0): 0})
    m = minimize_fsm(fsm)
    assert m.n_states == 1 and m.action_of == [0]


def test_absent_transition_distinguishes_states():
    # same actions, but state 2 lacks the edge on symbol 1
    fsm = _tiny([0, 1, 1], {(0, 0): 1, (0, 1): 2, (1, 0): 1, (1, 1): 1, (2, 0): 2})
    assert minimize_fsm(fsm).n_states == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 3))
def test_minimization_sound_and_minimal(seed, n, k):
    rng = np.random.default_rng(seed)
    fsm = random_fsm(rng, n, k, n_actions=2)
    m = minimize_fsm(fsm)
    assert m.n_states <= fsm.n_states
    assert m.n_states == behaviour_classes(fsm, n)
    for _ in range(30):
        w = [int(x) for x in rng.integers(0, k, size=int(rng.integers(1, 12)))]
        assert run_codes(m, w) == replay(fsm, w) == run_codes(fsm, w)
    assert minimize_fsm(m) == m


def test_run_codes_stops_on_missing_edge():
    fsm = _tiny([0, 4], {(0, 0): 1})
    assert run_codes(fsm, [0, 0, 1]) == [4, -1]


def test_fsm_validation():
    with pytest.raises(FsmError):
        _tiny([0], {(0, 0): 3})
    with pytest.raises(FsmError):
        _tiny([0], {}, start=2)
    with pytest.raises(ValueError):
        _tiny([9], {})


def test_fsm_step_and_fallback(extracted):
    _, qo, _, ds, _, fsm = extracted
    s = fsm.start_state
    o = fsm.obs_id(code_key(encode(qo, ds.obs[0])))
    t, a, fb = fsm_step(fsm, s, ds.obs[0], qo)
    assert not fb and t == fsm.transitions[(s, o)] and a == Action(fsm.action_of[t])
    # a state with no outgoing edges on this code must fall back
    lone = max(range(fsm.n_states), key=lambda q: (len(fsm.outgoing(q)) == 0, -q))
    for raw in (ds.obs[0] * 5 + 3, -ds.obs[0]):
        code = fsm.obs_id(code_key(encode(qo, raw)))
        if (lone, code) not in fsm.transitions:
            t, _, fb = fsm_step(fsm, lone, raw, qo)
            assert fb and 0 <= t < fsm.n_states
    with pytest.raises(FsmError):
        fsm_step(fsm, fsm.n_states, ds.obs[0], qo)


def test_fallback_prefers_nearest_memory_entry():
    class Identity:
        def transform(self, X):
            return np.zeros(np.shape(X)[:-1] + (1,)) + 7  # code absent from the machine

    mem = {0: [(0, np.array([0.0, 0.0]), 3), (1, np.array([10.0, 0.0]), 1)]}
    fsm = _tiny([0, 1, 2], {(0, 0): 1, (0, 1): 2}, memory=mem)
    assert fsm_step(fsm, 0, [9.0, 1.0], Identity())[:2] == (2, Action(2))
    assert fsm_step(fsm, 0, [1.0, 1.0], Identity())[:2] == (1, Action(1))
    # state 1 has no memory, so the global search applies
    assert fsm_step(fsm, 1, [9.0, 1.0], Identity())[0] == 2
    assert fsm_step(fsm, 0, [0.0, 1.0], Identity(), metric="cosine")[0] == 1


def test_actor_log_and_rate(extracted):
    _, qo, _, _, traces, fsm = extracted
    from stormig.rl import evaluate_policy

    actor = FsmActor(fsm, qo)
    res = evaluate_policy(actor, SimConfig(), traces[:1])
    assert len(actor.log) == res.makespans[0]
    assert 0.0 <= actor.fallback_rate <= 1.0
    assert all(prev == log[0] for prev, log in zip([fsm.start_state] + [l[1] for l in actor.log], actor.log))


def test_fidelity_report(extracted):
    policy, qo, qh, _, traces, fsm = extracted
    rep = fidelity(fsm, policy, qo, SimConfig(), traces)
    assert 0.0 <= rep.open_loop_agreement <= 1.0
    assert rep.closed_loop_mean_K_fsm == np.mean(rep.makespans_fsm)
    assert json.dumps(rep.to_dict())


def test_table_round_trip(tmp_path, extracted):
    fsm = extracted[-1]
    for machine in (fsm, minimize_fsm(fsm)):
        path = tmp_path / "fsm.json"
        export_fsm(machine, path)
        assert import_fsm(path) == machine


def test_import_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text(json.dumps({"format": "other"}))
    with pytest.raises(FsmError):
        import_fsm(p)
    p.write_text("{not json")
    with pytest.raises(FsmError):
        import_fsm(p)


def test_dot_export(tmp_path):
    fsm = _tiny([0, 1], {(0, 0): 1, (0, 1): 1, (1, 0): 0})
    text = to_dot(fsm)
    assert text.count("[label=\"S") == 2
    assert 'label="S1\\nN=>K"' in text
    assert "S0 -> S1 [label=\"2\"]" in text
    export_fsm(fsm, tmp_path / "g.dot", format="graph")
    assert (tmp_path / "g.dot").read_text() == text
    with pytest.raises(ValueError):
        export_fsm(fsm, tmp_path / "g", format="png")
