import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.exceptions import NotFittedError

from stormig.config import default_profiles
from stormig.neural import GruPolicy, gru_step
from stormig.qbn import (
    QuantizedBottleneck,
    TransitionDataset,
    code_key,
    collect_dataset,
    encode,
    finetune_with_qbns,
    load_qbn,
    save_qbn,
    train_qbn,
)
from stormig.rl import DrlActor, TrainConfig, evaluate_policy
from stormig.simulator import SimConfig
from stormig.workload import WorkloadTrace, gen_real_trace


@pytest.fixture(scope="module")
def setup():
    traces = [gen_real_trace(default_profiles(), 6, 2, seed=i) for i in range(3)]
    policy = GruPolicy(hidden=8, seed=1)
    return policy, traces, collect_dataset(policy, SimConfig(), traces)


def test_dataset_accounting(setup):
    policy, traces, ds = setup
    K = evaluate_policy(policy, SimConfig(), traces).makespans
    assert len(ds) == sum(K)
    assert sorted(set(ds.trace_id.tolist())) == [0, 1, 2]
    for idx in ds.episodes():
        assert ds.step_index[idx].tolist() == list(range(len(idx)))
        assert np.all(ds.h_before[idx[0]] == 0)


def test_dataset_replays_gru(setup):
    policy, _, ds = setup
    for i in range(0, len(ds), 5):
        assert np.allclose(gru_step(policy, ds.h_before[i], ds.obs[i]), ds.h_after[i], atol=1e-12)


def test_collection_deterministic(setup):
    policy, traces, ds = setup
    assert collect_dataset(policy, SimConfig(), traces) == ds


def test_zero_workload_dataset_actions_greedy():
    policy = GruPolicy(hidden=8, seed=2, noop_bias=3.0)
    ds = collect_dataset(policy, SimConfig(), [WorkloadTrace(np.zeros((4, 14)), [0] * 4)])
    assert len(ds) == 4
    for i in range(len(ds)):
        assert ds.action[i] == int(np.argmax(policy.heads(ds.h_after[i])[0]))


def test_dataset_round_trip(tmp_path, setup):
    ds = setup[2]
    ds.save(tmp_path / "d.npz")
    assert TransitionDataset.load(tmp_path / "d.npz") == ds
    ds.save(tmp_path / "e.npz")
    assert (tmp_path / "d.npz").read_bytes() == (tmp_path / "e.npz").read_bytes()


def test_single_point_memorized():
    X = np.tile(np.linspace(-0.5, 0.5, 6), (32, 1))
    q = QuantizedBottleneck(latent_dim=4, hidden_units=16, epochs=400, batch_size=32, learning_rate=1e-2, patience=400)
    q.fit(X)
    assert q.mse_ < 1e-4


def test_loss_decreases_and_codes_ternary(setup):
    ds = setup[2]
    q = train_qbn("hidden", ds, epochs=40, latent_dim=8)
    assert q.loss_curve_[-1] < q.loss_curve_[0]
    codes = encode(q, ds.h_after)
    assert codes.shape == (len(ds), 8) and set(np.unique(codes)) <= {-1, 0, 1}
    assert np.array_equal(encode(q, ds.h_after), codes)


def test_train_qbn_errors(setup):
    ds = setup[2]
    with pytest.raises(ValueError):
        train_qbn("action", ds)
    empty = TransitionDataset(**{f: getattr(ds, f)[:0] for f in ds._ARRAYS})
    with pytest.raises(ValueError):
        train_qbn("obs", empty)


def test_estimator_checks(setup):
    q = QuantizedBottleneck(latent_dim=3, epochs=2)
    with pytest.raises(NotFittedError):
        q.transform(np.zeros((1, 21)))
    q.fit(setup[2].obs)
    with pytest.raises(ValueError):
        q.transform(np.zeros(5))
    assert q.get_params()["latent_dim"] == 3
    assert q.score(setup[2].obs) == pytest.approx(-q.score_mse(setup[2].obs))


def test_code_key():
    assert code_key([1, 0, -1, 1]) == "+0-+"


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_encode_deterministic_and_ternary(vals):
    q = QuantizedBottleneck(latent_dim=5, epochs=0).fit(np.zeros((2, 6)))
    a = encode(q, np.array(vals))
    assert np.array_equal(a, encode(q, np.array(vals)))
    assert set(a.tolist()) <= {-1, 0, 1}


def test_qbn_checkpoint_round_trip(tmp_path, setup):
    q = train_qbn("obs", setup[2], epochs=3, latent_dim=4)
    save_qbn(q, tmp_path / "q.npz")
    r = load_qbn(tmp_path / "q.npz")
    assert np.array_equal(r.transform(setup[2].obs), q.transform(setup[2].obs))
    assert r.get_params() == q.get_params()


def test_finetune_zero_epochs_unchanged(setup):
    policy, traces, ds = setup
    qo = train_qbn("obs", ds, epochs=2, latent_dim=4)
    qh = train_qbn("hidden", ds, epochs=2, latent_dim=4)
    before = [p.value.copy() for p in policy.parameters() + qo.net_.parameters() + qh.net_.parameters()]
    finetune_with_qbns(policy, qo, qh, SimConfig(), traces, 0)
    after = [p.value for p in policy.parameters() + qo.net_.parameters() + qh.net_.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_finetune_updates_all_components(setup):
    _, traces, ds = setup
    policy = GruPolicy(hidden=8, seed=1)
    qo = train_qbn("obs", ds, epochs=2, latent_dim=4)
    qh = train_qbn("hidden", ds, epochs=2, latent_dim=4)
    w_pol, w_dec = policy.pi.W.value.copy(), qh.net_.parameters()[-1].value.copy()
    finetune_with_qbns(policy, qo, qh, SimConfig(), traces, 2, TrainConfig(episodes_per_epoch=2, learning_rate=1e-2, keep_best=False))
    assert not np.array_equal(w_pol, policy.pi.W.value)
    assert not np.array_equal(w_dec, qh.net_.parameters()[-1].value)


def test_finetune_keep_best_never_worse(setup):
    _, traces, ds = setup
    policy = GruPolicy(hidden=8, seed=1)
    qo = train_qbn("obs", ds, epochs=2, latent_dim=4)
    qh = train_qbn("hidden", ds, epochs=2, latent_dim=4)
    before = evaluate_policy(DrlActor(policy, qo, qh), SimConfig(), traces).mean_K
    cfg = TrainConfig(episodes_per_epoch=1, learning_rate=5e-2, eval_every=1)
    finetune_with_qbns(policy, qo, qh, SimConfig(), traces, 3, cfg)
    assert evaluate_policy(DrlActor(policy, qo, qh), SimConfig(), traces).mean_K <= before
