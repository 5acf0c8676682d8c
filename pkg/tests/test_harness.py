import numpy as np
import pytest

from stormig.config import default_profiles
from stormig.harness import (
    ComparisonTable,
    DefaultActor,
    HandcraftedActor,
    calibrate,
    compare,
    default_action,
    handcrafted_action,
)
from stormig.rl import evaluate_policy
from stormig.simulator import Action, SimConfig
from stormig.workload import gen_real_trace


def _obs(util):
    o = np.zeros(21)
    o[3:6] = util
    return o


@pytest.mark.parametrize(
    "util, expected",
    [
        ([0.5, 0.5, 0.5], Action.Noop),
        ([0.9, 0.75, 0.8], Action.Noop),  # spread 0.15
        ([1.0, 0.2, 0.6], Action.K2N),
        ([0.1, 0.9, 0.5], Action.N2K),
        ([0.0, 1.0, 1.0], Action.N2K),  # tie on the maximum goes to KV
        ([0.4, 0.4, 1.0], Action.N2R),  # tie on the minimum goes to NORMAL
    ],
)
def test_handcrafted_examples(util, expected):
    assert handcrafted_action(_obs(util)) is expected


def test_handcrafted_threshold_is_strict():
    assert handcrafted_action(_obs([0.7, 0.5, 0.6])) is Action.Noop
    assert handcrafted_action(_obs([0.7, 0.5, 0.6]), threshold=0.1) is Action.K2N


def test_default_never_moves():
    assert default_action(_obs([1.0, 0.0, 0.0])) is Action.Noop


@pytest.fixture(scope="module")
def traces():
    return [gen_real_trace(default_profiles(), 8, 2, seed=30 + i) for i in range(4)]


def test_compare_pairs_seeds(traces):
    table = compare({"default": DefaultActor(), "handcrafted": HandcraftedActor()}, SimConfig(), traces)
    assert table.makespans["default"] == evaluate_policy(DefaultActor(), SimConfig(), traces).makespans
    assert table.reduction("default") == 0.0
    ref, hand = table.mean_K("default"), table.mean_K("handcrafted")
    assert table.reduction("handcrafted") == pytest.approx(100 * (ref - hand) / ref)
    with pytest.raises(ValueError):
        compare({"default": DefaultActor()}, SimConfig(), traces)


def test_table_round_trip(tmp_path):
    t = ComparisonTable({"default": [20, 30], "drl": [18, 27], "fsm": [18, 28]}, {"default": 0, "drl": 0, "fsm": 1})
    data, text = t.save(tmp_path / "cmp")
    back = ComparisonTable.load(data)
    assert back == t
    assert back.gap("fsm", "drl") == pytest.approx(100 * (23 - 22.5) / 22.5)
    assert "fsm vs drl" in text.read_text()
    with pytest.raises(ValueError):
        ComparisonTable({"a": [1], "b": [1, 2]})


def test_calibration_band():
    rep = calibrate(default_profiles()[:3], SimConfig(), T=16, traces_per_class=2)
    assert set(rep.mean_K) == {p.name for p in default_profiles()[:3]}
    assert all(k >= 16 for k in rep.mean_K.values())
    tight = type(rep)(16, (1.0, 1.0), {"x": 16.0, "y": 20.0, "z": 10.0})
    assert tight.out_of_band == {"y": "above", "z": "below"} and not tight.ok
    assert "above" in tight.text()


def test_default_profiles_calibrated():
    rep = calibrate(default_profiles(), SimConfig(), T=64, traces_per_class=2)
    assert rep.ok, rep.out_of_band
