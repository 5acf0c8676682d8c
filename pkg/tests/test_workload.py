import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stormig.config import default_profiles
from stormig.workload import (
    ClassProfile,
    IoKind,
    Pattern,
    TraceFormatError,
    WorkloadTrace,
    gen_real_trace,
    gen_standard_trace,
    make_catalog,
    read_trace,
    snippet_plan,
    trace_io,
    write_trace,
)


def _profile(pattern="Constant", base=100, amp=0.0, period=8, mix=None):
    if mix is None:
        mix = np.zeros(14)
        mix[[0, 1, 8]] = [0.5, 0.3, 0.2]
    return ClassProfile("p", tuple(mix), pattern, base, amp, period)


def test_catalog_layout():
    cat = make_catalog()
    assert len(cat) == 14
    assert (cat[0].size_kb, cat[0].kind) == (4, IoKind.READ)
    assert (cat[7].size_kb, cat[7].kind) == (4, IoKind.WRITE)
    assert all(t.kind is IoKind.READ for t in cat[:7])
    assert all(t.kind is IoKind.WRITE for t in cat[7:])
    assert len({(t.size_kb, t.kind) for t in cat}) == 14
    assert [t.size_kb for t in cat[:7]] == sorted(t.size_kb for t in cat[:7])


def test_constant_pattern_zero_amplitude():
    tr = gen_standard_trace(_profile(base=100), T=4, seed=3)
    assert tr.counts.tolist() == [100, 100, 100, 100]


def test_sine_counts_within_amplitude_band():
    tr = gen_standard_trace(_profile("Sine", base=200, amp=0.5, period=8), T=8, seed=1)
    assert tr.counts.min() >= 100 and tr.counts.max() <= 300
    assert tr.counts.max() > tr.counts.min()


@pytest.mark.parametrize("pattern", list(Pattern))
def test_standard_trace_deterministic(pattern):
    p = _profile(pattern, base=150, amp=0.4, period=5)
    assert gen_standard_trace(p, 12, 7) == gen_standard_trace(p, 12, 7)
    assert gen_standard_trace(p, 12, 7) != gen_standard_trace(p, 12, 8)


def test_rejects_empty_trace():
    with pytest.raises(ValueError):
        gen_standard_trace(_profile(), T=0, seed=0)


def test_zero_mixture_entries_stay_zero():
    tr = gen_standard_trace(_profile(), T=6, seed=0)
    live = np.zeros(14, dtype=bool)
    live[[0, 1, 8]] = True
    assert np.all(tr.ratios[:, ~live] == 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(0, 11), T=st.integers(1, 40))
def test_generated_ratios_are_distributions(seed, k, T):
    tr = gen_standard_trace(default_profiles()[k], T, seed)
    for t in range(T):
        if tr.counts[t] > 0:
            assert abs(tr.ratios[t].sum() - 1.0) <= 1e-9
        assert np.all(tr.ratios[t] >= 0)


def test_real_trace_snippet_count_and_length():
    profiles = default_profiles()
    plan = snippet_plan(len(profiles), 64, 16, seed=5)
    assert len(plan) == 4
    tr = gen_real_trace(profiles, T=64, snippet_len=16, seed=5)
    assert tr.T == 64 and tr.label == "real"


def test_real_trace_snippets_regenerate_from_plan():
    profiles = default_profiles()
    T, L, seed = 20, 6, 11
    tr = gen_real_trace(profiles, T, L, seed)
    for j, (k, sub_seed, offset) in enumerate(snippet_plan(len(profiles), T, L, seed)):
        src = gen_standard_trace(profiles[k], T, sub_seed)
        stop = min(L, T - j * L)
        assert np.array_equal(tr.counts[j * L : j * L + stop], src.counts[offset : offset + stop])
        assert np.array_equal(tr.ratios[j * L : j * L + stop], src.ratios[offset : offset + stop])


def test_single_profile_real_trace_draws_from_that_class():
    p = default_profiles()[3]
    tr = gen_real_trace([p], T=32, snippet_len=8, seed=2)
    live = np.asarray(p.mixture) > 0
    assert np.all(tr.ratios[:, ~live] == 0)
    assert set(tr.counts.tolist()) <= {p.base_count}


def test_fifty_seeds_give_fifty_distinct_traces():
    profiles = default_profiles()
    traces = [gen_real_trace(profiles, 16, 4, seed) for seed in range(50)]
    keys = {(tr.counts.tobytes(), tr.ratios.tobytes()) for tr in traces}
    assert len(keys) == 50


def test_real_trace_rejects_bad_snippet_length():
    with pytest.raises(ValueError):
        gen_real_trace(default_profiles(), T=16, snippet_len=0, seed=0)
    with pytest.raises(ValueError):
        gen_real_trace(default_profiles(), T=8, snippet_len=16, seed=0)


def test_trace_round_trip(tmp_path):
    tr = gen_real_trace(default_profiles(), 24, 8, seed=9)
    path = tmp_path / "t.csv"
    trace_io(path, tr)
    back = trace_io(path)
    assert back == tr
    write_trace(back, tmp_path / "u.csv")
    assert (tmp_path / "u.csv").read_bytes() == path.read_bytes()


def test_serialization_bytewise_deterministic(tmp_path):
    p = default_profiles()[0]
    write_trace(gen_standard_trace(p, 10, 4), tmp_path / "a.csv")
    write_trace(gen_standard_trace(p, 10, 4), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_read_rejects_ratio_sum(tmp_path):
    tr = gen_standard_trace(_profile(), 3, 0)
    path = tmp_path / "t.csv"
    write_trace(tr, path)
    lines = path.read_text().splitlines()
    cells = lines[3].split(",")
    cells[2] = repr(float(cells[2]) - 0.1)
    lines[3] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="invariant"):
        read_trace(path)


def test_read_rejects_wrong_arity(tmp_path):
    tr = gen_standard_trace(_profile(), 3, 0)
    path = tmp_path / "t.csv"
    write_trace(tr, path)
    lines = path.read_text().splitlines()
    lines[3] = ",".join(lines[3].split(",")[:-1])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceFormatError, match=r":4: expected 16 fields"):
        read_trace(path)


def test_read_reports_bad_field(tmp_path):
    tr = gen_standard_trace(_profile(), 2, 0)
    path = tmp_path / "t.csv"
    write_trace(tr, path)
    text = path.read_text().replace("\n0,100,", "\n0,abc,", 1)
    path.write_text(text)
    with pytest.raises(TraceFormatError, match="'count'"):
        read_trace(path)


def test_trace_invariants_enforced():
    with pytest.raises(ValueError):
        WorkloadTrace(np.full((1, 14), 0.5), [10])
    with pytest.raises(ValueError):
        WorkloadTrace(np.zeros((0, 14)), [])
    WorkloadTrace(np.zeros((1, 14)), [0])
