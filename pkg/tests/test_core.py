import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harp.core import GainSchedule, RunConfig, RunRecord, gain_arrays, make_gains, spawn_rng


class TestMakeGains:
    def test_unit_numerators_at_zero(self):
        g = make_gains(GainSchedule(a=1, c=1, alpha=1, gamma=1 / 6), 0)
        assert g.a == 1.0
        assert g.c == 1.0
        assert g.ctilde == 1.0
        assert g.w == 1.0

    def test_power_law_values_at_k999(self):
        sched = GainSchedule(a=1, c=1, alpha=0.602, gamma=0.101, A=100)
        g = make_gains(sched, 999)
        assert g.a == pytest.approx(1.0 / 1100**0.602, rel=1e-15)
        assert g.c == pytest.approx(1.0 / 1000**0.101, rel=1e-15)

    def test_regularization_weight_formula(self):
        sched = GainSchedule(a=1, c=1, alpha=1, gamma=1 / 6, eps0=0.1, eps_exponent=0.5)
        assert make_gains(sched, 3).eps == pytest.approx(0.05, abs=1e-15)

    def test_ctilde_tracks_c(self):
        sched = GainSchedule(a=1, c=2, alpha=0.7, gamma=0.1, ctilde_ratio=0.5)
        g = make_gains(sched, 7)
        assert g.ctilde == pytest.approx(0.5 * g.c, rel=1e-15)

    def test_offset_applies_to_step_size_only(self):
        with_offset = GainSchedule(a=1, c=1, alpha=0.602, gamma=0.101, A=50)
        without = GainSchedule(a=1, c=1, alpha=0.602, gamma=0.101, A=0)
        k = 10
        assert make_gains(with_offset, k).a < make_gains(without, k).a
        assert make_gains(with_offset, k).c == make_gains(without, k).c

    def test_tabulated_matches_pointwise(self):
        sched = GainSchedule(a=2.5, c=0.7, alpha=0.85, gamma=0.2, A=9, eps0=0.3)
        table = gain_arrays(sched, 50)
        for k in (0, 1, 17, 49):
            g = make_gains(sched, k)
            assert table["a"][k] == g.a
            assert table["c"][k] == g.c
            assert table["ctilde"][k] == g.ctilde
            assert table["w"][k] == g.w
            assert table["eps"][k] == g.eps


class TestScheduleValidation:
    def test_reference_exponents_accepted(self):
        GainSchedule(a=1, c=1, alpha=1, gamma=1 / 6)
        GainSchedule(a=1, c=1, alpha=0.602, gamma=0.101)

    def test_inadmissible_exponents_rejected(self):
        with pytest.raises(ValueError):
            GainSchedule(a=1, c=1, alpha=0.4, gamma=0.1)
        with pytest.raises(ValueError):
            GainSchedule(a=1, c=1, alpha=1, gamma=0.5)
        with pytest.raises(ValueError):
            GainSchedule(a=1, c=1, alpha=1.2, gamma=0.1)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"a": 0.0, "c": 1},
            {"a": -1, "c": 1},
            {"a": 1, "c": 0.0},
            {"a": 1, "c": 1, "A": -1},
            {"a": 1, "c": 1, "ctilde_ratio": 0},
            {"a": 1, "c": 1, "w_exponent": 0.5},
            {"a": 1, "c": 1, "w_exponent": 1.5},
            {"a": 1, "c": 1, "eps0": 0},
            {"a": 1, "c": 1, "eps_exponent": 0},
        ],
    )
    def test_bad_parameters_rejected(self, kwargs):
        with pytest.raises(ValueError):
            GainSchedule(**kwargs)


@settings(max_examples=200, deadline=None)
@given(
    a=st.floats(0.01, 100),
    c=st.floats(0.01, 100),
    alpha=st.floats(0.51, 1.0),
    frac=st.floats(0.01, 0.98),
    A=st.floats(0, 1000),
    w_exponent=st.floats(0.51, 1.0),
    eps_exponent=st.floats(0.01, 3.0),
    k=st.integers(0, 100_000),
)
def test_gains_positive_and_nonincreasing(a, c, alpha, frac, A, w_exponent, eps_exponent, k):
    gamma = frac * (alpha - 0.5)
    sched = GainSchedule(
        a=a, c=c, alpha=alpha, gamma=gamma, A=A, w_exponent=w_exponent, eps_exponent=eps_exponent
    )
    here, there = make_gains(sched, k), make_gains(sched, k + 1)
    for value in here:
        assert value > 0
    assert there.a <= here.a
    assert there.c <= here.c
    assert there.ctilde <= here.ctilde
    assert there.w <= here.w
    assert there.eps <= here.eps


class TestSpawnRng:
    def test_identical_keys_identical_streams(self):
        a = spawn_rng(42, 0, "perturbation").standard_normal(100)
        b = spawn_rng(42, 0, "perturbation").standard_normal(100)
        assert np.array_equal(a, b)

    def test_replicates_separate(self):
        a = spawn_rng(42, 0, "perturbation").standard_normal(100)
        b = spawn_rng(42, 1, "perturbation").standard_normal(100)
        assert not np.array_equal(a, b)

    def test_tags_separate(self):
        a = spawn_rng(42, 0, "noise").standard_normal(100)
        b = spawn_rng(42, 0, "perturbation").standard_normal(100)
        assert not np.array_equal(a, b)

    def test_negative_seed_allowed(self):
        spawn_rng(-7, 0, "noise").standard_normal(3)


class TestRunConfig:
    def test_valid(self):
        cfg = RunConfig(dimension=3, iterations=10, replicates=2, queries_per_iteration=4)
        assert cfg.queries_per_iteration == 4

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"dimension": 0, "iterations": 1},
            {"dimension": 1, "iterations": 0},
            {"dimension": 1, "iterations": 1, "replicates": 0},
            {"dimension": 1, "iterations": 1, "queries_per_iteration": 3},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            RunConfig(**kwargs)


def test_run_record_rejects_length_mismatch():
    n = 5
    with pytest.raises(ValueError):
        RunRecord(
            iteration=np.arange(n),
            queries=np.arange(n - 1),
            loss=np.zeros(n),
            distance=np.zeros(n),
            normalized_distance=np.zeros(n),
            terminal_theta=np.zeros(2),
        )
