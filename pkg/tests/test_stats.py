"""Streams, accumulators and interval machinery."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from sll.stats import (
    KSResult,
    MomentAccumulator,
    derive_seed,
    jackknife_se,
    ks_statistic,
    percentile_bootstrap,
    slope_with_se,
    stream,
    wilson_interval,
)


class TestStreams:
    def test_same_address_same_output(self):
        a = stream(12345, 7).random(64)
        b = stream(12345, 7).random(64)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = stream(12345, 7).random(64)
        b = stream(12345, 8).random(64)
        c = stream(12346, 7).random(64)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_derive_seed_spreads_tags(self):
        seeds = {derive_seed(99, tag) for tag in range(256)}
        assert len(seeds) == 256
        assert derive_seed(99, 3) == derive_seed(99, 3)

    def test_streams_from_derived_seeds_are_independent(self):
        s1 = derive_seed(5, 0)
        s2 = derive_seed(5, 1)
        assert not np.array_equal(stream(s1, 0).random(32), stream(s2, 0).random(32))


class TestMomentAccumulator:
    def test_matches_two_pass_within_ulps(self):
        rng = stream(2024, 0)
        xs = rng.random(1_000_000)
        acc = MomentAccumulator()
        for chunk in np.array_split(xs, 137):
            acc.add(chunk)
        mean_ref = float(xs.mean())
        var_ref = float(xs.var(ddof=1))
        assert abs(acc.mean - mean_ref) <= 8 * np.spacing(abs(mean_ref))
        assert abs(acc.variance - var_ref) <= 8 * np.spacing(abs(var_ref))

    def test_fixed_merge_order_is_bitwise_reproducible(self):
        rng = stream(11, 3)
        chunks = [rng.normal(size=1000) for _ in range(20)]

        def run():
            parts = []
            for c in chunks:
                a = MomentAccumulator()
                a.add(c)
                parts.append(a)
            total = MomentAccumulator()
            for p in parts:
                total.merge(p)
            return total.state()

        assert run() == run()

    def test_higher_moments_match_scipy(self):
        rng = stream(77, 0)
        xs = rng.exponential(size=200_000)
        acc = MomentAccumulator().add(xs)
        assert acc.skewness == pytest.approx(float(sps.skew(xs)), rel=1e-10)
        assert acc.excess_kurtosis == pytest.approx(float(sps.kurtosis(xs)), rel=1e-10)

    def test_single_values_and_batches_agree(self):
        xs = stream(5, 5).normal(size=400)
        a = MomentAccumulator().add(xs)
        b = MomentAccumulator()
        for x in xs:
            b.add_value(float(x))
        assert a.count == b.count
        assert a.mean == pytest.approx(b.mean, rel=1e-12)
        assert a.variance == pytest.approx(b.variance, rel=1e-9)
        assert a.m4 == pytest.approx(b.m4, rel=1e-8)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    @settings(max_examples=25, deadline=None)
    def test_merge_associative_up_to_roundoff(self, seed, parts):
        xs = stream(seed, 0).normal(size=parts * 101)
        chunks = np.array_split(xs, parts)
        accs = [MomentAccumulator().add(c) for c in chunks]
        left = MomentAccumulator()
        for a in accs:
            left.merge(a.copy())
        right = MomentAccumulator()
        for a in reversed(accs):
            right.merge(a.copy())
        assert left.count == right.count
        assert left.mean == pytest.approx(right.mean, rel=1e-12, abs=1e-12)
        assert left.variance == pytest.approx(right.variance, rel=1e-10)

    def test_empty_and_merge_identity(self):
        a = MomentAccumulator()
        b = MomentAccumulator().add(np.arange(10.0))
        a.merge(b)
        assert a.count == 10
        assert math.isnan(MomentAccumulator().variance)

    def test_state_round_trip(self):
        a = MomentAccumulator().add(np.arange(50.0))
        b = MomentAccumulator.from_state(a.state())
        assert a.state() == b.state()


class TestWilson:
    def test_matches_scipy_reference(self):
        ref = sps.binomtest(8, 10).proportion_ci(confidence_level=0.95, method="wilson")
        lo, hi = wilson_interval(8, 10, 0.95)
        assert lo == pytest.approx(ref.low, rel=1e-12)
        assert hi == pytest.approx(ref.high, rel=1e-12)

    def test_boundary_counts(self):
        lo, hi = wilson_interval(0, 50)
        assert lo == 0.0 and 0.0 < hi < 0.2
        lo, hi = wilson_interval(50, 50)
        assert 0.8 < lo < 1.0 and hi == 1.0

    @given(st.integers(1, 500), st.integers(0, 500))
    @settings(max_examples=50, deadline=None)
    def test_contains_point_estimate(self, trials, successes):
        successes = min(successes, trials)
        lo, hi = wilson_interval(successes, trials)
        assert 0.0 <= lo <= successes / trials <= hi <= 1.0

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            wilson_interval(1, 0)
        with pytest.raises(ValueError):
            wilson_interval(5, 4)
        with pytest.raises(ValueError):
            wilson_interval(1, 10, level=1.0)


class TestKS:
    def test_matches_scipy_asymptotic(self):
        xs = stream(31337, 0).random(5000)
        ours = ks_statistic(xs, lambda x: x)
        ref = sps.kstest(xs, "uniform", mode="asymp")
        assert ours.statistic == pytest.approx(ref.statistic, rel=1e-12)
        assert ours.pvalue == pytest.approx(ref.pvalue, rel=1e-6)

    def test_detects_wrong_law(self):
        xs = stream(31338, 0).exponential(size=5000)
        res = ks_statistic(xs, lambda x: np.clip(x / 4.0, 0, 1))
        assert res.pvalue < 1e-6

    def test_result_type(self):
        res = ks_statistic(np.linspace(0.01, 0.99, 100), lambda x: x)
        assert isinstance(res, KSResult)
        assert res.n == 100


class TestSlope:
    def test_unweighted_matches_linregress(self):
        rng = stream(404, 0)
        x = np.linspace(0, 10, 40)
        y = 3.0 * x - 1.0 + rng.normal(scale=0.5, size=40)
        ref = sps.linregress(x, y)
        fit = slope_with_se(x, y)
        assert fit.slope == pytest.approx(ref.slope, rel=1e-12)
        assert fit.intercept == pytest.approx(ref.intercept, rel=1e-12)
        assert fit.slope_se == pytest.approx(ref.stderr, rel=1e-10)

    def test_weighted_uses_inverse_variances_literally(self):
        rng = stream(405, 0)
        x = np.linspace(0, 5, 30)
        sigma = np.linspace(0.2, 1.0, 30)
        y = 2.0 * x + rng.normal(scale=sigma)
        w = 1.0 / sigma**2
        fit = slope_with_se(x, y, weights=w)
        ref_slope = np.polyfit(x, y, 1, w=np.sqrt(w))[0]
        assert fit.slope == pytest.approx(float(ref_slope), rel=1e-10)
        quadrupled = slope_with_se(x, y, weights=4.0 * w)
        assert quadrupled.slope == pytest.approx(fit.slope, rel=1e-12)
        assert quadrupled.slope_se == pytest.approx(fit.slope_se / 2.0, rel=1e-12)

    def test_degenerate_inputs_raise(self):
        with pytest.raises(ValueError):
            slope_with_se(np.ones(5), np.arange(5.0))
        with pytest.raises(ValueError):
            slope_with_se(np.arange(3.0), np.arange(3.0), weights=np.array([1.0, -1.0, 1.0]))


class TestResampling:
    def test_bootstrap_covers_mean(self):
        rows = stream(606, 0).normal(loc=3.0, size=400)
        point, lo, hi = percentile_bootstrap(rows, lambda r: float(r.mean()), seed=1)
        assert lo < 3.0 < hi
        assert point == pytest.approx(3.0, abs=0.2)

    def test_bootstrap_deterministic(self):
        rows = stream(607, 0).normal(size=100)
        a = percentile_bootstrap(rows, lambda r: float(r.mean()), seed=9)
        b = percentile_bootstrap(rows, lambda r: float(r.mean()), seed=9)
        assert a == b

    def test_jackknife_of_mean_equals_sem(self):
        rows = stream(608, 0).normal(size=250)
        se = jackknife_se(rows, lambda r: float(r.mean()))
        assert se == pytest.approx(float(rows.std(ddof=1) / math.sqrt(rows.size)), rel=1e-10)
