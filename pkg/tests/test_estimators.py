"""Estimator pipelines against exact branching-process answers."""

import math
import os

import numpy as np
import pytest

from sll.analytic import (
    MomentSpec,
    OffspringLaw,
    gw_joint_moments_exact,
    gw_progeny_distribution,
    gw_survival_exact,
)
from sll.estimators import (
    ConstantsWindows,
    EstimateWithCI,
    NormalizationContext,
    calibrate_criticality,
    estimate_cluster_tail,
    estimate_conditional_moments,
    estimate_constants,
    estimate_fourier_rpoint,
    estimate_scaled_moments,
    estimate_survival_curve,
    estimate_truncated_functional,
    estimate_yaglom,
    replicates_for_survivors,
    _batch_plan,
)
from sll.kernel import build_uniform_kernel
from sll.models import (
    BranchingRandomWalkModel,
    GaltonWatsonModel,
    OrientedPercolationModel,
)

BINARY = OffspringLaw.binary()
GW = GaltonWatsonModel(BINARY)
GW_CONSTANTS = GW.exact_constants()


def exact_scaled_moment(n, times, exps):
    gens = tuple(int(t * n) for t in times)
    return n * gw_joint_moments_exact(BINARY, gens, exps) / n ** sum(exps)


class TestContainers:
    def test_estimate_invariants(self):
        est = EstimateWithCI(1.0, 0.1, 0.8, 1.2, 100, 50)
        assert est.n_effective == 50
        with pytest.raises(ValueError):
            EstimateWithCI(1.0, -0.1, 0.8, 1.2, 100, 50)
        with pytest.raises(ValueError):
            EstimateWithCI(2.0, 0.1, 0.8, 1.2, 100, 50)
        with pytest.raises(ValueError):
            EstimateWithCI(1.0, 0.1, 0.8, 1.2, 100, 200)

    def test_context_requires_positive_scale(self):
        with pytest.raises(ValueError):
            NormalizationContext(GW_CONSTANTS, 0)

    def test_batch_plan_sums_and_respects_layout(self):
        plan = _batch_plan(GW, 1_000_000, None, 100)
        assert sum(plan) == 1_000_000
        op = OrientedPercolationModel(build_uniform_kernel(5, 1), 1.0 / 242.0)
        plan = _batch_plan(op, 100_000, None, 256)
        assert sum(plan) == 100_000
        assert max(plan) <= op.max_batch_reps(256)


class TestSurvivalCurve:
    def test_matches_exact_survival(self):
        reps = 200_000
        curve = estimate_survival_curve(GW, [0, 50, 100], reps, seed=21)
        assert curve[0].theta.value == 1.0
        for point in curve[1:]:
            exact = gw_survival_exact(BINARY, int(point.n))
            assert point.theta.ci_low <= exact <= point.theta.ci_high
            z = (point.theta.value - exact) / point.theta.stderr
            assert abs(z) < 4.0
            assert point.scaled.value == pytest.approx(point.n * point.theta.value)

    def test_curve_is_nonincreasing(self):
        curve = estimate_survival_curve(GW, [10, 20, 40, 80], 20_000, seed=22)
        values = [p.theta.value for p in curve]
        assert values == sorted(values, reverse=True)

    def test_zero_survivors_flagged(self):
        curve = estimate_survival_curve(GW, [100_000], 200, seed=23)
        assert "degenerate" in curve[0].theta.flags
        assert curve[0].theta.value == 0.0
        assert curve[0].theta.ci_high > 0.0

    def test_deterministic(self):
        a = estimate_survival_curve(GW, [30], 10_000, seed=24)
        b = estimate_survival_curve(GW, [30], 10_000, seed=24)
        assert a[0].theta.value == b[0].theta.value

    def test_worker_count_invariance(self, monkeypatch):
        monkeypatch.setenv("SLL_WORKERS", "1")
        a = estimate_survival_curve(GW, [25, 50], 40_000, seed=25)
        monkeypatch.setenv("SLL_WORKERS", "3")
        b = estimate_survival_curve(GW, [25, 50], 40_000, seed=25)
        assert [p.theta.value for p in a] == [p.theta.value for p in b]


class TestScaledMoments:
    def test_against_exact_finite_n(self):
        ctx = NormalizationContext(GW_CONSTANTS, 500)
        specs = [
            MomentSpec((1.0,), (1,)),
            MomentSpec((1.0,), (2,)),
            MomentSpec((0.5, 1.0), (1, 1)),
        ]
        out = estimate_scaled_moments(GW, ctx, specs, 400_000, seed=31)
        for comp in out:
            times, exps = comp.spec.merged()
            exact = exact_scaled_moment(500, times, exps)
            z = (comp.estimate.value - exact) / comp.estimate.stderr
            assert abs(z) < 4.0

    def test_single_spec_returns_single(self):
        ctx = NormalizationContext(GW_CONSTANTS, 100)
        comp = estimate_scaled_moments(GW, ctx, MomentSpec((1.0,), (1,)), 50_000, seed=32)
        assert comp.predicted == 1.0
        assert abs(comp.estimate.value - 1.0) < 5.0 * comp.estimate.stderr

    def test_prediction_field_uses_analytic_limit(self):
        ctx = NormalizationContext(GW_CONSTANTS, 64)
        specs = [
            MomentSpec((1.0,), (2,)),
            MomentSpec((1.0,), (3,)),
            MomentSpec((0.5, 1.0), (1, 1)),
            MomentSpec((1.0, 2.0), (1, 1)),
        ]
        out = estimate_scaled_moments(GW, ctx, specs, 2_000, seed=33)
        assert [c.predicted for c in out] == [1.0, 1.5, 0.5, 1.0]

    def test_jackknife_reported_for_high_order(self):
        ctx = NormalizationContext(GW_CONSTANTS, 100)
        comp = estimate_scaled_moments(GW, ctx, MomentSpec((1.0,), (3,)), 100_000, seed=34)
        assert comp.jackknife_stderr is not None
        ratio = comp.jackknife_stderr / comp.estimate.stderr
        assert 0.5 < ratio < 2.0
        assert "se_mismatch" not in comp.estimate.flags

    def test_rejects_fourier_spec(self):
        ctx = NormalizationContext(GW_CONSTANTS, 100)
        spec = MomentSpec((1.0,), (1,), wavevectors=((0.5,),))
        with pytest.raises(ValueError, match="Fourier"):
            estimate_scaled_moments(GW, ctx, spec, 100, seed=35)

    def test_shared_pool_determinism_across_spec_sets(self):
        # the union of generations decides the stream layout, so a spec
        # reading a subset of the same union sees the same trajectories
        ctx = NormalizationContext(GW_CONSTANTS, 100)
        one = estimate_scaled_moments(
            GW, ctx, [MomentSpec((0.5, 1.0), (1, 1)), MomentSpec((1.0,), (2,))],
            30_000, seed=36,
        )
        two = estimate_scaled_moments(
            GW, ctx, [MomentSpec((1.0,), (2,)), MomentSpec((0.5, 1.0), (1, 1))],
            30_000, seed=36,
        )
        assert one[0].estimate.value == two[1].estimate.value
        assert one[1].estimate.value == two[0].estimate.value


class TestFourier:
    def setup_method(self):
        self.brw = BranchingRandomWalkModel(BINARY, build_uniform_kernel(2, 1))
        self.ctx = NormalizationContext(self.brw.exact_constants(), 200)

    def test_two_point_gaussian_value(self):
        spec = MomentSpec((1.0,), (1,), wavevectors=((2.0, 0.0),))
        out = estimate_fourier_rpoint(self.brw, self.ctx, spec, 150_000, seed=41)
        assert out.predicted == pytest.approx(math.exp(-1.0))
        z = (out.estimate.value - out.predicted) / out.estimate.stderr
        assert abs(z) < 4.0
        z_im = out.imaginary.value / out.imaginary.stderr
        assert abs(z_im) < 4.0

    def test_zero_wavevector_reduces_to_mass_moment(self):
        spec_f = MomentSpec((0.5, 1.0), (1, 1), wavevectors=((0.0, 0.0), (0.0, 0.0)))
        spec_m = MomentSpec((0.5, 1.0), (1, 1))
        four = estimate_fourier_rpoint(self.brw, self.ctx, spec_f, 20_000, seed=42)
        mass = estimate_scaled_moments(self.brw, self.ctx, spec_m, 20_000, seed=42)
        scale = self.ctx.constants.A * self.ctx.constants.branching_scale
        assert four.estimate.value * scale == pytest.approx(mass.estimate.value, rel=1e-12)
        assert four.imaginary.value == 0.0

    def test_rejects_spaceless_model_and_missing_v(self):
        spec = MomentSpec((1.0,), (1,), wavevectors=((1.0,),))
        with pytest.raises(ValueError, match="positions"):
            estimate_fourier_rpoint(GW, self.ctx, spec, 100, seed=43)
        bad_ctx = NormalizationContext(GW_CONSTANTS, 100)  # no v
        brw1 = BranchingRandomWalkModel(BINARY, build_uniform_kernel(1, 1))
        with pytest.raises(ValueError, match="variance"):
            estimate_fourier_rpoint(brw1, bad_ctx, spec, 100, seed=44)

    def test_rejects_dimension_mismatch(self):
        spec = MomentSpec((1.0,), (1,), wavevectors=((1.0,),))
        with pytest.raises(ValueError, match="dimension"):
            estimate_fourier_rpoint(self.brw, self.ctx, spec, 100, seed=45)


class TestConditionalMoments:
    def test_limit_value(self):
        ctx = NormalizationContext(GW_CONSTANTS, 400)
        out = estimate_conditional_moments(
            GW, ctx, 1.0, MomentSpec((1.0,), (1,)), 400_000, seed=51
        )
        assert out.predicted == 0.5
        # exact finite-n conditional mean is (1/n)/theta_n
        exact = 1.0 / (400 * gw_survival_exact(BINARY, 400))
        z = (out.estimate.value - exact) / out.estimate.stderr
        assert abs(z) < 4.0
        assert out.estimate.n_effective < out.estimate.n_samples

    def test_consistency_with_unconditional(self):
        # same pool: E[Z | survival] * theta_hat == E[Z] to float precision
        ctx = NormalizationContext(GW_CONSTANTS, 100)
        spec = MomentSpec((1.0,), (2,))
        cond = estimate_conditional_moments(GW, ctx, 1.0, spec, 50_000, seed=52)
        scaled = estimate_scaled_moments(GW, ctx, spec, 50_000, seed=52)
        theta_hat = cond.estimate.n_effective / cond.estimate.n_samples
        assert cond.estimate.value * theta_hat == pytest.approx(
            scaled.estimate.value / ctx.n, rel=1e-12
        )

    def test_rejects_earlier_observation(self):
        ctx = NormalizationContext(GW_CONSTANTS, 100)
        with pytest.raises(ValueError, match="precede"):
            estimate_conditional_moments(
                GW, ctx, 1.0, MomentSpec((0.5,), (1,)), 100, seed=53
            )

    def test_low_power_flag(self):
        ctx = NormalizationContext(GW_CONSTANTS, 200)
        out = estimate_conditional_moments(
            GW, ctx, 1.0, MomentSpec((1.0,), (1,)), 2_000, seed=54
        )
        assert "low_power" in out.estimate.flags


class TestYaglom:
    def test_against_exact_conditional_mean(self):
        out = estimate_yaglom(GW, 100, 400_000, seed=61)
        exact_mean = 1.0 / (100 * gw_survival_exact(BINARY, 100))
        z = (out.mean.value - exact_mean) / out.mean.stderr
        assert abs(z) < 4.0
        assert out.predicted_mean == 0.5
        assert out.samples.size == out.mean.n_effective
        assert out.ks.statistic < 0.1

    def test_low_power_flag_and_zero_survivors(self):
        out = estimate_yaglom(GW, 50, 2_000, seed=62)
        assert "low_power" in out.mean.flags
        with pytest.raises(RuntimeError):
            estimate_yaglom(GW, 100_000, 100, seed=63)

    def test_requires_constants_when_not_exact(self):
        op = OrientedPercolationModel(build_uniform_kernel(5, 1), 1.0 / 242.0)
        with pytest.raises(ValueError, match="constants"):
            estimate_yaglom(op, 10, 1_000, seed=64)


class TestClusterTail:
    def test_root_threshold_is_exactly_one(self):
        out = estimate_cluster_tail(GW, [1, 10], 20_000, seed=71)
        assert out.points[0].estimate.value == 1.0

    def test_against_exact_tail(self):
        reps = 200_000
        out = estimate_cluster_tail(GW, [10, 100, 1000], reps, seed=72)
        _, tail = gw_progeny_distribution(BINARY, 1000)
        for point in out.points:
            exact = math.sqrt(point.k) * tail[point.k]
            z = (point.estimate.value - exact) / point.estimate.stderr
            assert abs(z) < 4.0
        assert 0.7 < out.c_cluster < 0.9

    def test_censoring_keeps_small_thresholds_exact(self):
        # growth stops at the largest threshold; smaller ones are untouched
        small = estimate_cluster_tail(GW, [10], 100_000, seed=73)
        _, tail = gw_progeny_distribution(BINARY, 10)
        z = (small.points[0].estimate.value - math.sqrt(10) * tail[10]) / small.points[
            0
        ].estimate.stderr
        assert abs(z) < 4.0

    def test_rejects_bad_thresholds(self):
        with pytest.raises(ValueError):
            estimate_cluster_tail(GW, [0, 10], 100, seed=74)


class TestTruncatedFunctional:
    def test_survival_mass_at_unit_threshold(self):
        # H == 1 and small eta: n V A P(N_n > eta...) ~ n theta_n -> 2
        ctx = NormalizationContext(GW_CONSTANTS, 500)
        out = estimate_truncated_functional(
            GW, ctx, 1.0, 1.0, 1e-9, "indicator_one", 300_000, seed=81
        )
        exact = 500 * gw_survival_exact(BINARY, 500)
        z = (out.direct.value - exact) / out.direct.stderr
        assert abs(z) < 4.0

    def test_zero_functional(self):
        ctx = NormalizationContext(GW_CONSTANTS, 100)
        out = estimate_truncated_functional(
            GW, ctx, 1.0, 1.0, 0.5, "zero", 1_000, seed=82
        )
        assert out.direct.value == 0.0
        assert out.size_biased.value == 0.0

    def test_routes_agree(self):
        ctx = NormalizationContext(GW_CONSTANTS, 200)
        out = estimate_truncated_functional(
            GW, ctx, 1.0, 1.0, 0.25, "exp_decay", 200_000, seed=83
        )
        se = math.hypot(out.direct.stderr, out.size_biased.stderr)
        assert abs(out.direct.value - out.size_biased.value) < 4.0 * se

    def test_identity_clipped_two_times(self):
        ctx = NormalizationContext(GW_CONSTANTS, 200)
        out = estimate_truncated_functional(
            GW, ctx, 0.5, 1.0, 0.25, "identity_clipped", 100_000, seed=84
        )
        assert out.direct.value > 0.0

    def test_unknown_id_rejected(self):
        ctx = NormalizationContext(GW_CONSTANTS, 100)
        with pytest.raises(ValueError, match="unknown functional"):
            estimate_truncated_functional(GW, ctx, 1.0, 1.0, 0.5, "nope", 100, seed=85)


class TestCalibration:
    def test_finds_critical_branching_mean(self):
        family = lambda mu: GaltonWatsonModel(OffspringLaw.binary_family(mu))
        out = calibrate_criticality(
            family, (0.9, 1.1), (20, 60), 50_000, seed=91
        )
        assert abs(out.parameter - 1.0) < 5e-3
        assert out.flat

    def test_rejects_non_straddling_bracket(self):
        family = lambda mu: GaltonWatsonModel(OffspringLaw.binary_family(mu))
        with pytest.raises(ValueError, match="straddle"):
            calibrate_criticality(family, (1.05, 1.2), (10, 30), 20_000, seed=92)

    def test_evaluations_recorded(self):
        family = lambda mu: GaltonWatsonModel(OffspringLaw.binary_family(mu))
        out = calibrate_criticality(family, (0.8, 1.2), (10, 30), 20_000, seed=93)
        assert len(out.evaluations) >= 3
        params = [p for p, _, _ in out.evaluations]
        assert params[0] == 0.8 and params[1] == 1.2


class TestConstants:
    def test_branching_process_constants(self):
        windows = ConstantsWindows(
            plateau_times=(50, 100, 200), second_moment_times=(50, 100, 200)
        )
        out = estimate_constants(GW, windows, 400_000, seed=101)
        # exact values: A = 1, V = 1, 2/(AV) = 2; bootstrap CIs are ~95%,
        # so a frozen seed is held to |z| < 5 rather than strict coverage
        for est, truth in ((out.A, 1.0), (out.V, 1.0), (out.kolmogorov, 2.0)):
            assert est.stderr > 0.0
            assert abs(est.value - truth) < 5.0 * est.stderr
        assert 0.005 < out.A.stderr < 0.03
        assert out.v is None
        assert "no_plateau" not in out.flags

    def test_spatial_variance_from_fourier_decay(self):
        brw = BranchingRandomWalkModel(BINARY, build_uniform_kernel(2, 1))
        windows = ConstantsWindows(
            plateau_times=(50, 100),
            second_moment_times=(50, 100),
            fourier_time=100,
            fourier_wavevectors=((0.6, 0.0), (1.0, 0.0), (1.4, 0.0), (0.0, 1.8)),
        )
        out = estimate_constants(brw, windows, 300_000, seed=102)
        assert out.v is not None
        assert abs(out.v.value - 1.5) < 0.2
        assert out.constants.v == out.v.value

    def test_fourier_window_requires_positions(self):
        windows = ConstantsWindows(fourier_time=50, fourier_wavevectors=((1.0,),))
        with pytest.raises(ValueError, match="spatial"):
            estimate_constants(GW, windows, 10_000, seed=103)

    def test_deterministic(self):
        windows = ConstantsWindows(plateau_times=(20, 40), second_moment_times=(20, 40))
        a = estimate_constants(GW, windows, 30_000, seed=104)
        b = estimate_constants(GW, windows, 30_000, seed=104)
        assert a.A.value == b.A.value and a.V.value == b.V.value

    def test_worker_count_invariance(self, monkeypatch):
        windows = ConstantsWindows(plateau_times=(20, 40), second_moment_times=(20, 40))
        monkeypatch.setenv("SLL_WORKERS", "1")
        a = estimate_constants(GW, windows, 60_000, seed=105)
        monkeypatch.setenv("SLL_WORKERS", "4")
        b = estimate_constants(GW, windows, 60_000, seed=105)
        assert a.A.value == b.A.value
        assert a.kolmogorov.value == b.kolmogorov.value


class TestPlanning:
    def test_survivor_planning_formula(self):
        reps = replicates_for_survivors(100, 1000, GW_CONSTANTS)
        theta = 2.0 / (GW_CONSTANTS.A * GW_CONSTANTS.V * 100)
        assert reps == math.ceil(1000 * 1.3 / theta)
        assert abs(reps - 65_000) <= 1
        with pytest.raises(ValueError):
            replicates_for_survivors(100, 0, GW_CONSTANTS)
