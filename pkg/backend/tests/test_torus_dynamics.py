"""Quotient dynamics, Gibbs sampling, mixing and path lifting."""
import numpy as np
import pytest
from scipy import special

from backend.lab.error_handler import (AmbiguousWindingError, ConfigurationError, DomainError,
                                       NumericError)
from backend.lab.rng import STREAM_QUOTIENT, chunk_ranges, substream
from backend.lab.torus_dynamics import (GibbsSampleSet, LatticeState, MixingCurve, StateRecorder,
                                        TorusState, chart, circular_distance, continuous_lift, dlr_check,
                                        generator_apply, gibbs_sample, mixing_curve, mixing_starts, project,
                                        reduce_angles, semigroup_check, simulate_paths, simulate_quotient,
                                        stationarity_check, step_quotient, time_steps, weak_order_check)
from backend.lab.trig_poly import TWO_PI, LocalFunction


@pytest.mark.lab_test
class TestStates:
    def test_reduce_angles_range(self):
        x = np.array([-TWO_PI, -0.5, 0.0, TWO_PI, 7.0, TWO_PI - 1e-18])
        reduced = reduce_angles(x)
        assert np.all((reduced >= 0) & (reduced < TWO_PI))

    def test_circular_distance_wraps(self):
        assert circular_distance(0.1, TWO_PI - 0.1) == pytest.approx(0.2)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            TorusState(np.array([0.0, np.nan]))
        with pytest.raises(NumericError):
            LatticeState(np.array([np.inf]))

    def test_chart_and_project(self):
        x = LatticeState(np.array([7.0, -1.0]))
        y = project(x)
        np.testing.assert_allclose(chart(y).values, np.mod([7.0, -1.0], TWO_PI))

    def test_time_steps_off_grid(self):
        np.testing.assert_array_equal(time_steps([0.5, 1.0], 0.25), [2, 4])
        with pytest.raises(ConfigurationError):
            time_steps([0.3], 0.25)


@pytest.mark.lab_test
class TestSimulation:
    def test_free_step_without_noise_is_identity(self, free_spec, line_geom):
        state = TorusState(np.linspace(0.0, 6.0, line_geom.n_sites))
        moved = step_quotient(free_spec, line_geom, state, 0.01, np.zeros(line_geom.n_sites))
        np.testing.assert_allclose(moved.angles, state.angles)

    def test_step_rejects_bad_input(self, free_spec, line_geom):
        state = TorusState(np.zeros(line_geom.n_sites))
        with pytest.raises(ConfigurationError):
            step_quotient(free_spec, line_geom, state, 0.0, np.zeros(line_geom.n_sites))
        with pytest.raises(NumericError):
            step_quotient(free_spec, line_geom, state, 0.1, np.full(line_geom.n_sites, np.nan))

    def test_results_do_not_depend_on_workers(self, coupled_spec, line_geom):
        y0 = np.linspace(0.0, 3.0, line_geom.n_sites)
        one = simulate_quotient(coupled_spec, line_geom, y0, 0.01, 20, paths=300, seed=9, workers=1)
        many = simulate_quotient(coupled_spec, line_geom, y0, 0.01, 20, paths=300, seed=9, workers=3)
        np.testing.assert_array_equal(one, many)

    def test_seed_changes_paths(self, cos_spec, line_geom):
        y0 = np.zeros(line_geom.n_sites)
        a = simulate_quotient(cos_spec, line_geom, y0, 0.01, 5, paths=4, seed=1)
        b = simulate_quotient(cos_spec, line_geom, y0, 0.01, 5, paths=4, seed=2)
        assert not np.array_equal(a, b)

    def test_start_shape_checked(self, cos_spec, line_geom):
        with pytest.raises(DomainError):
            simulate_paths(cos_spec, line_geom, np.zeros((1, 3)), 0.01, 2, seed=0,
                           stream=STREAM_QUOTIENT, n_paths=2,
                           observers=[lambda: StateRecorder([0])])
        with pytest.raises(ConfigurationError):
            simulate_paths(cos_spec, line_geom, np.zeros((1, line_geom.n_sites)), 0.01, 2, seed=0,
                           stream=STREAM_QUOTIENT)

    def test_chunks_keep_antithetic_pairs(self):
        ranges = chunk_ranges(10, chunk=3)
        assert all(r.start % 2 == 0 for r in ranges)
        assert sum(len(r) for r in ranges) == 10

    def test_substreams_are_reproducible(self):
        assert substream(3, 1, 2).random() == substream(3, 1, 2).random()
        assert substream(3, 1, 2).random() != substream(3, 1, 3).random()

    @pytest.mark.statistical_test
    def test_free_variance(self, free_spec, line_geom):
        frames = simulate_quotient(free_spec, line_geom, np.zeros(line_geom.n_sites),
                                   0.01, 50, paths=2000, seed=4)
        lifted = continuous_lift(frames, LatticeState(np.zeros(line_geom.n_sites)))
        variance = lifted[:, -1].var(axis=0).mean()
        # sqrt(2) B at t = 0.5
        assert variance == pytest.approx(1.0, rel=0.08)


@pytest.mark.lab_test
class TestLift:
    def test_lift_inverts_projection(self):
        t = np.linspace(0.0, 3.0, 40)
        path = np.stack([4.0 * t, -3.0 * t], axis=1)
        torus = reduce_angles(path)
        lifted = continuous_lift(torus, LatticeState(path[0]))
        np.testing.assert_allclose(lifted, path, atol=1e-12)

    def test_large_increment_is_ambiguous(self):
        torus = reduce_angles(np.array([[0.0], [3.2]]))
        with pytest.raises(AmbiguousWindingError):
            continuous_lift(torus, LatticeState(np.zeros(1)))

    def test_initial_state_must_project(self):
        with pytest.raises(DomainError):
            continuous_lift(np.zeros((3, 1)), LatticeState(np.ones(1)))


@pytest.mark.lab_test
class TestGenerator:
    def test_free_generator_on_cosine(self, free_spec, line_geom):
        f = LocalFunction.cosine([line_geom.origin], [1])
        y = np.random.default_rng(0).uniform(0, TWO_PI, size=(6, line_geom.n_sites))
        np.testing.assert_allclose(generator_apply(free_spec, line_geom, f, y), -np.cos(y[:, line_geom.origin]))

    def test_generator_includes_drift(self, cos_spec, line_geom):
        k = line_geom.origin
        f = LocalFunction.sine([k], [1])
        y = np.random.default_rng(1).uniform(0, TWO_PI, size=(6, line_geom.n_sites))
        expected = -np.sin(y[:, k]) + np.sin(y[:, k]) * np.cos(y[:, k])
        np.testing.assert_allclose(generator_apply(cos_spec, line_geom, f, y), expected, atol=1e-12)

    def test_window_outside_box(self, cos_spec, line_geom):
        with pytest.raises(DomainError):
            generator_apply(cos_spec, line_geom, LocalFunction.cosine([7], [1]), np.zeros((1, 5)))


@pytest.mark.lab_test
class TestGibbsSampleSet:
    def test_take_spreads_indices(self, cos_samples):
        idx = cos_samples.take(5)
        assert idx[0] == 0 and idx[-1] == len(cos_samples) - 1
        assert len(cos_samples.subset(idx)) == 5

    def test_stall_guard_on_acceptance(self):
        from backend.lab.error_handler import SamplerStallError
        with pytest.raises(SamplerStallError):
            GibbsSampleSet(states=np.zeros((2, 1)), chain_ids=np.zeros(2), burn_in=0, thinning=1,
                           acceptance_rate=0.0, seed=0, step_size=0.1)

    def test_samples_live_on_torus(self, cos_samples, line_geom):
        assert cos_samples.states.shape == (4 * 150, line_geom.n_sites)
        assert np.all((cos_samples.states >= 0) & (cos_samples.states < TWO_PI))
        assert cos_samples.n_chains == 4
        assert 0.2 < cos_samples.acceptance_rate <= 1.0

    @pytest.mark.statistical_test
    def test_gibbs_mean_of_cosine(self, cos_samples, line_geom):
        values = np.cos(cos_samples.states[:, line_geom.origin])
        mean, se = cos_samples.mean_and_se(values)
        # <cos> under exp(-cos) is -I1(1) / I0(1)
        expected = -special.iv(1, 1.0) / special.iv(0, 1.0)
        assert abs(mean - expected) <= max(4 * se, 0.08)

    @pytest.mark.statistical_test
    def test_large_steps_keep_gibbs_law(self, cos_spec, line_geom):
        # proposals routinely leave [0, 2 pi) at this step size
        samples = gibbs_sample(cos_spec, line_geom, n_chains=16, n_samples=800, burn_in=200, thinning=2,
                               step_size=4.0, seed=11)
        mean, se = samples.mean_and_se(np.cos(samples.states).mean(axis=1))
        expected = -special.iv(1, 1.0) / special.iv(0, 1.0)
        assert abs(mean - expected) <= 4 * se

    @pytest.mark.statistical_test
    def test_dlr_consistency(self, cos_spec, line_geom, cos_samples):
        phi = LocalFunction.cosine([line_geom.origin], [1])
        result = dlr_check(cos_spec, line_geom, cos_samples, [line_geom.origin], phi)
        assert result.z_score <= 4.0
        assert result.quad_points >= 64

    def test_dlr_window_size(self, cos_spec, line_geom, cos_samples):
        phi = LocalFunction.cosine([0], [1])
        with pytest.raises(ConfigurationError):
            dlr_check(cos_spec, line_geom, cos_samples, [0, 1, 2], phi)


@pytest.mark.lab_test
class TestMixing:
    def test_constant_observable_is_inconclusive(self, cos_spec, line_geom, cos_samples):
        starts = mixing_starts(cos_samples, line_geom, 4)
        assert starts.shape == (6, line_geom.n_sites)
        curve = mixing_curve(cos_spec, line_geom, LocalFunction.constant(1.0), starts, [0.0, 1.0],
                             10, 0.01, seed=0)
        assert curve.inconclusive

    def test_tail_bound(self):
        curve = MixingCurve(times=np.array([0.0]), sup_gap=np.zeros(1), raw_gap=np.zeros(1), se=np.zeros(1),
                            mu0_mean=0.0, alpha_hat=3.0, k_hat=2.0, c=1.0, rate_hat=1.0, inconclusive=False)
        assert curve.tail_bound(1.0) == pytest.approx(2.0 * 2.0 ** -2 / 2.0)
        curve.alpha_hat = 0.8
        assert curve.tail_bound(1.0) == float("inf")

    @pytest.mark.statistical_test
    def test_gap_decreases(self, cos_spec, line_geom, cos_samples):
        phi = LocalFunction.cosine([line_geom.origin], [1])
        mean, se = cos_samples.mean_and_se(phi(cos_samples.states))
        curve = mixing_curve(cos_spec, line_geom, phi, mixing_starts(cos_samples, line_geom, 4),
                             [0.0, 0.5, 1.0, 2.0], 200, 0.01, seed=1, mu0_mean=(float(mean), float(se)))
        assert np.all(np.diff(curve.sup_gap) <= 0)
        assert curve.raw_gap[0] > curve.raw_gap[-1]


@pytest.mark.slow
@pytest.mark.statistical_test
class TestSemigroupChecks:
    def test_stationarity(self, cos_spec, line_geom, cos_samples):
        phi = LocalFunction.cosine([line_geom.origin], [1])
        report = stationarity_check(cos_spec, line_geom, cos_samples, phi, [0.5, 1.0], 0.01, seed=2)
        assert report.passed

    def test_semigroup_property(self, cos_spec, line_geom):
        phi = LocalFunction.cosine([line_geom.origin], [1])
        report = semigroup_check(cos_spec, line_geom, phi, np.zeros(line_geom.n_sites), 0.3, 0.3, 0.01,
                                 outer_paths=100, inner_paths=50, seed=3)
        assert report.z_score <= 4.0


@pytest.mark.statistical_test
class TestWeakOrder:
    def test_free_levels_agree(self, free_spec, line_geom):
        phi = LocalFunction.cosine([line_geom.origin], [1])
        report = weak_order_check(free_spec, line_geom, np.zeros(line_geom.n_sites), phi, horizon=1.0,
                                  dt=0.1, paths=400, seed=6)
        assert report.dts == pytest.approx([0.1, 0.05, 0.025])
        # without drift every level sees the same endpoint
        np.testing.assert_allclose(report.differences, 0.0, atol=1e-9)
        assert abs(report.means[-1] - np.exp(-1.0)) <= 4 * report.ses[-1] + 0.02


class TestWeakOrderArguments:
    @pytest.mark.parametrize("horizon, dt, levels", [(1.0, 0.3, 3), (1.0, 0.1, 1), (0.0, 0.1, 3), (1.0, -0.1, 3)])
    def test_invalid_grid(self, free_spec, line_geom, horizon, dt, levels):
        phi = LocalFunction.cosine([line_geom.origin], [1])
        with pytest.raises(ConfigurationError):
            weak_order_check(free_spec, line_geom, np.zeros(line_geom.n_sites), phi, horizon=horizon, dt=dt,
                             paths=10, seed=0, levels=levels)

    def test_two_levels_have_no_order(self, free_spec, line_geom):
        phi = LocalFunction.cosine([line_geom.origin], [1])
        report = weak_order_check(free_spec, line_geom, np.zeros(line_geom.n_sites), phi, horizon=0.5, dt=0.1,
                                  paths=10, seed=0, levels=2)
        assert report.dts == pytest.approx([0.1, 0.05])
        assert len(report.differences) == 1
        assert np.isnan(report.observed_order)
