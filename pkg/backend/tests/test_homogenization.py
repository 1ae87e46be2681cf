"""Rescaled lattice paths, martingale split, limit sampling and convergence diagnostics."""
import numpy as np
import pytest

import backend.lab.homogenization as homogenization
from backend.lab.corrector import ExactOneDimCorrector, ExactSourceOneDim, ZeroCorrector
from backend.lab.effective_diffusion import abar_exact_1d, factorize_block
from backend.lab.error_handler import ConfigurationError, DomainError, NumericError, ResolutionError
from backend.lab.homogenization import (ConvergenceReport, LimitSampler, PathEnsemble, abar_block,
                                        approximation_distance, corrected_process, fit_distance_shape,
                                        fourth_moment_envelope, gaussian_limit_sample, gibbs_starts,
                                        lipschitz_moment_check, martingale_decompose, moment_bound,
                                        path_metric, qv_check, random_env_run, read_frame,
                                        simulate_xeps, simulate_zeta, tightness_diagnostic,
                                        weak_convergence_test, write_frame)
from backend.lab.trig_poly import TWO_PI, TrigPoly

COS = TrigPoly.cosine([1])


def _brownian(paths, times, sites=(0,), seed=0, scale=np.sqrt(2.0)):
    times = np.asarray(times, dtype=float)
    steps = np.diff(np.concatenate([[0.0], times]))
    rng = np.random.default_rng(seed)
    inc = scale * np.sqrt(steps)[None, :, None] * rng.standard_normal((paths, len(times), len(sites)))
    values = np.concatenate([np.zeros((paths, 1, len(sites))), np.cumsum(inc, axis=1)], axis=1)
    return PathEnsemble(eps=1.0, dt=float(steps.min()), times=np.concatenate([[0.0], times]), paths=values,
                        seed=seed, initial="zero", route="test", sites=tuple(sites))


@pytest.fixture
def free_ensemble(free_spec, line_geom):
    return simulate_xeps(free_spec, line_geom, 0.5, np.zeros(line_geom.n_sites), dt=0.0025, horizon=1.0,
                         paths=400, seed=4)


@pytest.mark.lab_test
class TestPathEnsemble:
    def test_times_must_increase(self):
        with pytest.raises(ConfigurationError):
            PathEnsemble(1.0, 0.1, [0.0, 0.0], np.zeros((1, 2, 1)), 0, "zero", "test", (0,))

    def test_shape_checked(self):
        with pytest.raises(ConfigurationError):
            PathEnsemble(1.0, 0.1, [0.0, 0.1], np.zeros((1, 3, 1)), 0, "zero", "test", (0,))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            PathEnsemble(1.0, 0.1, [0.0, 0.1], np.full((1, 2, 1), np.nan), 0, "zero", "test", (0,))

    def test_displacement_and_columns(self):
        ensemble = _brownian(3, [0.5, 1.0], sites=(4, 7))
        disp = ensemble.displacement([7])
        assert disp.shape == (3, 2, 1)
        np.testing.assert_allclose(disp[:, :, 0], ensemble.paths[:, 1:, 1])
        with pytest.raises(DomainError):
            ensemble.columns([5])


@pytest.mark.lab_test
class TestSimulateXeps:
    @pytest.mark.parametrize("kwargs", [{"eps": 0.0}, {"eps": 1.5}, {"route": "sideways"}, {"horizon": 0.0}])
    def test_invalid_arguments(self, cos_spec, line_geom, kwargs):
        args = dict(eps=0.5, dt=0.0025, horizon=1.0, route="rescaled")
        args.update(kwargs)
        with pytest.raises(ConfigurationError):
            simulate_xeps(cos_spec, line_geom, args["eps"], np.zeros(5), args["dt"], args["horizon"],
                          paths=2, seed=0, route=args["route"])

    def test_coarse_step_is_rejected(self, cos_spec, line_geom):
        with pytest.raises(ResolutionError):
            simulate_xeps(cos_spec, line_geom, 0.5, np.zeros(5), dt=0.01, horizon=1.0, paths=2, seed=0)

    def test_start_shape_checked(self, cos_spec, line_geom):
        with pytest.raises(ConfigurationError):
            simulate_xeps(cos_spec, line_geom, 0.5, np.zeros((3, 5)), dt=0.0025, horizon=1.0, paths=2, seed=0)

    def test_routes_agree(self, cos_spec, line_geom):
        x0 = np.linspace(0.0, 1.0, line_geom.n_sites)
        rescaled = simulate_xeps(cos_spec, line_geom, 0.5, x0, 0.0025, 0.5, paths=6, seed=8, route="rescaled")
        direct = simulate_xeps(cos_spec, line_geom, 0.5, x0, 0.0025, 0.5, paths=6, seed=8, route="direct")
        np.testing.assert_allclose(rescaled.paths, direct.paths, atol=1e-8)
        assert rescaled.flags == ["route:rescaled"]

    def test_record_stride_keeps_final_time(self, cos_spec, line_geom):
        ensemble = simulate_xeps(cos_spec, line_geom, 1.0, np.zeros(5), 0.01, 0.33, paths=2, seed=0,
                                 record_every=10)
        np.testing.assert_allclose(ensemble.times, [0.0, 0.1, 0.2, 0.3, 0.33])
        assert ensemble.paths.shape == (2, 5, line_geom.n_sites)
        np.testing.assert_array_equal(ensemble.paths[:, 0], 0.0)

    @pytest.mark.parametrize("workers", [4, 8])
    def test_independent_of_workers(self, cos_spec, line_geom, workers):
        x0 = np.linspace(0.0, 1.0, line_geom.n_sites)
        serial = simulate_xeps(cos_spec, line_geom, 0.5, x0, 0.0025, 0.25, paths=300, seed=5)
        pooled = simulate_xeps(cos_spec, line_geom, 0.5, x0, 0.0025, 0.25, paths=300, seed=5, workers=workers)
        np.testing.assert_array_equal(pooled.paths, serial.paths)

    def test_selected_steps_only(self, cos_spec, line_geom):
        full = simulate_xeps(cos_spec, line_geom, 1.0, np.zeros(5), 0.01, 1.0, paths=2, seed=0)
        ensemble = simulate_xeps(cos_spec, line_geom, 1.0, np.zeros(5), 0.01, 1.0, paths=2, seed=0,
                                 record_steps=[50, 25])
        np.testing.assert_allclose(ensemble.times, [0.0, 0.25, 0.5, 1.0])
        np.testing.assert_array_equal(ensemble.paths, full.paths[:, [0, 25, 50, 100]])
        np.testing.assert_array_equal(ensemble.indices([0.5, 1.0]), [2, 3])
        with pytest.raises(DomainError):
            ensemble.indices([0.3])
        with pytest.raises(ConfigurationError):
            simulate_xeps(cos_spec, line_geom, 1.0, np.zeros(5), 0.01, 1.0, paths=2, seed=0, record_steps=[101])

    @pytest.mark.statistical_test
    def test_free_variance_is_scale_free(self, free_ensemble):
        variance = free_ensemble.displacement()[:, -1].var(axis=0).mean()
        assert variance == pytest.approx(2.0, rel=0.1)

    def test_gibbs_starts_are_scaled(self, cos_samples):
        starts = gibbs_starts(cos_samples, 0.25, 30, seed=1)
        assert starts.shape == (30, cos_samples.states.shape[1])
        assert np.all((starts >= 0) & (starts < 0.25 * TWO_PI))

    def test_moment_bound_is_finite(self, free_ensemble, line_geom):
        mean, se = moment_bound(free_ensemble, line_geom)
        assert 0.0 < mean < np.inf and se >= 0.0

    def test_free_flow_is_an_isometry(self, free_spec, line_geom):
        x = np.zeros(line_geom.n_sites)
        report = lipschitz_moment_check(free_spec, line_geom, x, x + 0.1, horizon=0.5, dt=0.01, paths=8, seed=0)
        assert report.ratio == pytest.approx(1.0)
        with pytest.raises(ConfigurationError):
            lipschitz_moment_check(free_spec, line_geom, x, x, 0.5, 0.01, 8, 0)


@pytest.mark.lab_test
class TestMartingale:
    def test_zero_corrector_keeps_displacement(self, free_ensemble):
        part = martingale_decompose(free_ensemble, ZeroCorrector())
        np.testing.assert_allclose(part.values, free_ensemble.paths - free_ensemble.paths[:, :1])
        assert part.source_tag == "zero" and part.corrector_se == 0.0
        assert part.null_test is not None

    @pytest.mark.statistical_test
    def test_free_quadratic_variation(self, free_ensemble):
        part = martingale_decompose(free_ensemble, ZeroCorrector(), sites=[1, 2])
        report = qv_check(part, free_ensemble, ZeroCorrector())
        np.testing.assert_allclose(report.integrated, 2.0 * np.eye(2))
        assert report.passed

    @pytest.mark.statistical_test
    def test_single_site_quadratic_variation(self, cos_spec, line_geom):
        ensemble = simulate_xeps(cos_spec, line_geom, 0.5, np.zeros(line_geom.n_sites), 0.0025, 1.0,
                                 paths=100, seed=6)
        source = ExactSourceOneDim(ExactOneDimCorrector(COS))
        part = martingale_decompose(ensemble, source, sites=[line_geom.origin])
        report = qv_check(part, ensemble, source)
        assert abs(report.relative_gap[0, 0]) < 0.1

    def test_qv_needs_same_grid(self, free_ensemble):
        part = martingale_decompose(free_ensemble, ZeroCorrector())
        part.times = part.times * 2.0
        with pytest.raises(ConfigurationError):
            qv_check(part, free_ensemble, ZeroCorrector())

    def test_corrected_process_with_zero_corrector(self, free_ensemble):
        corrected = corrected_process(free_ensemble, ZeroCorrector())
        np.testing.assert_array_equal(corrected.paths, free_ensemble.paths)
        assert corrected.route == "corrected"


@pytest.mark.lab_test
class TestLimit:
    @pytest.mark.statistical_test
    def test_limit_covariance(self):
        sampler = LimitSampler.from_matrix(abar_exact_1d(COS, (0, 1)), None, seed=3)
        sample = gaussian_limit_sample(sampler, [0.5, 1.0], paths=4000)
        final = sample.displacement()[:, -1]
        np.testing.assert_allclose(np.cov(final.T), sampler.covariance, atol=0.12)
        assert sample.paths.shape == (4000, 3, 2)

    def test_keys_give_independent_samples(self):
        sampler = LimitSampler.from_matrix(abar_exact_1d(COS, (0,)), None, seed=3)
        first = gaussian_limit_sample(sampler, [1.0], paths=5, key=0)
        second = gaussian_limit_sample(sampler, [1.0], paths=5, key=1)
        assert not np.array_equal(first.paths, second.paths)

    def test_times_must_be_positive(self):
        sampler = LimitSampler.from_matrix(abar_exact_1d(COS, (0,)), None, seed=3)
        with pytest.raises(ConfigurationError):
            gaussian_limit_sample(sampler, [0.0, 1.0], paths=5)

    def test_block_outside_matrix(self):
        with pytest.raises(DomainError):
            abar_block(abar_exact_1d(COS, (0, 1)), [2])


@pytest.mark.lab_test
class TestPathMetric:
    def test_identical_paths(self):
        paths = np.random.default_rng(0).normal(size=(3, 4, 2))
        times = np.array([0.0, 1.0, 2.0, 3.0])
        np.testing.assert_array_equal(path_metric(paths, paths, times, np.zeros(2)), 0.0)

    def test_saturates_below_one(self):
        times = np.array([0.0, 1.0])
        far = path_metric(np.zeros((1, 2, 1)), np.full((1, 2, 1), 10.0), times, np.zeros(1), n_max=10)
        assert far[0] == pytest.approx(1.0 - 2.0 ** -10)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            path_metric(np.zeros((1, 2, 1)), np.zeros((1, 3, 1)), np.array([0.0, 1.0]), np.zeros(1))

    def test_distance_needs_same_grid(self, line_geom):
        with pytest.raises(ConfigurationError):
            approximation_distance(_brownian(2, [1.0], sites=(0,)), _brownian(2, [1.0], sites=(1,)), line_geom)


@pytest.mark.lab_test
class TestApproximationProcess:
    def test_shared_drivers_reproduce_free_paths(self, free_ensemble, line_geom):
        block = tuple(int(s) for s in line_geom.block(1))
        factor = factorize_block(2.0 * np.eye(3), block)
        part = martingale_decompose(free_ensemble, ZeroCorrector())
        zeta = simulate_zeta(free_ensemble, factor, mode="shared", martingale=part)
        np.testing.assert_allclose(zeta.paths[:, :, list(block)], free_ensemble.paths[:, :, list(block)],
                                   atol=1e-10)
        rho = path_metric(zeta.paths[:, :, list(block)], free_ensemble.paths[:, :, list(block)],
                          free_ensemble.times, line_geom.norms[list(block)])
        np.testing.assert_allclose(rho, 0.0, atol=1e-8)
        assert zeta.route == "zeta_shared"

    def test_sites_outside_block_stay_frozen(self, free_ensemble):
        factor = factorize_block(2.0 * np.eye(1), (2,))
        zeta = simulate_zeta(free_ensemble, factor, mode="independent", seed=1)
        np.testing.assert_array_equal(zeta.paths[:, :, 0], free_ensemble.paths[:, :1, 0].repeat(
            len(free_ensemble.times), axis=1))
        assert zeta.route == "zeta_independent"

    def test_singular_factor_falls_back(self, free_ensemble):
        factor = factorize_block(np.diag([2.0, 0.0]), (1, 2))
        part = martingale_decompose(free_ensemble, ZeroCorrector())
        zeta = simulate_zeta(free_ensemble, factor, mode="shared", martingale=part)
        assert "fallback_independent" in zeta.flags
        assert zeta.route == "zeta_independent"

    def test_mode_checks(self, free_ensemble):
        factor = factorize_block(2.0 * np.eye(1), (2,))
        with pytest.raises(ConfigurationError):
            simulate_zeta(free_ensemble, factor, mode="mixed")
        with pytest.raises(ConfigurationError):
            simulate_zeta(free_ensemble, factor, mode="shared")

    @pytest.mark.statistical_test
    def test_fourth_moment_of_brownian_paths(self):
        ensemble = _brownian(8000, np.linspace(0.1, 1.0, 10), seed=2)
        report = fourth_moment_envelope(ensemble, [0], N=1)
        # E |sqrt(2) B_t|^4 = 12 t^2
        assert report.passed
        assert report.slope == pytest.approx(2.0, abs=0.15)
        assert report.a == pytest.approx(12.0, rel=0.3)

    def test_distance_shape_recovered(self):
        N, eps = np.meshgrid([1, 2, 3, 4], [1.0, 0.5, 0.25])
        N, eps = N.ravel(), eps.ravel()
        distances = 0.5 / np.sqrt(N) + 0.3 * eps + 0.2 * np.exp(-1.0 * N)
        fit = fit_distance_shape(N, eps, distances, c4_grid=[0.5, 1.0, 2.0])
        assert fit.c4 == 1.0
        assert fit.residual == pytest.approx(0.0, abs=1e-10)
        np.testing.assert_allclose(fit.predict(N, eps), distances, atol=1e-10)

    @pytest.mark.statistical_test
    def test_tightness_matches_brownian_reference(self, line_geom):
        ensemble = _brownian(500, np.linspace(0.01, 1.0, 100), sites=(line_geom.origin,), seed=5)
        report = tightness_diagnostic(ensemble, line_geom, n=1.0)
        assert report.fractions.shape == (3,)
        assert report.max_excess_z <= 4.0

    def test_tightness_horizon_checked(self, line_geom):
        with pytest.raises(ConfigurationError):
            tightness_diagnostic(_brownian(5, [0.5], sites=(0,)), line_geom, n=1.0)


@pytest.mark.lab_test
class TestConvergence:
    def test_report_rejects_negative_distance(self):
        report = ConvergenceReport("fixed", [1.0], (0,), [1.0], {"covariance_gap": 0.1, "level": 0.01})
        with pytest.raises(NumericError):
            report.add(1.0, "energy_distance", -0.1)
        with pytest.raises(NumericError):
            report.add(1.0, "energy_distance", float("nan"))

    def test_report_lookup_and_rows(self):
        report = ConvergenceReport("fixed", [1.0, 0.5], (0,), [1.0], {"covariance_gap": 0.1, "level": 0.01})
        report.add(0.5, "covariance_gap", 0.02, 0.01)
        report.add(1.0, "covariance_gap", 0.05, 0.01, floor=0.01)
        assert [r["eps"] for r in report.series("covariance_gap")] == [1.0, 0.5]
        assert report.value(0.5, "covariance_gap")["value"] == 0.02
        with pytest.raises(KeyError):
            report.value(0.25, "covariance_gap")
        rows = report.to_csv_rows()
        assert rows[0]["floor"] == "" and rows[1]["floor"] == 0.01

    def test_fixed_start_run(self, free_spec, line_geom):
        report = weak_convergence_test(free_spec, line_geom, [0.5, 1.0], abar_exact_1d(TrigPoly.zero(1),
                                       (line_geom.origin,)), [0.5, 1.0], paths=100, dt_quotient=0.05,
                                       seed=2, start_mode="fixed")
        assert report.eps == [1.0, 0.5]
        assert len(report.records) == 8
        assert set(report.verdicts) == {"covariance_trend", "covariance_final", "energy_trend", "ks_final"}
        assert report.thresholds["covariance_gap"] == pytest.approx(0.1)

    def test_runs_record_only_observation_times(self, free_spec, line_geom, mocker):
        spy = mocker.spy(homogenization, "simulate_xeps")
        weak_convergence_test(free_spec, line_geom, [0.5, 1.0], abar_exact_1d(TrigPoly.zero(1), (line_geom.origin,)),
                              [0.5, 1.0], paths=20, dt_quotient=0.05, seed=2, start_mode="fixed")
        steps = [list(call.kwargs["record_steps"]) for call in spy.call_args_list]
        assert steps == [[10, 20], [40, 80]]
        np.testing.assert_allclose(spy.spy_return.times, [0.0, 0.5, 1.0])

    @pytest.mark.parametrize("mode", ["gibbs", "sideways"])
    def test_start_mode_checked(self, free_spec, line_geom, mode):
        with pytest.raises(ConfigurationError):
            weak_convergence_test(free_spec, line_geom, [1.0], abar_exact_1d(COS, (line_geom.origin,)),
                                  [1.0], paths=10, dt_quotient=0.05, seed=0, start_mode=mode)

    def test_random_environment_run(self, cos_spec, line_geom, cos_samples):
        report = random_env_run(cos_spec, line_geom, [1.0, 0.5], abar_exact_1d(COS, (line_geom.origin,)),
                                cos_samples, [0.5, 1.0], n_environments=2, paths_per_environment=10,
                                dt_quotient=0.05, seed=1)
        assert report.mode == "environment"
        for eps in (1.0, 0.5):
            assert 0.0 <= report.value(eps, "cf_gap_mean")["value"] <= report.value(eps, "cf_gap_max")["value"]


@pytest.mark.lab_test
class TestFrames:
    def test_round_trip(self, free_ensemble, line_geom, tmp_path):
        path = tmp_path / "x.frame"
        write_frame(path, free_ensemble, line_geom)
        back, geom = read_frame(path)
        np.testing.assert_array_equal(back.paths, free_ensemble.paths)
        np.testing.assert_array_equal(back.times, free_ensemble.times)
        assert back.sites == free_ensemble.sites and back.eps == 0.5
        assert geom.side == line_geom.side

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.frame"
        path.write_bytes(b"\0" * 128)
        with pytest.raises(ConfigurationError):
            read_frame(path)
