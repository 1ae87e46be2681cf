"""Effective matrix estimators, block factorization, smoothing and truncation."""
import numpy as np
import pytest
from scipy import special

from backend.lab.corrector import ExactOneDimCorrector, ZeroCorrector, exact_derivatives
from backend.lab.effective_diffusion import (EffectiveMatrix, abar_exact_1d, abar_from_derivatives,
                                             abar_from_martingale, abar_from_msd, agreement_z,
                                             build_factor_ladder, factor_field, factorize_block, k_prime,
                                             row_norm_check, select_truncation, smooth_factor,
                                             time_integral_bound)
from backend.lab.error_handler import (ConfigurationError, DomainError, MatrixNotPSDError, SmoothingBudgetError,
                                       TruncationInfeasibleError)
from backend.lab.torus_dynamics import MixingCurve
from backend.lab.trig_poly import TrigPoly

COS = TrigPoly.cosine([1])
A_COS = 2.0 / special.iv(0, 1.0) ** 2


def _mixing(alpha=2.0, k_hat=1.0, c=1.0):
    zeros = np.zeros(1)
    return MixingCurve(times=zeros, sup_gap=zeros, raw_gap=zeros, se=zeros, mu0_mean=0.0, alpha_hat=alpha,
                       k_hat=k_hat, c=c, rate_hat=1.0, inconclusive=False)


def _exact_derivs(U, geom, points):
    exact = ExactOneDimCorrector(U)
    return {k: exact_derivatives(exact, geom, k, points) for k in range(geom.n_sites)}


@pytest.mark.lab_test
class TestEffectiveMatrix:
    def test_unknown_estimator_tag(self):
        with pytest.raises(ConfigurationError):
            EffectiveMatrix((0,), np.eye(1), np.zeros((1, 1)), "guess")

    def test_symmetry_and_psd(self):
        m = EffectiveMatrix((0, 1), np.array([[2.0, 0.3], [0.1, 2.0]]), np.full((2, 2), 0.05), "msd")
        assert m.symmetry_z() == pytest.approx(0.2 / np.sqrt(2 * 0.05 ** 2))
        assert m.psd_ok()
        np.testing.assert_allclose(m.symmetrized, [[2.0, 0.2], [0.2, 2.0]])

    def test_indefinite_matrix_fails_psd(self):
        m = EffectiveMatrix((0, 1), np.array([[1.0, 2.0], [2.0, 1.0]]), np.full((2, 2), 0.01), "msd")
        assert not m.psd_ok()

    def test_translation_invariance(self, line_geom):
        sites = tuple(int(s) for s in line_geom.block(1))
        uniform = EffectiveMatrix(sites, 1.5 * np.eye(3), np.full((3, 3), 0.01), "derivative")
        assert uniform.translation_z(line_geom) == 0.0
        skewed = np.eye(3)
        skewed[1, 1] = 3.0
        broken = EffectiveMatrix(sites, skewed, np.full((3, 3), 0.01), "derivative")
        assert "translation_invariance" in broken.invariant_failures(line_geom)

    def test_rows_round_trip(self, line_geom):
        sites = tuple(int(s) for s in line_geom.block(1))
        m = EffectiveMatrix(sites, np.arange(9.0).reshape(3, 3), np.full((3, 3), 0.1), "martingale")
        back = EffectiveMatrix.from_rows(m.to_rows(line_geom))
        assert back.sites == m.sites and back.provenance == "martingale"
        np.testing.assert_array_equal(back.values, m.values)

    def test_agreement_needs_same_block(self):
        first = abar_exact_1d(COS, (0, 1))
        with pytest.raises(ConfigurationError):
            agreement_z(first, abar_exact_1d(COS, (0,)))
        assert agreement_z(first, abar_exact_1d(COS, (0, 1))) == 0.0


@pytest.mark.lab_test
class TestEstimators:
    def test_exact_single_site_value(self):
        m = abar_exact_1d(COS, (3,))
        assert m.entry(3, 3)[0] == pytest.approx(A_COS, rel=1e-8)
        assert m.entry(3, 3)[0] == pytest.approx(1.2477, abs=1e-4)

    def test_free_value_is_two(self):
        assert abar_exact_1d(TrigPoly.zero(1), (0,)).values[0, 0] == pytest.approx(2.0)

    @pytest.mark.statistical_test
    def test_derivative_route_matches_exact(self, line_geom, cos_samples):
        sites = tuple(int(s) for s in line_geom.block(1))
        m = abar_from_derivatives(_exact_derivs(COS, line_geom, cos_samples.states), cos_samples,
                                  line_geom, sites)
        diag = np.diag(m.values)
        assert np.all(np.abs(diag - A_COS) <= 4 * np.diag(m.se) + 0.05)
        np.testing.assert_allclose(m.values - np.diag(diag), 0.0, atol=1e-12)
        assert not m.flags

    def test_derivative_route_length_checked(self, line_geom, cos_samples):
        derivs = _exact_derivs(COS, line_geom, cos_samples.states[:10])
        with pytest.raises(ConfigurationError):
            abar_from_derivatives(derivs, cos_samples, line_geom)

    @pytest.mark.statistical_test
    def test_martingale_route_free(self, free_spec, line_geom):
        sites = tuple(int(s) for s in line_geom.block(1))
        m = abar_from_martingale(free_spec, line_geom, sites, np.zeros((200, line_geom.n_sites)),
                                 ZeroCorrector(), window=0.5, n_windows=4, dt=0.01, seed=2)
        assert m.provenance == "martingale"
        assert np.all(np.abs(np.diag(m.values) - 2.0) <= 4 * np.diag(m.se) + 0.05)

    @pytest.mark.statistical_test
    def test_msd_route_free(self, free_spec, line_geom):
        sites = tuple(int(s) for s in line_geom.block(1))
        m = abar_from_msd(free_spec, line_geom, sites, np.zeros((400, line_geom.n_sites)),
                          [0.5, 1.0, 1.5], dt=0.01, seed=3)
        assert np.all(np.abs(np.diag(m.values) - 2.0) <= 4 * np.diag(m.se) + 0.1)

    def test_msd_times_must_increase(self, free_spec, line_geom):
        with pytest.raises(ConfigurationError):
            abar_from_msd(free_spec, line_geom, (0,), np.zeros((4, 5)), [1.0, 0.5], dt=0.01, seed=0)


@pytest.mark.lab_test
class TestFactorization:
    def test_reconstructs_psd_block(self):
        g = np.random.default_rng(0).normal(size=(4, 4))
        block = g @ g.T
        factor = factorize_block(block, sites=(5, 6, 7, 8))
        np.testing.assert_allclose(factor.sigma @ factor.sigma.T, block, atol=1e-9)
        assert factor.rank == 4 and factor.sites == (5, 6, 7, 8)

    def test_rank_deficient_block(self):
        v = np.array([[1.0], [2.0], [0.5]])
        factor = factorize_block(v @ v.T)
        assert factor.rank == 1
        assert factor.reconstruction_error <= 1e-10

    def test_zero_block(self):
        factor = factorize_block(np.zeros((2, 2)))
        assert factor.rank == 0 and not factor.sigma.any()

    def test_indefinite_block_rejected(self):
        with pytest.raises(MatrixNotPSDError):
            factorize_block(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_noisy_estimate_within_error_bars_is_clamped(self):
        estimate = EffectiveMatrix((0, 1), np.array([[1.0, 1.0001], [1.0001, 1.0]]), np.full((2, 2), 0.01),
                                   "martingale")
        assert estimate.psd_ok()
        with pytest.raises(MatrixNotPSDError):
            factorize_block(estimate.symmetrized)
        factor = estimate.factorize()
        assert factor.clamped == pytest.approx(1e-4, rel=1e-3)
        assert factor.sites == (0, 1)
        np.testing.assert_allclose(factor.sigma @ factor.sigma.T, estimate.symmetrized, atol=1e-4)
        single = estimate.factorize([1])
        np.testing.assert_allclose(single.sigma, [[1.0]])

    def test_estimate_beyond_error_bars_is_rejected(self):
        estimate = EffectiveMatrix((0, 1), np.array([[1.0, 1.5], [1.5, 1.0]]), np.full((2, 2), 0.01),
                                   "martingale")
        assert not estimate.psd_ok()
        with pytest.raises(MatrixNotPSDError):
            estimate.factorize()
        with pytest.raises(DomainError):
            estimate.factorize([7])

    def test_non_square_block_rejected(self):
        with pytest.raises(ConfigurationError):
            factorize_block(np.zeros((2, 3)))

    def test_factor_field_is_square_root(self):
        rows = np.random.default_rng(1).normal(size=(6, 3, 5))
        sigma = factor_field(rows)
        np.testing.assert_allclose(sigma, np.swapaxes(sigma, 1, 2), atol=1e-12)
        np.testing.assert_allclose(sigma @ sigma, np.einsum("ekj,elj->ekl", rows, rows), atol=1e-9)

    def test_row_norm_of_single_site_field(self, line_geom, cos_samples):
        sites = tuple(int(s) for s in line_geom.block(1))
        derivs = _exact_derivs(COS, line_geom, cos_samples.states)
        rows = np.stack([derivs[k].row(line_geom.n_sites)[0] for k in sites], axis=1)
        value, se, passed = row_norm_check(factor_field(rows), cos_samples)
        assert passed
        assert value == pytest.approx(A_COS, abs=max(4 * se, 0.1))


@pytest.mark.lab_test
class TestSmoothing:
    def test_smoothing_raises_cutoff_until_target(self, line_geom, cos_samples):
        sites = tuple(int(s) for s in line_geom.block(1))
        derivs = _exact_derivs(COS, line_geom, cos_samples.states)
        rows = np.stack([derivs[k].row(line_geom.n_sites)[0] for k in sites], axis=1)
        field = factor_field(rows)
        smoothed = smooth_factor(field, cos_samples.states, sites, N=2, geom=line_geom, max_cutoff=6)
        assert smoothed.cutoff >= 1
        assert smoothed.row_distance.max() < 0.5
        assert set(smoothed.dependency()) <= set(sites)
        held_out = cos_samples.states[1::2]
        gap = smoothed.evaluate(held_out) - field[1::2]
        assert np.sqrt(np.mean(gap ** 2)) < 0.5

    def test_budget_exhausted(self, line_geom, cos_samples):
        sites = tuple(int(s) for s in line_geom.block(1))
        derivs = _exact_derivs(COS, line_geom, cos_samples.states)
        rows = np.stack([derivs[k].row(line_geom.n_sites)[0] for k in sites], axis=1)
        with pytest.raises(SmoothingBudgetError):
            smooth_factor(factor_field(rows), cos_samples.states, sites, N=4, geom=line_geom, max_cutoff=0)


@pytest.mark.lab_test
class TestTruncation:
    @pytest.fixture
    def free_ladder(self, line_geom, cos_samples):
        derivs = _exact_derivs(TrigPoly.zero(1), line_geom, cos_samples.states)
        return build_factor_ladder(derivs, cos_samples, line_geom, n_max=2, max_cutoff=2)

    def test_constant_factor_ladder(self, free_ladder):
        assert set(free_ladder) == {1, 2}
        assert all(f.cutoff == 0 for f in free_ladder.values())
        assert free_ladder[1].dependency() == ()

    def test_small_eps_saturates(self, free_ladder):
        # criterion is 4 sqrt(eps) for the free factor sqrt(2) I
        result = select_truncation(0.01, _mixing(), free_ladder)
        assert result.N == 2 and result.saturated
        assert result.criteria[1] == pytest.approx(0.4, rel=1e-6)
        assert result.to_dict()["criteria"]["2"] == pytest.approx(0.4, rel=1e-6)

    def test_large_eps_is_infeasible(self, free_ladder):
        with pytest.raises(TruncationInfeasibleError) as err:
            select_truncation(0.25, _mixing(), free_ladder)
        assert err.value.violating_constant == pytest.approx(2.0, rel=1e-6)

    @pytest.mark.parametrize("eps", [0.0, 1.5])
    def test_eps_range(self, free_ladder, eps):
        with pytest.raises(ConfigurationError):
            select_truncation(eps, _mixing(), free_ladder)

    def test_missing_mixing_fit(self, free_ladder):
        with pytest.raises(ConfigurationError):
            select_truncation(0.1, _mixing(alpha=float("nan")), free_ladder)

    def test_time_integral_bound_holds(self):
        for eps in (1.0, 0.5, 0.1):
            lhs, rhs = time_integral_bound(eps, 1.0, K=1.0, c=1.0, alpha=2.0)
            assert 0.0 < lhs <= rhs
        assert k_prime(1.0, 2.0, 2.0) == 1.0
        with pytest.raises(ConfigurationError):
            time_integral_bound(0.5, 1.0, 1.0, 1.0, 1.0)
