import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from scipy import special

from coopfield import analytic
from coopfield.analytic import (
    SeriesParams,
    c_ell,
    crossing_beta,
    density_series,
    density_upper_bound,
    density_variance_series,
    digamma,
    dominant_root,
    exact_thermo,
    free_energy_landscape,
    g_function,
    pg_mean_density,
    self_consistent_density,
    series_log_partition,
    solve_density_condition,
    stirling2,
)
from coopfield.core_model import GameParams, RiskMode, build_energy_model, closed_form_density
from coopfield.errors import (
    CapacityError,
    ConvergenceError,
    DomainError,
    RiskModeError,
    SeriesTruncationWarning,
    UndefinedBoundError,
)


def thermo(p, beta, mode=None):
    return exact_thermo(build_energy_model(p, beta, mode), beta)


class TestPgMeanDensity:
    @pytest.mark.parametrize('b,c', [(1.0, 0.3), (2.0, 1.7), (0.5, 0.0)])
    def test_zero_beta(self, b, c):
        assert pg_mean_density(GameParams(16, b, c), 0.0) == 0.5

    def test_symmetric_point(self):
        p = GameParams(4, 1.0, 0.625)  # b (1 + 1/N) = 2c
        for beta in (0.1, 1.0, 10.0):
            assert pg_mean_density(p, beta) == pytest.approx(0.5)

    def test_two_players(self):
        assert pg_mean_density(GameParams(2, 1.0, 0.25), 1.0) == pytest.approx(0.731059, abs=1e-6)

    def test_requires_no_punishment(self):
        with pytest.raises(RiskModeError):
            pg_mean_density(GameParams(2, 1.0, 0.25, 0.1), 1.0)


class TestExactThermo:
    def test_infinite_temperature(self):
        result = thermo(GameParams(50, 1.0, 0.6, 1.0), 0.0)
        assert result.mean_density == pytest.approx(0.5)
        assert result.log_partition == pytest.approx(50 * math.log(2))

    @pytest.mark.parametrize('n', [2, 64, 1024])
    @pytest.mark.parametrize('beta', [0.1, 1.0, 5.0])
    def test_factorises_without_punishment(self, n, beta):
        p = GameParams(n, 1.0, 0.3)
        result = thermo(p, beta, RiskMode.bare())
        assert result.mean_density == pytest.approx(pg_mean_density(p, beta), abs=1e-12)

    def test_variance_of_independent_players(self):
        p = GameParams(128, 1.0, 0.55)
        beta = 2.0
        nbar = pg_mean_density(p, beta)
        result = thermo(p, beta, RiskMode.bare())
        assert result.density_variance == pytest.approx(nbar * (1 - nbar) / 128, rel=1e-9)

    def test_large_population_stays_finite(self):
        result = thermo(GameParams(20_000, 1.0, 0.66, 1.0), 4.0)
        assert math.isfinite(result.log_partition)
        assert 0.0 <= result.mean_density <= 1.0

    def test_mean_energy_matches_landscape(self):
        p = GameParams(10, 1.0, 0.5, 1.0)
        model = build_energy_model(p, 1.3)
        phi = free_energy_landscape(model, 1.3)
        weights = np.exp(phi - special.logsumexp(phi))
        assert exact_thermo(model, 1.3).mean_energy == pytest.approx(float(weights @ model.energies()))


class TestStirling:
    def test_diagonal(self):
        for n in (0, 1, 7, 40, 200):
            assert stirling2(n, n).value == 1

    def test_small_value(self):
        assert stirling2(4, 2).value == 7
        assert stirling2(4, 2).log == pytest.approx(math.log(7))

    def test_k_above_n(self):
        assert stirling2(2, 3).value == 0
        assert stirling2(2, 3).log == -math.inf

    def test_first_column(self):
        assert stirling2(0, 0).value == 1
        assert stirling2(5, 0).value == 0

    def test_two_blocks(self):
        # S(n, 2) = 2^(n-1) - 1
        assert stirling2(30, 2).value == 2 ** 29 - 1

    def test_cap(self):
        with pytest.raises(CapacityError):
            stirling2(analytic.STIRLING_CAP + 1, 2)


class TestCEll:
    @pytest.mark.parametrize('y', [0.01, 0.5, 2.0, 5.0])
    def test_first_coefficient_is_expm1(self, y):
        sp = SeriesParams(truncation_k=200)
        assert c_ell(y, 1, sp).value == pytest.approx(math.expm1(y), rel=1e-10)

    def test_vanishes_without_coupling(self):
        for ell in (1, 2, 9):
            assert c_ell(0.0, ell).value == 0

    def test_second_coefficient_against_long_sum(self):
        # exact rational sum; S(2k, 2) overflows a float long before k = 256
        y = Fraction(1, 100)
        reference = sum(y ** k / math.factorial(k) * stirling2(2 * k, 2).value for k in range(1, 257))
        assert c_ell(0.01, 2).value == pytest.approx(float(reference), rel=1e-12)

    def test_asymptotic_form(self):
        sp = SeriesParams(use_asymptotic_stirling=True)
        assert c_ell(0.3, 3, sp).value == pytest.approx(math.expm1(0.3 * 9) / 6)

    def test_truncation_warning(self):
        with pytest.warns(SeriesTruncationWarning):
            term = c_ell(10.0, 5, SeriesParams(truncation_k=3))
        assert not term.converged


class TestSeries:
    def test_no_coupling_gives_binomial_partition(self):
        assert g_function(0.7, 0.0, 8) == 0
        model = build_energy_model(GameParams(8, 1.0, 0.3), 0.8, RiskMode.bare())
        x = 0.8 * model.alpha1
        assert series_log_partition(model, 0.8) == pytest.approx(8 * math.log1p(math.exp(x)))

    def test_infinite_temperature(self):
        model = build_energy_model(GameParams(8, 1.0, 0.5, 1.0), 0.0)
        assert series_log_partition(model, 0.0) == pytest.approx(8 * math.log(2))

    def test_density_without_coupling(self):
        model = build_energy_model(GameParams(8, 1.0, 0.3), 0.8, RiskMode.bare())
        assert density_series(model, 0.8) == pytest.approx(special.expit(0.8 * model.alpha1))

    def test_g_vanishes_for_strong_defection(self):
        assert g_function(-200.0, 0.05, 8) == pytest.approx(0.0, abs=1e-80)

    def test_g_matches_partition_ratio(self):
        p = GameParams(8, 1.0, 0.5, 1.0)
        beta = 0.4
        model = build_energy_model(p, beta)
        x, y = beta * model.alpha1, beta * model.alpha2
        exact = thermo(p, beta).log_partition
        expected = math.expm1(exact - 8 * math.log1p(math.exp(x)))
        assert g_function(x, y, 8) == pytest.approx(expected, rel=1e-8)

    def test_log_partition_matches_degeneracy_sum(self):
        p = GameParams(8, 1.0, 0.5, 1.0)
        model = build_energy_model(p, 0.2)
        assert series_log_partition(model, 0.2) == pytest.approx(exact_thermo(model, 0.2).log_partition, rel=1e-6)

    def test_density_matches_degeneracy_sum(self):
        p = GameParams(8, 1.0, 0.5, 1.0)
        model = build_energy_model(p, 0.2)
        assert density_series(model, 0.2) == pytest.approx(exact_thermo(model, 0.2).mean_density, rel=1e-6)

    def test_error_shrinks_with_truncation(self):
        p = GameParams(8, 1.0, 0.5, 1.0)
        model = build_energy_model(p, 0.2)
        exact = exact_thermo(model, 0.2).log_partition
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', SeriesTruncationWarning)
            errors = [abs(series_log_partition(model, 0.2, SeriesParams(truncation_k=k)) - exact)
                      for k in (1, 2, 4)]
        assert errors[0] > errors[1] > errors[2]

    def test_direct_accumulation_agrees_with_log_domain(self):
        model = build_energy_model(GameParams(8, 1.0, 0.5, 1.0), 0.3)
        direct = density_series(model, 0.3, SeriesParams(log_domain=False))
        assert direct == pytest.approx(density_series(model, 0.3), rel=1e-12)

    def test_variance_matches_degeneracy_sum(self):
        model = build_energy_model(GameParams(8, 1.0, 0.5, 1.0), 0.3)
        expected = exact_thermo(model, 0.3).density_variance
        assert density_variance_series(model, 0.3) == pytest.approx(expected, rel=1e-4)


class TestDensityBound:
    def test_bounds_series_density(self):
        n, x, y = 8, 0.0, 0.05
        bound = density_upper_bound(x, y, n)
        p = GameParams(n, 1.0, 0.5, 1.0)
        model = build_energy_model(p, 1.0)
        model = type(model)(x, y, n, p, model.risk_mode, model.mean_density_used)
        assert bound >= density_series(model, 1.0)

    def test_closed_form(self):
        n, x, y = 8, 0.3, 0.05
        g = g_function(x, y, n)
        xi = special.expit(x)
        assert density_upper_bound(x, y, n) == pytest.approx((g + xi) / (1 + g))

    def test_strong_coupling_approaches_one(self):
        assert density_upper_bound(0.0, 1.0, 8, SeriesParams(truncation_k=200)) == pytest.approx(1.0, abs=1e-6)

    def test_undefined_without_coupling(self):
        with pytest.raises(UndefinedBoundError):
            density_upper_bound(0.3, 0.0, 8)


class TestDigamma:
    def test_euler_mascheroni(self):
        assert digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-12)

    def test_against_scipy(self):
        z = np.concatenate([np.linspace(0.05, 20, 400), np.logspace(1, 8, 50)])
        assert digamma(z) == pytest.approx(special.digamma(z), rel=1e-12, abs=1e-12)

    def test_recurrence(self):
        z = np.logspace(-1, 6, 100)
        assert digamma(z + 1.0) - digamma(z) == pytest.approx(1.0 / z, rel=1e-10, abs=1e-12)

    def test_scalar_in_scalar_out(self):
        assert isinstance(digamma(3), float)

    @pytest.mark.parametrize('z', [0.0, -1.5])
    def test_domain(self, z):
        with pytest.raises(DomainError):
            digamma(z)


class TestDensityCondition:
    def test_symmetric_point_has_single_root_at_half(self):
        roots = solve_density_condition(GameParams(64, 1.0, 0.5078125), 1.0, RiskMode.bare())
        assert roots == pytest.approx([0.5], abs=1e-9)

    def test_ordered_phase_near_transition(self):
        roots = solve_density_condition(GameParams(1024, 1.0, 0.664, 1.0), 4.0)
        assert roots == sorted(roots)
        assert max(roots) > 0.9

    def test_single_root_matches_landscape_maximum(self):
        p = GameParams(64, 1.0, 0.5, 1.0)
        roots = solve_density_condition(p, 1.0)
        assert len(roots) == 1
        model = build_energy_model(p, 1.0)
        m = int(np.argmax(free_energy_landscape(model, 1.0)))
        assert roots[0] == pytest.approx(m / 64, abs=1 / 64)

    def test_dominant_root_picks_landscape_maximum(self):
        p = GameParams(1024, 1.0, 0.664, 1.0)
        model = build_energy_model(p, 4.0)
        roots = solve_density_condition(p, 4.0)
        best = dominant_root(model, 4.0, roots)
        m = int(np.argmax(free_energy_landscape(model, 4.0)))
        assert best == pytest.approx(m / 1024, abs=2 / 1024)

    def test_dominant_root_without_roots_uses_endpoints(self):
        p = GameParams(16, 1.0, 0.1)
        model = build_energy_model(p, 3.0, RiskMode.bare())
        assert dominant_root(model, 3.0, []) == 1.0


class TestCrossingBeta:
    def test_reference_point(self):
        assert crossing_beta(1.0, 0.75) == pytest.approx(1.386, abs=1e-3)

    def test_cost_equal_to_benefit(self):
        assert crossing_beta(2.0, 2.0) == pytest.approx(math.log(2) / 2.0)

    def test_moderate_cost(self):
        assert crossing_beta(1.0, 0.6) == pytest.approx(3.4657, abs=1e-4)

    def test_no_crossing_when_punishment_always_helps(self):
        with pytest.raises(DomainError):
            crossing_beta(1.0, 0.45)


class TestSelfConsistentDensity:
    def test_no_feedback_without_punishment(self):
        p = GameParams(32, 1.0, 0.4)
        assert self_consistent_density(p, 1.5) == pytest.approx(closed_form_density(p, 1.5), abs=1e-12)

    def test_infinite_temperature(self):
        assert self_consistent_density(GameParams(32, 1.0, 0.6, 1.0), 0.0) == 0.5

    def test_residual_below_tolerance(self):
        p = GameParams(16, 1.0, 0.5, 1.0)
        rho = self_consistent_density(p, 1.0)
        model = build_energy_model(p, 1.0, RiskMode.self_consistent())
        assert model.mean_density_used == pytest.approx(rho)
        assert abs(exact_thermo(model, 1.0).mean_density - rho) < 1e-10

    def test_iteration_budget(self):
        with pytest.raises(ConvergenceError) as info:
            self_consistent_density(GameParams(16, 1.0, 0.5, 1.0), 1.0, tol=1e-14, max_iter=1)
        assert len(info.value.iterates) == 2
