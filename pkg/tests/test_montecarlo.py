import math

import numpy as np
import pytest

from coopfield.analytic import exact_thermo, pg_mean_density
from coopfield.core_model import GameParams, RiskMode, build_energy_model
from coopfield.errors import ChainConfigError, DegenerateTraceWarning, ParameterError
from coopfield.montecarlo import (
    ChainConfig,
    InitialState,
    derive_seed,
    dump_trace,
    ensemble_run,
    integrated_autocorrelation,
    metropolis_run,
)


def ar1(coefficient, size, seed):
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(size)
    x = np.empty(size)
    x[0] = noise[0]
    for t in range(1, size):
        x[t] = coefficient * x[t - 1] + noise[t]
    return x


class TestChainConfig:
    def test_defaults(self):
        cfg = ChainConfig(steps=1000, seed=1)
        assert cfg.burn_in == 100
        assert cfg.thinning_for(16) == 16
        assert cfg.n_samples(16) == 900 // 16

    def test_burn_in_must_leave_samples(self):
        with pytest.raises(ChainConfigError):
            ChainConfig(steps=100, burn_in=100, seed=1)

    def test_initial_state_from_tag(self):
        assert ChainConfig(steps=10, seed=1, initial_state='mixed').initial_state is InitialState.MIXED

    def test_unknown_initial_state(self):
        with pytest.raises(ChainConfigError):
            ChainConfig(steps=10, seed=1, initial_state='sideways')

    def test_seed_must_fit_64_bits(self):
        with pytest.raises(ChainConfigError):
            ChainConfig(steps=10, seed=1 << 64)

    def test_seed_from_environment(self, monkeypatch):
        monkeypatch.setenv('COOPFIELD_SEED', '77')
        assert ChainConfig(steps=10).seed == 77


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(2024, 3) == derive_seed(2024, 3)

    def test_streams_differ(self):
        seeds = {derive_seed(2024, i) for i in range(1000)}
        assert len(seeds) == 1000

    def test_fits_64_bits(self):
        assert 0 <= derive_seed((1 << 64) - 1, 5) < 1 << 64


class TestIntegratedAutocorrelation:
    def test_white_noise(self):
        x = np.random.default_rng(11).standard_normal(100_000)
        assert integrated_autocorrelation(x).tau == pytest.approx(0.5, rel=0.1)

    def test_duplicated_pairs(self):
        x = np.repeat(np.random.default_rng(12).standard_normal(50_000), 2)
        assert integrated_autocorrelation(x).tau == pytest.approx(1.0, rel=0.15)

    @pytest.mark.parametrize('phi', [0.5, 0.9])
    def test_ar1(self, phi):
        x = ar1(phi, 200_000, 13)
        expected = (1 + phi) / (2 * (1 - phi))
        assert integrated_autocorrelation(x).tau == pytest.approx(expected, rel=0.2)

    def test_window_covers_six_tau(self):
        estimate = integrated_autocorrelation(ar1(0.9, 200_000, 14))
        assert estimate.window >= 6 * estimate.tau

    def test_constant_trace_is_degenerate(self):
        estimate = integrated_autocorrelation(np.full(500, 0.25))
        assert estimate.tau == 0.5
        assert estimate.degenerate

    def test_short_trace(self):
        with pytest.raises(ParameterError):
            integrated_autocorrelation(np.arange(10.0))


class TestMetropolisRun:
    def test_infinite_temperature(self):
        model = build_energy_model(GameParams(16, 1.0, 0.6, 1.0), 0.0)
        result = metropolis_run(model, 0.0, ChainConfig(steps=400_000, seed=5))
        assert result.acceptance_rate == 1.0
        assert abs(result.mean_density - 0.5) < 4 * result.stderr

    def test_unpunished_matches_closed_form(self):
        p = GameParams(256, 1.0, 0.3)
        model = build_energy_model(p, 1.0, RiskMode.bare())
        result = metropolis_run(model, 1.0, ChainConfig(steps=2_000_000, seed=6))
        assert abs(result.mean_density - pg_mean_density(p, 1.0)) < 4 * result.stderr

    def test_punished_matches_degeneracy_sum(self):
        p = GameParams(64, 1.0, 0.5, 1.0)
        model = build_energy_model(p, 1.0)
        result = metropolis_run(model, 1.0, ChainConfig(steps=2_000_000, seed=7))
        expected = exact_thermo(model, 1.0).mean_density
        assert abs(result.mean_density - expected) < 4 * result.stderr

    def test_count_distribution_small_system(self):
        p = GameParams(8, 1.0, 0.5, 1.0)
        model = build_energy_model(p, 1.0)
        result = metropolis_run(model, 1.0, ChainConfig(steps=800_000, thinning=8, seed=8, record_trace=True))
        counts = np.bincount(result.trace, minlength=9) / len(result.trace)
        log_weights = np.array([math.log(math.comb(8, m)) for m in range(9)]) - 1.0 * model.energies()
        expected = np.exp(log_weights - np.logaddexp.reduce(log_weights))
        assert counts == pytest.approx(expected, abs=0.02)

    def test_reproducible(self):
        model = build_energy_model(GameParams(32, 1.0, 0.55, 0.5), 1.2)
        cfg = ChainConfig(steps=50_000, seed=9, record_trace=True)
        first, second = metropolis_run(model, 1.2, cfg), metropolis_run(model, 1.2, cfg)
        assert first == second

    def test_effective_samples_bounded_by_samples(self):
        model = build_energy_model(GameParams(32, 1.0, 0.55, 0.5), 1.2)
        result = metropolis_run(model, 1.2, ChainConfig(steps=200_000, seed=10))
        assert 0 < result.n_effective <= result.n_samples
        assert result.tau_int >= 0.5

    def test_warm_start(self):
        p = GameParams(16, 1.0, 0.1)
        model = build_energy_model(p, 50.0, RiskMode.bare())
        with pytest.warns(DegenerateTraceWarning):
            warm = metropolis_run(model, 50.0, ChainConfig(steps=20_000, seed=3)).final_state
        assert warm.cooperator_count == 16
        with pytest.warns(DegenerateTraceWarning):
            result = metropolis_run(model, 50.0, ChainConfig(steps=20_000, burn_in=0, seed=4), initial=warm)
        assert result.degenerate_trace
        assert result.mean_density == 1.0

    def test_debug_check(self):
        model = build_energy_model(GameParams(12, 1.0, 0.5, 1.0), 1.0)
        result = metropolis_run(model, 1.0, ChainConfig(steps=20_000, seed=2, debug_check_fraction=1.0))
        assert 0.0 <= result.mean_density <= 1.0

    def test_too_few_samples(self):
        model = build_energy_model(GameParams(64, 1.0, 0.5), 1.0)
        with pytest.raises(ChainConfigError):
            metropolis_run(model, 1.0, ChainConfig(steps=1000, seed=1))


class TestEnsembleRun:
    def test_single_replica_is_plain_chain(self):
        model = build_energy_model(GameParams(16, 1.0, 0.5, 1.0), 1.0)
        cfg = ChainConfig(steps=20_000, seed=21)
        single = ensemble_run(model, 1.0, cfg, replicas=1)
        plain = metropolis_run(model, 1.0, ChainConfig(steps=20_000, seed=derive_seed(21, 0)))
        assert single == plain

    def test_infinite_temperature(self):
        model = build_energy_model(GameParams(32, 1.0, 0.6, 1.0), 0.0)
        result = ensemble_run(model, 0.0, ChainConfig(steps=100_000, seed=22), replicas=8, workers=1)
        assert result.replicas == 8
        assert len(result.replica_means) == 8
        assert abs(result.mean_density - 0.5) < 4 * result.stderr
        assert not result.bimodal

    def test_stderr_is_spread_of_replica_means(self):
        model = build_energy_model(GameParams(32, 1.0, 0.6, 1.0), 0.5)
        result = ensemble_run(model, 0.5, ChainConfig(steps=50_000, seed=23), replicas=4, workers=1)
        assert result.stderr == pytest.approx(np.std(result.replica_means, ddof=1) / 2)

    def test_stderr_shrinks_with_replica_count(self):
        model = build_energy_model(GameParams(8, 1.0, 0.5, 1.0), 0.2)
        cfg = ChainConfig(steps=8_000, seed=25)
        small = ensemble_run(model, 0.2, cfg, replicas=64, workers=1)
        large = ensemble_run(model, 0.2, cfg, replicas=256, workers=1)
        assert small.stderr / large.stderr == pytest.approx(2.0, rel=0.25)

    def test_coexisting_phases_are_flagged(self):
        model = build_energy_model(GameParams(1024, 1.0, 0.665, 1.0), 3.0)
        cfg = ChainConfig(steps=200_000, burn_in=20_000, seed=24, initial_state=InitialState.MIXED)
        result = ensemble_run(model, 3.0, cfg, replicas=16, workers=1)
        assert result.bimodal

    def test_replicas_must_be_positive(self):
        model = build_energy_model(GameParams(8, 1.0, 0.5), 1.0)
        with pytest.raises(ChainConfigError):
            ensemble_run(model, 1.0, ChainConfig(steps=10_000, seed=1), replicas=0)


def test_dump_trace(tmp_path):
    model = build_energy_model(GameParams(8, 1.0, 0.5, 1.0), 1.0)
    result = metropolis_run(model, 1.0, ChainConfig(steps=8_000, seed=31, record_trace=True))
    path = tmp_path / 'trace.txt'
    dump_trace(result, path)
    lines = path.read_text().splitlines()
    assert [int(line) for line in lines] == list(result.trace)


def test_dump_trace_requires_recording(tmp_path):
    model = build_energy_model(GameParams(8, 1.0, 0.5, 1.0), 1.0)
    result = metropolis_run(model, 1.0, ChainConfig(steps=8_000, seed=31))
    with pytest.raises(ParameterError):
        dump_trace(result, tmp_path / 'trace.txt')
