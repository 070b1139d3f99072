"""
Metropolis sampling of strategy configurations.

One proposal flips a uniformly chosen player. Because the energy is a
function of the cooperator count, the change of energy is read from two
precomputed tables indexed by the current count, so each step is O(1).
Error bars use the integrated autocorrelation time of the recorded
density trace.

Streams are seeded with numpy's PCG64; replica seeds are split off the base
seed with the SplitMix64 mixer (see derive_seed).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import numpy as np
from numpy.random import PCG64, Generator

from coopfield import settings
from coopfield.core_model import Configuration
from coopfield.errors import (
    ChainConfigError,
    DegenerateTraceWarning,
    NumericalValidityError,
    ParameterError,
)

MASK64 = (1 << 64) - 1

MIN_SAMPLES = 100

# proposals drawn per batch from the generator
CHUNK = 1 << 16

# Replica means further apart than this belong to different clusters.
CLUSTER_GAP = 0.25
BIMODAL_SEPARATION = 0.5

_DEBUG_STREAM = MASK64


class InitialState(str, Enum):
    ALL_DEFECT = 'all-defect'
    ALL_COOPERATE = 'all-cooperate'
    RANDOM = 'random'
    MIXED = 'mixed'


def _is_int(value):
    return not isinstance(value, bool) and isinstance(value, (int, np.integer))


@dataclass(frozen=True)
class ChainConfig:
    """
    Settings of one Metropolis chain.

    steps counts single-flip proposals including burn-in. burn_in defaults to
    10% of steps and thinning to one sample per N proposals (one sweep).
    MIXED behaves like RANDOM for a single chain; ensembles alternate
    all-defect and all-cooperate replicas.
    """

    steps: int = 10_000_000
    burn_in: int | None = None
    thinning: int | None = None
    seed: int = field(default_factory=settings.default_seed)
    initial_state: InitialState = InitialState.ALL_DEFECT
    record_trace: bool = False
    debug_check_fraction: float = 0.0

    def __post_init__(self):
        if not _is_int(self.steps) or self.steps < 1:
            raise ChainConfigError(f"steps must be a positive integer (got {self.steps!r})")
        if self.burn_in is None:
            object.__setattr__(self, 'burn_in', self.steps // 10)
        if not _is_int(self.burn_in) or self.burn_in < 0:
            raise ChainConfigError(f"burn_in must be a non-negative integer (got {self.burn_in!r})")
        if self.burn_in >= self.steps:
            raise ChainConfigError(
                f"burn_in must be smaller than steps (burn_in={self.burn_in}, steps={self.steps})")
        if self.thinning is not None and (not _is_int(self.thinning) or self.thinning < 1):
            raise ChainConfigError(f"thinning must be at least 1 (got {self.thinning!r})")
        if not _is_int(self.seed) or not 0 <= self.seed <= MASK64:
            raise ChainConfigError(f"seed must be an unsigned 64-bit integer (got {self.seed!r})")
        try:
            object.__setattr__(self, 'initial_state', InitialState(self.initial_state))
        except ValueError:
            raise ChainConfigError(f"unknown initial state {self.initial_state!r}") from None
        if not 0.0 <= self.debug_check_fraction <= 1.0:
            raise ChainConfigError(
                f"debug_check_fraction must lie in [0,1] (got {self.debug_check_fraction})")

    def thinning_for(self, n_players):
        return self.thinning if self.thinning is not None else n_players

    def n_samples(self, n_players):
        return (self.steps - self.burn_in) // self.thinning_for(n_players)


@dataclass(frozen=True)
class ChainResult:
    """Summary of one chain, or of a pooled replica ensemble."""

    mean_density: float
    density_variance: float
    tau_int: float
    stderr: float
    n_effective: float
    acceptance_rate: float
    n_samples: int
    trace: tuple | None = None
    final_state: Configuration | None = None
    degenerate_trace: bool = False
    bimodal: bool = False
    replicas: int = 1
    replica_means: tuple = ()


class TauEstimate(NamedTuple):
    tau: float
    window: int
    degenerate: bool


def derive_seed(seed, stream):
    """
    SplitMix64 stream splitting: seed_i = mix(seed + (i + 1) * golden gamma).

    Distinct streams of one base seed yield well separated PCG64 states.
    """
    z = (int(seed) + (int(stream) + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def make_rng(seed):
    return Generator(PCG64(seed))


def integrated_autocorrelation(trace):
    """
    Integrated autocorrelation time of a scalar trace, in samples.

    tau(W) = 1/2 + sum_{t=1}^{W} rho(t) with rho from an FFT autocovariance;
    W is the smallest window with W >= 6 tau(W). A constant trace has no
    defined correlation and reports tau = 1/2 with the degenerate flag set.
    """
    x = np.asarray(trace, dtype=float)
    n = x.size
    if x.ndim != 1 or n < MIN_SAMPLES:
        raise ParameterError(f"trace must be one-dimensional with at least {MIN_SAMPLES} samples (got {n})")
    if np.all(x == x[0]):
        return TauEstimate(0.5, 0, True)

    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(x, size)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), size)[:n] / n
    rho = acov / acov[0]

    taus = 0.5 + np.cumsum(rho[1:])
    windows = np.arange(1, n)
    inside = np.nonzero(windows >= 6.0 * taus)[0]
    index = int(inside[0]) if inside.size else n - 2
    return TauEstimate(max(float(taus[index]), 0.5), int(windows[index]), False)


def _initial_strategies(n, state, rng):
    if state is InitialState.ALL_DEFECT:
        return [0] * n
    if state is InitialState.ALL_COOPERATE:
        return [1] * n
    return rng.integers(0, 2, size=n).tolist()


def _acceptance_tables(model, beta):
    energies = model.energies()
    up = np.exp(np.minimum(0.0, -beta * (energies[1:] - energies[:-1])))
    down = np.exp(np.minimum(0.0, -beta * (energies[:-1] - energies[1:])))
    # up[m]: m -> m+1, down[m]: m -> m-1 (index 0 never used)
    return up.tolist() + [0.0], [0.0] + down.tolist()


def _check_flip(model, strategies, previous_count, delta):
    count = sum(strategies)
    full = model.energy(count) - model.energy(previous_count)
    if abs(full - delta) > 1e-10 * max(1.0, abs(full)):
        raise NumericalValidityError(
            f"incremental energy change {delta!r} disagrees with recomputation {full!r}")


def metropolis_run(model, beta, cfg, initial=None):
    """
    Run one single-flip Metropolis chain at rationality beta.

    initial, when given, is a warm-start configuration that overrides
    cfg.initial_state. Identical inputs give identical results.
    """
    if not math.isfinite(beta) or beta < 0:
        raise ParameterError(f"beta must be finite and non-negative (got {beta})")
    n = model.n_players
    thinning = cfg.thinning_for(n)
    if cfg.n_samples(n) < MIN_SAMPLES:
        raise ChainConfigError(
            f"chain records {cfg.n_samples(n)} samples; at least {MIN_SAMPLES} are needed "
            f"(steps={cfg.steps}, burn_in={cfg.burn_in}, thinning={thinning})")

    rng = make_rng(cfg.seed)
    if initial is not None:
        strategies = [int(s) for s in getattr(initial, 'strategies', initial)]
        if len(strategies) != n:
            raise ParameterError(f"initial configuration has {len(strategies)} players, model has {n}")
    else:
        strategies = _initial_strategies(n, cfg.initial_state, rng)
    count = sum(strategies)

    accept_up, accept_down = _acceptance_tables(model, beta)
    energies = model.energies().tolist()
    checker = make_rng(derive_seed(cfg.seed, _DEBUG_STREAM)) if cfg.debug_check_fraction > 0 else None

    trace = []
    accepted = 0
    step = 0
    burn_in = cfg.burn_in
    while step < cfg.steps:
        size = min(CHUNK, cfg.steps - step)
        players = rng.integers(0, n, size=size).tolist()
        draws = rng.random(size).tolist()
        for k, u in zip(players, draws):
            step += 1
            if strategies[k]:
                if u < accept_down[count]:
                    strategies[k] = 0
                    count -= 1
                    accepted += 1
                    if checker is not None and checker.random() < cfg.debug_check_fraction:
                        _check_flip(model, strategies, count + 1, energies[count] - energies[count + 1])
            elif u < accept_up[count]:
                strategies[k] = 1
                count += 1
                accepted += 1
                if checker is not None and checker.random() < cfg.debug_check_fraction:
                    _check_flip(model, strategies, count - 1, energies[count] - energies[count - 1])
            if step > burn_in and (step - burn_in) % thinning == 0:
                trace.append(count)

    densities = np.asarray(trace, dtype=float) / n
    n_samples = densities.size
    variance = float(densities.var())
    estimate = integrated_autocorrelation(densities)
    if estimate.degenerate:
        warnings.warn(
            f"density trace is constant at {densities[0]:.6g}; correlation time undefined",
            DegenerateTraceWarning, stacklevel=2)

    return ChainResult(
        mean_density=float(densities.mean()),
        density_variance=variance,
        tau_int=estimate.tau,
        stderr=math.sqrt(variance * 2.0 * estimate.tau / n_samples),
        n_effective=n_samples / (2.0 * estimate.tau),
        acceptance_rate=accepted / cfg.steps,
        n_samples=n_samples,
        trace=tuple(trace) if cfg.record_trace else None,
        final_state=Configuration(tuple(strategies)),
        degenerate_trace=estimate.degenerate,
    )


def _replica_configs(cfg, replicas):
    configs = []
    for i in range(replicas):
        state = cfg.initial_state
        if state is InitialState.MIXED:
            state = InitialState.ALL_DEFECT if i % 2 == 0 else InitialState.ALL_COOPERATE
        configs.append(replace(cfg, seed=derive_seed(cfg.seed, i), initial_state=state))
    return configs


def _is_bimodal(means):
    ordered = sorted(means)
    clusters = [[ordered[0]]]
    for value in ordered[1:]:
        if value - clusters[-1][-1] > CLUSTER_GAP:
            clusters.append([value])
        else:
            clusters[-1].append(value)
    if len(clusters) < 2:
        return False
    return float(np.mean(clusters[-1])) - float(np.mean(clusters[0])) > BIMODAL_SEPARATION


def ensemble_run(model, beta, cfg, replicas, workers=None):
    """
    Independent replicas with split seeds, pooled into one ChainResult.

    Replica i runs with seed derive_seed(cfg.seed, i). The pooled stderr is
    the between-replica standard deviation over sqrt(replicas); bimodal is
    set when replica means form clusters more than 0.5 apart.
    """
    if not _is_int(replicas) or replicas < 1:
        raise ChainConfigError(f"replicas must be a positive integer (got {replicas!r})")
    configs = _replica_configs(cfg, replicas)

    if replicas == 1:
        return metropolis_run(model, beta, configs[0])

    workers = min(replicas, workers or settings.max_workers())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(metropolis_run, [model] * replicas, [beta] * replicas, configs))
    else:
        results = [metropolis_run(model, beta, c) for c in configs]

    means = np.array([r.mean_density for r in results])
    return ChainResult(
        mean_density=float(means.mean()),
        density_variance=float(np.mean([r.density_variance for r in results])),
        tau_int=float(np.mean([r.tau_int for r in results])),
        stderr=float(means.std(ddof=1) / math.sqrt(replicas)),
        n_effective=float(sum(r.n_effective for r in results)),
        acceptance_rate=float(np.mean([r.acceptance_rate for r in results])),
        n_samples=sum(r.n_samples for r in results),
        degenerate_trace=all(r.degenerate_trace for r in results),
        bimodal=_is_bimodal(means.tolist()),
        replicas=replicas,
        replica_means=tuple(means.tolist()),
    )


def dump_trace(result, path):
    """Write the recorded cooperator counts, one per line."""
    if result.trace is None:
        raise ParameterError("chain was run without record_trace; nothing to dump")
    with open(path, 'w') as f:
        f.write('\n'.join(str(count) for count in result.trace))
        f.write('\n')
