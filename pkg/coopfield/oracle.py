"""
Brute-force ground truth over all 2^N strategy profiles.

Energies come from the per-player payoff path of core_model, never from the
cooperator-count shortcut, so agreement with analytic.exact_thermo checks
the reduction itself. States are enumerated in fixed blocks and reduced with
numpy's pairwise summation, which keeps results bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from coopfield.analytic import ThermoResult
from coopfield.core_model import Configuration, RiskMode, build_energy_model, configuration_energies
from coopfield.errors import CapacityError, ParameterError

MAX_PLAYERS = 20

BLOCK = 1 << 16

GROUND_STATE_BETA = 50.0


@dataclass(frozen=True)
class GroundState:
    configuration: Configuration
    energy: float
    degenerate: bool


@dataclass(frozen=True)
class _Enumeration:
    indices: np.ndarray
    counts: np.ndarray
    energies: np.ndarray
    n_players: int


def _bits(indices, n):
    return (indices[:, None] >> np.arange(n)) & 1


def _enumerate(p, beta, mode):
    n = p.n_players
    if n > MAX_PLAYERS:
        raise CapacityError(f"enumeration is limited to N <= {MAX_PLAYERS} (got {n})")
    rho = build_energy_model(p, beta, mode).mean_density_used

    total = 1 << n
    indices = np.arange(total, dtype=np.int64)
    counts = np.empty(total, dtype=np.int64)
    energies = np.empty(total)
    for start in range(0, total, BLOCK):
        block = indices[start:start + BLOCK]
        bits = _bits(block, n)
        counts[start:start + BLOCK] = bits.sum(axis=1)
        energies[start:start + BLOCK] = configuration_energies(bits, p, rho)
    return _Enumeration(indices, counts, energies, n)


def _check_beta(beta):
    if not np.isfinite(beta) or beta < 0:
        raise ParameterError(f"beta must be finite and non-negative (got {beta})")


def _weights(states, beta):
    log_weights = -beta * states.energies
    log_z = float(logsumexp(log_weights))
    return log_z, np.exp(log_weights - log_z)


def enumerate_thermo(p, beta, mode=None):
    """ln Z, <n>, density variance and <H> by summing every configuration."""
    _check_beta(beta)
    states = _enumerate(p, beta, mode or RiskMode.mean_field())
    log_z, weights = _weights(states, beta)

    density = states.counts / states.n_players
    mean_density = float(np.sum(weights * density))
    variance = float(np.sum(weights * (density - mean_density) ** 2))
    mean_energy = float(np.sum(weights * states.energies))
    return ThermoResult(log_z, min(max(mean_density, 0.0), 1.0), variance, mean_energy)


def enumerate_pair_correlation(p, beta, mode=None, j=0, k=1):
    """Connected correlation <n_j n_k> - <n_j><n_k> under the exact measure."""
    _check_beta(beta)
    n = p.n_players
    for name, index in (('j', j), ('k', k)):
        if isinstance(index, bool) or int(index) != index or not 0 <= index < n:
            raise ParameterError(f"{name} must lie in [0, {n - 1}] (got {index!r})")
    if j == k:
        raise ParameterError(f"pair correlation needs two distinct players (got j = k = {j})")

    states = _enumerate(p, beta, mode or RiskMode.mean_field())
    _, weights = _weights(states, beta)
    n_j = (states.indices >> int(j)) & 1
    n_k = (states.indices >> int(k)) & 1
    joint = float(np.sum(weights * (n_j & n_k)))
    return joint - float(np.sum(weights * n_j)) * float(np.sum(weights * n_k))


def nash_ground_state(p, mode=None, beta=GROUND_STATE_BETA):
    """
    Minimum-energy configuration.

    Couplings are evaluated at rationality beta so that every risk mode is
    defined. Ties keep the configuration with the fewest cooperators (the
    lowest state index among those), i.e. all-defect at Delta = mu, and set
    the degenerate flag.
    """
    states = _enumerate(p, beta, mode or RiskMode.mean_field())
    lowest = float(states.energies.min())
    tolerance = 1e-12 * max(1.0, abs(lowest))
    minimizers = np.nonzero(states.energies <= lowest + tolerance)[0]

    # lexsort: last key is primary
    order = np.lexsort((states.indices[minimizers], states.counts[minimizers]))
    best = int(states.indices[minimizers[order[0]]])
    bits = tuple(int(b) for b in _bits(np.array([best]), states.n_players)[0])
    return GroundState(Configuration(bits), float(states.energies[best]), minimizers.size > 1)
