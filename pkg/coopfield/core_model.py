"""
Public Goods game model: parameters, strategy configurations, payoffs,
cooperation risk and the reduced energy functions.

Players k = 0..N-1 either cooperate (n_k = 1) or defect (n_k = 0). The
risk-corrected Hamiltonian depends on a configuration only through the
cooperator count M, so everything downstream works with
E(M) = -alpha2 * M**2 - alpha1 * M.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from coopfield.errors import ParameterError, RiskModeError


@dataclass(frozen=True)
class GameParams:
    """Economic parameters of one game: N players, benefit b, cost c, punishment gamma."""

    n_players: int
    benefit: float
    cost: float
    punishment: float = 0.0

    def __post_init__(self):
        if isinstance(self.n_players, bool) or int(self.n_players) != self.n_players:
            raise ParameterError(f"n_players must be an integer (got {self.n_players!r})")
        object.__setattr__(self, 'n_players', int(self.n_players))
        for name in ('benefit', 'cost', 'punishment'):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite (got {value!r})")
            object.__setattr__(self, name, value)

        if self.n_players < 2:
            raise ParameterError(f"n_players must be at least 2 (got {self.n_players})")
        if self.benefit < 0:
            raise ParameterError(f"benefit must be non-negative (got {self.benefit})")
        if self.cost < 0:
            raise ParameterError(f"cost must be non-negative (got {self.cost})")
        if not 0.0 <= self.punishment <= 1.0:
            raise ParameterError(f"punishment must lie in [0,1] (got {self.punishment})")

    @property
    def net_profit(self):
        """Delta = b - c, the net profit when everybody cooperates."""
        return self.benefit - self.cost

    def with_cost(self, cost):
        return GameParams(self.n_players, self.benefit, cost, self.punishment)

    def with_punishment(self, punishment):
        return GameParams(self.n_players, self.benefit, self.cost, punishment)


@dataclass(frozen=True)
class Configuration:
    """Strategy profile |n_0 n_1 ... n_{N-1}>; cooperator_count is cached."""

    strategies: tuple
    cooperator_count: int = field(init=False)

    def __post_init__(self):
        strategies = tuple(int(s) for s in self.strategies)
        if any(s not in (0, 1) for s in strategies):
            raise ParameterError("strategies must be 0 (defect) or 1 (cooperate)")
        object.__setattr__(self, 'strategies', strategies)
        object.__setattr__(self, 'cooperator_count', sum(strategies))

    @classmethod
    def from_bits(cls, bits):
        """Build from a string such as '1010' (player 0 first)."""
        return cls(tuple(int(ch) for ch in bits))

    @classmethod
    def all_cooperate(cls, n_players):
        return cls((1,) * n_players)

    @classmethod
    def all_defect(cls, n_players):
        return cls((0,) * n_players)

    @property
    def n_players(self):
        return len(self.strategies)

    def flipped(self, k):
        strategies = list(self.strategies)
        strategies[k] = 1 - strategies[k]
        return Configuration(tuple(strategies))

    def __str__(self):
        return '|' + ''.join(str(s) for s in self.strategies) + '>'


class RiskKind(str, Enum):
    BARE = 'bare'
    MEAN_FIELD = 'mean-field'
    SELF_CONSISTENT = 'self-consistent'


@dataclass(frozen=True)
class RiskMode:
    """How the punished cooperation risk mu' obtains its mean density.

    BARE             no correction; only valid without punishment
    MEAN_FIELD       <n> replaced by the closed form n-bar
    SELF_CONSISTENT  <n> from a damped fixed point of the exact density
    """

    kind: RiskKind = RiskKind.MEAN_FIELD
    tolerance: float = 1e-10
    max_iter: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, 'kind', RiskKind(self.kind))
        if self.tolerance <= 0:
            raise ParameterError(f"tolerance must be positive (got {self.tolerance})")
        if self.max_iter < 1:
            raise ParameterError(f"max_iter must be at least 1 (got {self.max_iter})")

    @classmethod
    def bare(cls):
        return cls(RiskKind.BARE)

    @classmethod
    def mean_field(cls):
        return cls(RiskKind.MEAN_FIELD)

    @classmethod
    def self_consistent(cls, tolerance=1e-10, max_iter=10_000):
        return cls(RiskKind.SELF_CONSISTENT, tolerance, max_iter)

    @classmethod
    def parse(cls, tag):
        try:
            return cls(RiskKind(tag))
        except ValueError:
            choices = ', '.join(k.value for k in RiskKind)
            raise ParameterError(f"risk mode must be one of {choices} (got {tag!r})") from None

    @property
    def tag(self):
        return self.kind.value


@dataclass(frozen=True)
class EnergyModel:
    """Reduced Hamiltonian E(m) = -alpha2 m^2 - alpha1 m over cooperator counts."""

    alpha1: float
    alpha2: float
    n_players: int
    source_params: GameParams
    risk_mode: RiskMode
    mean_density_used: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha1) and math.isfinite(self.alpha2)):
            raise ParameterError(f"couplings must be finite (alpha1={self.alpha1}, alpha2={self.alpha2})")
        if self.n_players != self.source_params.n_players:
            raise ParameterError("n_players must match source_params")

    def energy(self, m):
        return energy(self, m)

    def energies(self):
        """E(m) for m = 0..N as an array."""
        m = np.arange(self.n_players + 1, dtype=float)
        return -self.alpha2 * m * m - self.alpha1 * m


def _check_player(config, k, p):
    if config.n_players != p.n_players:
        raise ParameterError(
            f"configuration has {config.n_players} players, parameters expect {p.n_players}")
    if isinstance(k, bool) or int(k) != k or not 0 <= k < p.n_players:
        raise ParameterError(f"player index must lie in [0, {p.n_players - 1}] (got {k!r})")
    return int(k)


def _shared_return(config, k, p):
    # (b/N) M - c n_k
    return (p.benefit / p.n_players) * config.cooperator_count - p.cost * config.strategies[k]


def payoff_cooperator(config, k, p):
    """Earning of player k from the cooperative strategy (zero if k defects)."""
    k = _check_player(config, k, p)
    n_k = config.strategies[k]
    return n_k * _shared_return(config, k, p)


def payoff_defector(config, k, p):
    """Earning of player k from the defective strategy (zero if k cooperates)."""
    k = _check_player(config, k, p)
    n_k = config.strategies[k]
    return (1 - n_k) * _shared_return(config, k, p)


def payoff_defector_punished(config, k, p):
    """Defector earning reduced by the punishment factor (1 - gamma)."""
    return (1.0 - p.punishment) * payoff_defector(config, k, p)


def earnings(config, k, p):
    """Total payoff of player k: -c n_k + (b/N)(1 - gamma + gamma n_k) M."""
    k = _check_player(config, k, p)
    n_k = config.strategies[k]
    share = (p.benefit / p.n_players) * config.cooperator_count
    if p.punishment == 0.0:
        return share - p.cost * n_k
    return -p.cost * n_k + share * (1.0 - p.punishment + p.punishment * n_k)


def cooperation_risk(p):
    """mu = c - b/N: marginal loss of a player who switches to cooperation."""
    return p.cost - p.benefit / p.n_players


def _check_density(name, value):
    if not (0.0 <= value <= 1.0):
        raise ParameterError(f"{name} must lie in [0,1] (got {value})")


def cooperation_risk_punished(p, mean_density):
    """mu' = mu - gamma b <n> (N-1)/N; never exceeds mu."""
    _check_density('mean_density', mean_density)
    n = p.n_players
    return cooperation_risk(p) - p.punishment * p.benefit * mean_density * (n - 1) / n


def payoff_decrement_meanfield(gamma, b, mean_density):
    """Mean-field payoff loss due to punishment, -gamma b <n> (1 - <n>)."""
    _check_density('mean_density', mean_density)
    _check_density('gamma', gamma)
    return -gamma * b * mean_density * (1.0 - mean_density)


def closed_form_density(p, beta):
    """n-bar = 1 / (1 + exp(-beta (Delta - mu))), ignoring punishment."""
    gap = p.net_profit - cooperation_risk(p)
    if math.isinf(beta):
        if gap == 0:
            return 0.5
        return 1.0 if gap > 0 else 0.0
    return float(expit(beta * gap))


def couplings(p, rho):
    """(alpha1, alpha2) of the punished Hamiltonian for mean density rho."""
    n = p.n_players
    gamma_b = p.punishment * p.benefit
    alpha2 = gamma_b / n
    alpha1 = (p.net_profit - p.cost + p.benefit / n) - gamma_b * (1.0 - rho * (n - 1) / n)
    return alpha1, alpha2


def _check_beta(beta):
    if math.isnan(beta) or beta < 0:
        raise ParameterError(f"beta must be non-negative (got {beta})")


def build_energy_model(p, beta, mode=None):
    """Couplings for rationality beta under the requested risk closure."""
    mode = mode or RiskMode.mean_field()
    _check_beta(beta)

    if mode.kind is RiskKind.BARE:
        if p.punishment > 0:
            raise RiskModeError(
                f"bare risk mode requires punishment = 0 (got {p.punishment}); "
                "use mean-field or self-consistent")
        rho = 0.0
    elif mode.kind is RiskKind.MEAN_FIELD:
        rho = closed_form_density(p, beta)
    else:
        # fixed point of <n> under the exact degeneracy sum
        from coopfield.analytic import self_consistent_density
        rho = self_consistent_density(p, beta, mode.tolerance, mode.max_iter)

    alpha1, alpha2 = couplings(p, rho)
    return EnergyModel(alpha1, alpha2, p.n_players, p, mode, rho)


def naive_energy_model(p):
    """Uncorrected Hamiltonian -sum_k eps_k = -Delta M (no risk operator)."""
    if p.punishment != 0:
        raise RiskModeError("the uncorrected Hamiltonian is only defined without punishment")
    return EnergyModel(p.net_profit, 0.0, p.n_players, p, RiskMode.bare(), 0.0)


def energy(model, m):
    """E(m) = -alpha2 m^2 - alpha1 m."""
    if isinstance(m, bool) or int(m) != m or not 0 <= m <= model.n_players:
        raise ParameterError(f"cooperator count must lie in [0, {model.n_players}] (got {m!r})")
    return -model.alpha2 * m * m - model.alpha1 * m


def configuration_energy(config, p, rho):
    """Energy from per-player payoffs: -sum_k (eps_k - mu' n_k)."""
    risk = cooperation_risk_punished(p, rho)
    total = 0.0
    for k in range(p.n_players):
        eps_k = payoff_cooperator(config, k, p) + payoff_defector_punished(config, k, p)
        total += eps_k - risk * config.strategies[k]
    return -total


def configuration_energies(bits, p, rho):
    """Vectorised configuration_energy over rows of a 0/1 matrix (states x players)."""
    bits = np.asarray(bits, dtype=float)
    if bits.ndim != 2 or bits.shape[1] != p.n_players:
        raise ParameterError(f"bits must have shape (states, {p.n_players})")
    m = bits.sum(axis=1, keepdims=True)
    shared = (p.benefit / p.n_players) * m - p.cost * bits
    cooperative = bits * shared
    punished = (1.0 - p.punishment) * (1.0 - bits) * shared
    risk = cooperation_risk_punished(p, rho)
    return -np.sum(cooperative + punished - risk * bits, axis=1)
