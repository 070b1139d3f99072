"""
Exact and series thermodynamics of the reduced Hamiltonian.

Because E depends only on the cooperator count m, the partition function is
the degeneracy sum Z = sum_m C(N, m) exp(-beta E(m)), which is evaluated in
log space for any N. The Stirling-number expansion Z = Z0(x) [1 + G(x, y)]
with x = beta alpha1 and y = beta alpha2 is provided alongside it, together
with the digamma stationarity condition, the density bound and the crossing
temperature.
"""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import bisect
from scipy.special import expit, gammaln, logsumexp

from coopfield.core_model import (
    EnergyModel,
    RiskMode,
    build_energy_model,
    closed_form_density,
    couplings,
)
from coopfield.errors import (
    CapacityError,
    ConvergenceError,
    DomainError,
    NumericalValidityError,
    ParameterError,
    RiskModeError,
    SeriesTruncationWarning,
    UndefinedBoundError,
)

STIRLING_CAP = 512

# Relative size below which the last kept series term counts as negligible.
SERIES_TERM_TOLERANCE = 1e-12

DENSITY_SLACK = 1e-9

ROOT_GRID_POINTS = 1024


@dataclass(frozen=True)
class SeriesParams:
    """Truncation and accumulation settings for the Stirling series."""

    truncation_k: int = 64
    use_asymptotic_stirling: bool = False
    log_domain: bool = True

    def __post_init__(self):
        if self.truncation_k < 1:
            raise ParameterError(f"truncation_k must be at least 1 (got {self.truncation_k})")


@dataclass(frozen=True)
class ThermoResult:
    """Equilibrium observables; density moments refer to n = M/N."""

    log_partition: float
    mean_density: float
    density_variance: float
    mean_energy: float

    def __post_init__(self):
        if not 0.0 <= self.mean_density <= 1.0:
            raise NumericalValidityError(f"mean density left [0,1]: {self.mean_density}")
        if self.density_variance < 0.0:
            raise NumericalValidityError(f"negative density variance: {self.density_variance}")


class StirlingNumber(NamedTuple):
    value: int
    log: float


class SeriesTerm(NamedTuple):
    """One C_l coefficient: its value, its natural log and the ratio-test verdict."""

    value: float
    log_value: float
    converged: bool


def _check_beta(beta):
    if not math.isfinite(beta) or beta < 0:
        raise ParameterError(f"beta must be finite and non-negative (got {beta})")


def _log_binomials(n):
    m = np.arange(n + 1, dtype=float)
    return gammaln(n + 1) - gammaln(m + 1) - gammaln(n - m + 1)


def _log_falling_factorials(n, ell):
    # ln N!/(N-l)!
    return gammaln(n + 1) - gammaln(n - ell + 1)


def pg_mean_density(p, beta):
    """Closed-form cooperator density of the unpunished game."""
    if p.punishment != 0:
        raise RiskModeError(
            f"closed-form density requires punishment = 0 (got {p.punishment})")
    if math.isnan(beta) or beta < 0:
        raise ParameterError(f"beta must be non-negative (got {beta})")
    return closed_form_density(p, beta)


def exact_thermo(model, beta):
    """Degeneracy-sum thermodynamics over m = 0..N.

    Weights C(N, m) exp(-beta E(m)) are accumulated with log-gamma binomials
    and normalised with log-sum-exp, so N in the tens of thousands is fine.
    """
    _check_beta(beta)
    if not (math.isfinite(model.alpha1) and math.isfinite(model.alpha2)):
        raise ParameterError("couplings must be finite")

    n = model.n_players
    m = np.arange(n + 1, dtype=float)
    energies = model.energies()
    log_weights = _log_binomials(n) - beta * energies

    log_z = float(logsumexp(log_weights))
    if not math.isfinite(log_z):
        raise NumericalValidityError(f"log partition function is not finite: {log_z}")

    weights = np.exp(log_weights - log_z)
    mean_m = float(np.dot(weights, m))
    var_m = float(np.dot(weights, (m - mean_m) ** 2))
    mean_energy = float(np.dot(weights, energies))

    mean_density = min(max(mean_m / n, 0.0), 1.0)
    return ThermoResult(log_z, mean_density, var_m / (n * n), mean_energy)


def free_energy_landscape(model, beta):
    """phi(m) = ln C(N, m) - beta E(m); its maxima are the stable phases."""
    _check_beta(beta)
    return _log_binomials(model.n_players) - beta * model.energies()


class StirlingTable:
    """
    Exact Stirling numbers of the second kind, grown row by row on demand.

    Rows are kept as Python integers so values stay exact; their logarithms
    are cached next to them for log-domain consumers. One table is shared by
    the whole process and extension is guarded by a lock.
    """

    def __init__(self, cap=STIRLING_CAP):
        self.cap = cap
        self._rows = [[1]]
        self._log_rows = [np.array([0.0])]
        self._lock = threading.Lock()

    def _extend(self, n):
        if n > self.cap:
            raise CapacityError(f"Stirling row {n} exceeds the table cap {self.cap}")
        with self._lock:
            while len(self._rows) <= n:
                prev = self._rows[-1]
                size = len(prev)
                # S(n+1, k) = k S(n, k) + S(n, k-1)
                row = [0] * (size + 1)
                for k in range(1, size + 1):
                    left = prev[k] * k if k < size else 0
                    row[k] = left + prev[k - 1]
                self._rows.append(row)
                self._log_rows.append(
                    np.array([math.log(v) if v > 0 else -np.inf for v in row]))

    def value(self, n, k):
        self._extend(n)
        row = self._rows[n]
        return row[k] if k < len(row) else 0

    def log_row(self, n):
        """ln S(n, k) for k = 0..n; -inf marks zeros."""
        self._extend(n)
        return self._log_rows[n]


_STIRLING = StirlingTable()


def stirling2(n, k):
    """S(n, k) exactly, with its natural log (-inf when S is zero)."""
    for name, value in (('n', n), ('k', k)):
        if isinstance(value, bool) or int(value) != value or value < 0:
            raise ParameterError(f"{name} must be a non-negative integer (got {value!r})")
    n, k = int(n), int(k)
    value = _STIRLING.value(n, k)
    return StirlingNumber(value, math.log(value) if value > 0 else -math.inf)


def _log_expm1(z):
    z = np.asarray(z, dtype=float)
    with np.errstate(divide='ignore'):
        small = np.log(np.expm1(np.minimum(z, 30.0)))
    # ln(e^z - 1) = z + ln(1 - e^-z)
    large = z + np.log1p(-np.exp(-np.maximum(z, 30.0)))
    return np.where(z > 30.0, large, small)


def _log_c_coefficients(y, ells, sp):
    """ln C_l and per-l convergence flags for an array of l >= 1."""
    ells = np.asarray(ells, dtype=int)
    if y == 0:
        return np.full(ells.shape, -np.inf), np.ones(ells.shape, dtype=bool)

    if sp.use_asymptotic_stirling:
        log_c = _log_expm1(y * ells.astype(float) ** 2) - gammaln(ells + 1.0)
        return log_c, np.ones(ells.shape, dtype=bool)

    kmax = sp.truncation_k
    ks = np.arange(1, kmax + 1)
    # terms[k-1, j] = ln(y^k / k!) + ln S(2k, l_j)
    log_prefactor = ks * math.log(y) - gammaln(ks + 1.0)
    terms = np.full((kmax, ells.size), -np.inf)
    for i, k in enumerate(ks):
        row = _STIRLING.log_row(2 * k)
        inside = ells <= 2 * k
        terms[i, inside] = log_prefactor[i] + row[ells[inside]]

    with np.errstate(divide='ignore', invalid='ignore'):
        log_c = logsumexp(terms, axis=0)
        last = terms[-1]
        previous = terms[-2] if kmax > 1 else np.full(ells.shape, -np.inf)
        negligible = (last - log_c) < math.log(SERIES_TERM_TOLERANCE)
    # l > 2K has no surviving term although the true coefficient is positive
    converged = (last < previous) & negligible & (ells <= 2 * kmax)
    return log_c, converged


def c_ell(y, ell, sp=None):
    """C_l(y) = sum_k y^k / k! S(2k, l), truncated at k = K or in asymptotic form."""
    sp = sp or SeriesParams()
    if not math.isfinite(y) or y < 0:
        raise ParameterError(f"y must be finite and non-negative (got {y})")
    if isinstance(ell, bool) or int(ell) != ell or ell < 1:
        raise ParameterError(f"ell must be a positive integer (got {ell!r})")

    log_c, converged = _log_c_coefficients(y, np.array([int(ell)]), sp)
    log_value = float(log_c[0])
    ok = bool(converged[0])
    if not ok:
        warnings.warn(
            f"C_{ell}(y={y:g}) still significant at truncation K={sp.truncation_k}",
            SeriesTruncationWarning, stacklevel=2)
    return SeriesTerm(math.exp(log_value), log_value, ok)


class _SeriesSums(NamedTuple):
    log_g: float
    log_first_moment: float
    converged: bool


def _log_xi(x):
    return -float(np.logaddexp(0.0, -x))


def _series_sums(x, y, n, sp):
    # G = sum_l N!/(N-l)! C_l xi^l and S1 = sum_l l N!/(N-l)! C_l xi^l
    ells = np.arange(1, n + 1)
    log_c, converged = _log_c_coefficients(y, ells, sp)
    log_terms = _log_falling_factorials(n, ells) + log_c + ells * _log_xi(x)
    ok = bool(np.all(converged))

    with np.errstate(divide='ignore', over='ignore'):
        if sp.log_domain:
            log_g = float(logsumexp(log_terms))
            log_s1 = float(logsumexp(log_terms + np.log(ells)))
        else:
            terms = np.exp(log_terms)
            log_g = float(np.log(np.sum(terms)))
            log_s1 = float(np.log(np.sum(ells * terms)))
    if math.isnan(log_g) or log_g == math.inf:
        raise NumericalValidityError(f"series sum G is not representable at x={x}, y={y}")
    return _SeriesSums(log_g, log_s1, ok)


def _warn_truncation(sums, sp, x, y):
    if not sums.converged:
        warnings.warn(
            f"series not converged at K={sp.truncation_k} (x={x:g}, y={y:g})",
            SeriesTruncationWarning, stacklevel=3)


def g_function(x, y, n_players, sp=None):
    """G(x, y) = sum_{l=1}^{N} N!/(N-l)! C_l(y) xi^l with xi = 1/(1+exp(-x))."""
    sp = sp or SeriesParams()
    if not math.isfinite(y) or y < 0:
        raise ParameterError(f"y must be finite and non-negative (got {y})")
    if math.isnan(x):
        raise ParameterError("x must not be NaN")
    sums = _series_sums(x, y, n_players, sp)
    _warn_truncation(sums, sp, x, y)
    return math.exp(sums.log_g)


def _series_arguments(model, beta):
    _check_beta(beta)
    return beta * model.alpha1, beta * model.alpha2


def _log_partition_xy(x, y, n, sp):
    sums = _series_sums(x, y, n, sp)
    return n * float(np.logaddexp(0.0, x)) + float(np.logaddexp(0.0, sums.log_g)), sums


def series_log_partition(model, beta, sp=None):
    """ln Z = N ln(1 + e^x) + ln(1 + G(x, y))."""
    sp = sp or SeriesParams()
    x, y = _series_arguments(model, beta)
    log_z, sums = _log_partition_xy(x, y, model.n_players, sp)
    _warn_truncation(sums, sp, x, y)
    return log_z


def density_series(model, beta, sp=None):
    """<n> = xi + (1/N) (1 - xi) S1 / (1 + G) from the truncated series."""
    sp = sp or SeriesParams()
    x, y = _series_arguments(model, beta)
    n = model.n_players
    sums = _series_sums(x, y, n, sp)
    _warn_truncation(sums, sp, x, y)

    xi = float(expit(x))
    log_one_minus_xi = -float(np.logaddexp(0.0, x))
    log_correction = log_one_minus_xi + sums.log_first_moment - float(np.logaddexp(0.0, sums.log_g))
    density = xi + math.exp(log_correction) / n

    if density < -DENSITY_SLACK or density > 1.0 + DENSITY_SLACK:
        raise NumericalValidityError(
            f"series density {density!r} outside [0,1]; truncation K={sp.truncation_k} too small")
    return min(max(density, 0.0), 1.0)


def density_variance_series(model, beta, sp=None, step=1e-4):
    """Density variance (1/N^2) d^2 ln Z / dx^2 by central differences on the series."""
    sp = sp or SeriesParams()
    x, y = _series_arguments(model, beta)
    n = model.n_players
    plus, _ = _log_partition_xy(x + step, y, n, sp)
    mid, sums = _log_partition_xy(x, y, n, sp)
    minus, _ = _log_partition_xy(x - step, y, n, sp)
    _warn_truncation(sums, sp, x, y)
    return max((plus - 2.0 * mid + minus) / (step * step) / (n * n), 0.0)


def density_upper_bound(x, y, n_players, sp=None):
    """(G + xi) / (1 + G), an upper bound on the series density when G > 0."""
    sp = sp or SeriesParams()
    if not math.isfinite(y) or y < 0:
        raise ParameterError(f"y must be finite and non-negative (got {y})")
    sums = _series_sums(x, y, n_players, sp)
    _warn_truncation(sums, sp, x, y)
    if sums.log_g == -math.inf:
        raise UndefinedBoundError(
            "density bound is undefined for G = 0; use the closed-form density at y = 0")
    log_numerator = float(np.logaddexp(sums.log_g, _log_xi(x)))
    return math.exp(log_numerator - float(np.logaddexp(0.0, sums.log_g)))


# B_2k / 2k for k = 1..6
_ASYMPTOTIC_COEFFICIENTS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
)
_ASYMPTOTIC_SHIFT = 10.0


def digamma(z):
    """
    Psi(z) = d ln Gamma(z) / dz for z > 0.

    The argument is shifted upward with Psi(z) = Psi(z + 1) - 1/z until it
    reaches 10, then the asymptotic expansion
    ln z - 1/(2z) - sum_{k=1}^{6} B_2k / (2k z^2k) is applied.
    Accepts scalars or numpy arrays.
    """
    scalar = np.ndim(z) == 0
    z = np.array(z, dtype=float, ndmin=1)
    if np.any(~(z > 0)):
        raise DomainError(f"digamma requires z > 0 (got {z[~(z > 0)][0]!r})")

    value = np.zeros_like(z)
    while True:
        low = z < _ASYMPTOTIC_SHIFT
        if not low.any():
            break
        value[low] -= 1.0 / z[low]
        z[low] += 1.0

    inv_sq = 1.0 / (z * z)
    series = np.zeros_like(z)
    for coefficient in reversed(_ASYMPTOTIC_COEFFICIENTS):
        series = (series + coefficient) * inv_sq
    value += np.log(z) - 0.5 / z - series
    return float(value[0]) if scalar else value


def _density_condition(model, beta):
    n = model.n_players

    def f(rho):
        m = n * np.asarray(rho, dtype=float)
        return (2.0 * beta * model.alpha2 * m + beta * model.alpha1
                - digamma(m + 1.0) + digamma(n - m + 1.0))

    return f


def solve_density_condition(p, beta, mode=None):
    """
    All stationary densities of the degeneracy sum in (0, 1).

    Roots of 2 beta alpha2 N rho + beta alpha1 = Psi(N rho + 1) - Psi(N - N rho + 1)
    are bracketed on a 1024-point grid and refined by bisection. Several
    roots mean coexisting phases; an empty list means a saturated phase.
    """
    if not math.isfinite(beta) or beta <= 0:
        raise ParameterError(f"beta must be positive (got {beta})")
    model = build_energy_model(p, beta, mode or RiskMode.mean_field())
    f = _density_condition(model, beta)

    grid = np.linspace(0.0, 1.0, ROOT_GRID_POINTS)
    values = f(grid)
    roots = [float(r) for r, v in zip(grid, values) if v == 0.0 and 0.0 < r < 1.0]
    for i in np.nonzero(np.sign(values[:-1]) * np.sign(values[1:]) < 0)[0]:
        root = bisect(lambda r: float(f(r)), grid[i], grid[i + 1], xtol=1e-15, maxiter=200)
        roots.append(float(root))

    roots.sort()
    unique = []
    for root in roots:
        if not unique or root - unique[-1] > 1e-12:
            unique.append(root)
    return unique


def dominant_root(model, beta, roots):
    """Density with the largest continuous phi(N rho); the better endpoint if roots is empty."""
    n = model.n_players
    candidates = list(roots) if roots else [0.0, 1.0]
    rho = np.asarray(candidates, dtype=float)
    m = n * rho
    phi = (gammaln(n + 1) - gammaln(m + 1) - gammaln(n - m + 1)
           + beta * (model.alpha2 * m * m + model.alpha1 * m))
    return float(rho[int(np.argmax(phi))])


def crossing_beta(b, c):
    """beta* = ln 2 / (2c - b), where punished and unpunished densities meet."""
    if 2.0 * c <= b:
        raise DomainError(f"no crossing for 2c <= b (b={b}, c={c})")
    return math.log(2.0) / (2.0 * c - b)


def _density_map(p, beta, mode):
    def step(rho):
        alpha1, alpha2 = couplings(p, rho)
        model = EnergyModel(alpha1, alpha2, p.n_players, p, mode, rho)
        return exact_thermo(model, beta).mean_density

    return step


def self_consistent_density(p, beta, tol=1e-10, max_iter=10_000):
    """
    Fixed point of rho -> <n>(couplings at rho), damped by one half.

    Starts from the closed-form density and returns rho with
    |rho - T(rho)| < tol, where T is one exact degeneracy-sum pass.
    """
    _check_beta(beta)
    step = _density_map(p, beta, RiskMode.self_consistent(tol, max_iter))

    rho = closed_form_density(p, beta)
    previous = rho
    for _ in range(max_iter):
        target = step(rho)
        if abs(target - rho) < tol:
            return rho
        previous, rho = rho, 0.5 * rho + 0.5 * target

    raise ConvergenceError(
        f"self-consistent density did not converge in {max_iter} iterations "
        f"(N={p.n_players}, b={p.benefit}, c={p.cost}, gamma={p.punishment}, beta={beta})",
        iterates=(previous, rho))
