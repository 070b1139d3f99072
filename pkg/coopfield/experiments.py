"""
Experiment drivers: density sweeps over beta, the punished/unpunished
crossing, the cost-driven transition gap, the variance curve, the decay-law
fit and the cross-solver contract suite.

Sweeps produce SweepRecord rows that serialise to a fixed CSV/JSON layout
(see records_to_csv and records_to_json); read_records parses them back.
"""

from __future__ import annotations

import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.optimize import bisect

from coopfield import analytic, oracle, settings
from coopfield.analytic import SeriesParams
from coopfield.core_model import GameParams, RiskMode, build_energy_model, closed_form_density
from coopfield.errors import (
    BoundaryWarning,
    CoopfieldError,
    DomainError,
    FitError,
    NotFoundError,
    ParameterError,
)
from coopfield.montecarlo import ChainConfig, metropolis_run

CSV_COLUMNS = (
    'beta', 'b', 'c', 'gamma', 'n', 'solver', 'mode',
    'mean_density', 'density_variance', 'stderr', 'tau_int',
)

SIGNIFICANT_DIGITS = 12

DEFAULT_CROSSING_WINDOW = (0.05, 10.0)
# both densities are 1/2 at beta = 0, so scans start above it
MIN_CROSSING_BETA = 1e-3
DEFAULT_FIT_WINDOW = (2.3, 4.5)
BETA0_GRID = (1.8, 2.6, 0.005)
MIN_FIT_POINTS = 10

# Reference exponents of the c = 0.665 decay
REFERENCE_OMEGA1 = (0.09, 0.19)
REFERENCE_OMEGA2 = (1.30, 1.50)


class Solver(str, Enum):
    MC = 'mc'
    EXACT = 'exact'
    SERIES = 'series'
    DIGAMMA = 'digamma'

    @classmethod
    def parse(cls, tag):
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).strip().lower())
        except ValueError:
            choices = ', '.join(s.value for s in cls)
            raise ParameterError(f"solver must be one of {choices} (got {tag!r})") from None


_SOLVER_ORDER = {solver: i for i, solver in enumerate(Solver)}


@dataclass(frozen=True)
class SweepRecord:
    """One grid point of one solver. stderr and tau_int are set for MC only."""

    beta: float
    b: float
    c: float
    gamma: float
    n: int
    solver: str
    mode: str
    mean_density: float
    density_variance: float | None
    stderr: float | None = None
    tau_int: float | None = None
    error: str | None = None


@dataclass(frozen=True)
class GapRecord:
    beta: float
    c_low: float
    c_high: float
    density_low: float
    density_high: float
    gap: float


@dataclass(frozen=True)
class FitResult:
    """ln<n> = -omega1 ln|beta - beta0| - omega2 beta + const over fit_window."""

    beta0: float
    omega1: float
    omega2: float
    const: float
    residual_rms: float
    fit_window: tuple


class VarianceCurve(NamedTuple):
    points: list
    peak_beta: float
    peak_variance: float


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def check_grid(betas):
    betas = [float(b) for b in betas]
    if not betas:
        raise ParameterError("beta grid must not be empty")
    if any(not math.isfinite(b) or b < 0 for b in betas):
        raise ParameterError("beta grid values must be finite and non-negative")
    if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
        raise ParameterError("beta grid must be strictly ascending")
    return betas


def _digamma_density(p, beta, mode):
    if beta == 0:
        return 0.5
    model = build_energy_model(p, beta, mode)
    roots = analytic.solve_density_condition(p, beta, mode)
    return analytic.dominant_root(model, beta, roots)


def evaluate_point(p, beta, solver, mode=None, cfg=None, sp=None, initial=None):
    """
    One solver at one (params, beta) point.

    Returns the record and, for MC, the final configuration so that the
    next grid point can warm-start from it.
    """
    mode = mode or RiskMode.mean_field()
    solver = Solver.parse(solver)
    row = dict(beta=beta, b=p.benefit, c=p.cost, gamma=p.punishment, n=p.n_players,
               solver=solver.value, mode=mode.tag)

    if solver is Solver.DIGAMMA:
        return SweepRecord(**row, mean_density=_digamma_density(p, beta, mode),
                           density_variance=None), None

    model = build_energy_model(p, beta, mode)
    if solver is Solver.EXACT:
        thermo = analytic.exact_thermo(model, beta)
        return SweepRecord(**row, mean_density=thermo.mean_density,
                           density_variance=thermo.density_variance), None
    if solver is Solver.SERIES:
        sp = sp or SeriesParams()
        return SweepRecord(**row, mean_density=analytic.density_series(model, beta, sp),
                           density_variance=analytic.density_variance_series(model, beta, sp)), None

    result = metropolis_run(model, beta, cfg or ChainConfig(), initial=initial)
    record = SweepRecord(**row, mean_density=result.mean_density,
                         density_variance=result.density_variance,
                         stderr=result.stderr, tau_int=result.tau_int)
    return record, result.final_state


def _failed(p, beta, solver, mode, error):
    return SweepRecord(beta, p.benefit, p.cost, p.punishment, p.n_players, solver.value,
                       mode.tag, math.nan, math.nan, error=f"{type(error).__name__}: {error}")


def sort_records(records):
    return sorted(records, key=lambda r: (r.n, r.b, r.c, r.gamma, r.mode,
                                          _SOLVER_ORDER[Solver(r.solver)], r.beta))


def _evaluate_captured(p, beta, solver, mode, sp):
    # runs in worker processes; warnings travel back with the record
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always')
        try:
            record, _ = evaluate_point(p, beta, solver, mode, sp=sp)
        except CoopfieldError as e:
            record = _failed(p, beta, solver, mode, e)
    return record, [(w.category, str(w.message)) for w in caught]


def _deterministic_sweep(p, betas, solver, mode, sp, workers):
    args = ([p] * len(betas), betas, [solver] * len(betas), [mode] * len(betas), [sp] * len(betas))
    if workers > 1 and len(betas) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(betas))) as pool:
            results = list(pool.map(_evaluate_captured, *args))
    else:
        results = [_evaluate_captured(*point) for point in zip(*args)]

    records = []
    for record, caught in results:
        for category, message in caught:
            warnings.warn(message, category, stacklevel=3)
        records.append(record)
    return records


def _annealed_sweep(p, betas, solver, mode, cfg, sp):
    records = []
    warm = None
    for beta in betas:
        try:
            record, final = evaluate_point(p, beta, solver, mode, cfg, sp, initial=warm)
        except CoopfieldError as e:
            records.append(_failed(p, beta, solver, mode, e))
            continue
        if final is not None:
            warm = final
        records.append(record)
    return records


def beta_sweep(p, betas, solvers=(Solver.EXACT,), cfg=None, mode=None, sp=None, workers=None):
    """
    Evaluate every requested solver at every beta.

    Exact, series and digamma points are independent and spread over up to
    `workers` processes (default settings.max_workers()). MC chains are
    annealed: each grid point starts from the previous point's final
    configuration. A failing point becomes a record with an error marker
    and the sweep carries on.
    """
    betas = check_grid(betas)
    solvers = sorted({Solver.parse(s) for s in solvers}, key=_SOLVER_ORDER.get)
    if not solvers:
        raise ParameterError("at least one solver is required")
    mode = mode or RiskMode.mean_field()
    workers = workers or settings.max_workers()

    records = []
    for solver in solvers:
        if solver is Solver.MC:
            records.extend(_annealed_sweep(p, betas, solver, mode, cfg, sp))
        else:
            records.extend(_deterministic_sweep(p, betas, solver, mode, sp, workers))
    return sort_records(records)


def _density(p, beta, solver, mode, sp=None):
    record, _ = evaluate_point(p, beta, solver, mode, sp=sp)
    return record.mean_density


def find_crossing(p, beta_window=DEFAULT_CROSSING_WINDOW, solver=Solver.EXACT, mode=None,
                  scan_points=200):
    """
    beta where the punished density meets the unpunished closed form.

    The window is scanned for the first sign change of <n>(gamma) - n-bar,
    which is then bisected to 1e-10. The trivial root at beta = 0 is never
    returned: the scan starts at MIN_CROSSING_BETA at the earliest.
    """
    if 2.0 * p.cost <= p.benefit:
        raise DomainError(
            f"a crossing requires 2c > b (b={p.benefit}, c={p.cost})")
    if p.punishment == 0:
        raise ParameterError("a crossing needs punishment > 0; without it the densities coincide")
    solver = Solver.parse(solver)
    if solver is Solver.MC:
        raise ParameterError("find_crossing needs a deterministic solver (exact, series or digamma)")
    lo, hi = (float(b) for b in beta_window)
    if not 0 <= lo < hi:
        raise ParameterError(f"beta window must satisfy 0 <= lo < hi (got {beta_window})")
    lo = max(lo, MIN_CROSSING_BETA)
    if lo >= hi:
        raise ParameterError(f"beta window must reach above {MIN_CROSSING_BETA} (got {beta_window})")
    mode = mode or RiskMode.mean_field()
    unpunished = p.with_punishment(0.0)

    def gap(beta):
        return _density(p, beta, solver, mode) - closed_form_density(unpunished, beta)

    grid = np.linspace(lo, hi, scan_points)
    values = [gap(beta) for beta in grid]
    for i in range(len(grid) - 1):
        if values[i] == 0.0:
            return float(grid[i])
        if values[i] * values[i + 1] < 0:
            return float(bisect(gap, grid[i], grid[i + 1], xtol=1e-10))
    if values[-1] == 0.0:
        return float(grid[-1])
    raise NotFoundError(f"densities do not cross for beta in [{lo}, {hi}]")


def _check_gap_params(p_low, p_high):
    same = (p_low.n_players == p_high.n_players and p_low.benefit == p_high.benefit
            and p_low.punishment == p_high.punishment)
    if not same:
        raise ParameterError("transition parameters may differ only in cost")
    if p_low.cost > p_high.cost:
        raise ParameterError(f"expected c_low <= c_high (got {p_low.cost} > {p_high.cost})")


def transition_gap(p_low, p_high, beta, mode=None):
    """Lambda_c(beta) = <n>(c_low) - <n>(c_high) from the degeneracy sum."""
    _check_gap_params(p_low, p_high)
    mode = mode or RiskMode.mean_field()
    return _density(p_low, beta, Solver.EXACT, mode) - _density(p_high, beta, Solver.EXACT, mode)


def transition_curve(p_low, p_high, betas, mode=None):
    _check_gap_params(p_low, p_high)
    mode = mode or RiskMode.mean_field()
    rows = []
    for beta in check_grid(betas):
        low = _density(p_low, beta, Solver.EXACT, mode)
        high = _density(p_high, beta, Solver.EXACT, mode)
        rows.append(GapRecord(beta, p_low.cost, p_high.cost, low, high, low - high))
    return rows


def variance_curve(p, betas, solver=Solver.EXACT, mode=None, sp=None):
    """
    Density variance per beta and the peak position.

    The peak is refined by a parabola through the largest sample and its
    two neighbours; a maximum on the grid edge is reported as is with a
    BoundaryWarning.
    """
    betas = check_grid(betas)
    solver = Solver.parse(solver)
    if solver not in (Solver.EXACT, Solver.SERIES):
        raise ParameterError(f"variance_curve supports exact and series solvers (got {solver.value})")
    mode = mode or RiskMode.mean_field()

    variances = []
    for beta in betas:
        record, _ = evaluate_point(p, beta, solver, mode, sp=sp)
        variances.append(record.density_variance)
    points = list(zip(betas, variances))

    i = int(np.argmax(variances))
    if i == 0 or i == len(betas) - 1:
        warnings.warn(f"variance peak at grid edge beta={betas[i]}", BoundaryWarning, stacklevel=2)
        return VarianceCurve(points, betas[i], variances[i])

    a, b, c = np.polyfit(betas[i - 1:i + 2], variances[i - 1:i + 2], 2)
    if a >= 0:
        return VarianceCurve(points, betas[i], variances[i])
    vertex = -b / (2.0 * a)
    return VarianceCurve(points, float(vertex), float(np.polyval((a, b, c), vertex)))


def _beta0_candidates(grid, upper):
    start, stop, step = grid
    count = int(round((stop - start) / step)) + 1
    values = np.round(start + step * np.arange(count), 10)
    return values[values < upper]


def fit_decay(records, window=DEFAULT_FIT_WINDOW, beta0_grid=BETA0_GRID):
    """
    Fit ln<n> = -omega1 ln|beta - beta0| - omega2 beta + const.

    beta0 is grid-searched below the window; for each candidate the
    remaining parameters follow from linear least squares. The candidate
    with the smallest RMS log residual wins.
    """
    lo, hi = (float(b) for b in window)
    if not lo < hi:
        raise ParameterError(f"fit window must satisfy lo < hi (got {window})")
    usable = [r for r in records
              if lo <= r.beta <= hi and r.error is None
              and r.mean_density is not None and math.isfinite(r.mean_density) and r.mean_density > 0]
    if len(usable) < MIN_FIT_POINTS:
        raise FitError(
            f"need at least {MIN_FIT_POINTS} records with positive density in [{lo}, {hi}] "
            f"(got {len(usable)})")

    beta = np.array([r.beta for r in usable])
    log_density = np.log([r.mean_density for r in usable])
    candidates = _beta0_candidates(beta0_grid, beta.min())
    if candidates.size == 0:
        raise FitError(f"no beta0 candidate lies below the fit window (lowest beta {beta.min()})")

    best = None
    for beta0 in candidates:
        design = np.column_stack((-np.log(np.abs(beta - beta0)), -beta, np.ones_like(beta)))
        coef, _, rank, _ = np.linalg.lstsq(design, log_density, rcond=None)
        if rank < 3:
            continue
        rms = float(np.sqrt(np.mean((design @ coef - log_density) ** 2)))
        if best is None or rms < best[0]:
            best = (rms, float(beta0), coef)
    if best is None:
        raise FitError("design matrix is singular for every beta0 candidate")

    rms, beta0, (omega1, omega2, const) = best
    if omega2 <= 0:
        raise FitError(f"fitted omega2 = {omega2:.6g} is not positive; the data do not decay")
    return FitResult(beta0, float(omega1), float(omega2), float(const), rms, (lo, hi))


def decay_discrepancies(fit, omega1_range=REFERENCE_OMEGA1, omega2_range=REFERENCE_OMEGA2):
    """Lines describing fitted exponents outside their reference ranges."""
    lines = []
    for name, value, (lo, hi) in (('omega1', fit.omega1, omega1_range),
                                  ('omega2', fit.omega2, omega2_range)):
        if not lo <= value <= hi:
            lines.append(
                f"{name} = {value:.4f} outside reference range [{lo}, {hi}] "
                f"(beta0 = {fit.beta0:.3f}, window {fit.fit_window[0]}-{fit.fit_window[1]}, "
                f"rms = {fit.residual_rms:.3g})")
    return lines


def _round(value):
    if isinstance(value, np.integer):
        return int(value)
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return None
    if isinstance(value, float):
        return float(f"{value:.{SIGNIFICANT_DIGITS}g}")
    return value


def records_frame(records):
    return pd.DataFrame([{col: getattr(r, col) for col in CSV_COLUMNS} for r in records],
                        columns=list(CSV_COLUMNS))


def records_to_csv(records):
    frame = records_frame(records)
    for col in ('beta', 'b', 'c', 'gamma', 'mean_density', 'density_variance', 'stderr', 'tau_int'):
        frame[col] = pd.to_numeric(frame[col], errors='coerce').astype(float)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=f'%.{SIGNIFICANT_DIGITS}g',
                 na_rep='', lineterminator='\n')
    return buffer.getvalue()


def frame_to_json(frame):
    """Array of flat objects, reals rounded to SIGNIFICANT_DIGITS, missing values as null."""
    rows = [{col: _round(value) for col, value in row.items()} for row in frame.to_dict(orient='records')]
    return json.dumps(rows, indent=2) + '\n'


def records_to_json(records):
    return frame_to_json(records_frame(records))


def _optional(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def read_records(path):
    """Parse a CSV or JSON file written by emit_records back into SweepRecords."""
    if os.path.splitext(str(path))[1].lower() == '.json':
        with open(path) as f:
            rows = json.load(f)
    else:
        frame = pd.read_csv(path, dtype={'solver': str, 'mode': str})
        missing = [col for col in CSV_COLUMNS if col not in frame.columns]
        if missing:
            raise ParameterError(f"{path}: missing columns {', '.join(missing)}")
        rows = frame.to_dict(orient='records')

    records = []
    for row in rows:
        density = row.get('mean_density')
        records.append(SweepRecord(
            beta=float(row['beta']), b=float(row['b']), c=float(row['c']),
            gamma=float(row['gamma']), n=int(row['n']),
            solver=str(row['solver']), mode=str(row['mode']),
            mean_density=math.nan if density is None else float(density),
            density_variance=_optional(row.get('density_variance')),
            stderr=_optional(row.get('stderr')),
            tau_int=_optional(row.get('tau_int')),
        ))
    return records


def _close(a, b, rel=1e-10, abs_tol=1e-12):
    return math.isclose(a, b, rel_tol=rel, abs_tol=abs_tol)


def _oracle_grid_check(rng, n_points):
    worst = 0.0
    failures = 0
    for _ in range(n_points):
        gamma = float(rng.choice([0.0, 0.5, 1.0]))
        p = GameParams(int(rng.integers(2, 13)), float(rng.uniform(0, 2)),
                       float(rng.uniform(0, 2)), gamma)
        beta = float(rng.uniform(0, 5))
        mode = RiskMode.bare() if gamma == 0 and rng.random() < 0.5 else RiskMode.mean_field()
        exact = analytic.exact_thermo(build_energy_model(p, beta, mode), beta)
        brute = oracle.enumerate_thermo(p, beta, mode)
        pairs = ((exact.log_partition, brute.log_partition),
                 (exact.mean_density, brute.mean_density),
                 (exact.density_variance, brute.density_variance))
        if not all(_close(a, b) for a, b in pairs):
            failures += 1
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    return CheckResult('oracle equals degeneracy sum', failures == 0,
                       f"{n_points} points, {failures} failures, max abs diff {worst:.2e}")


def _correlation_check(rng, draws):
    worst = 0.0
    for _ in range(draws):
        p = GameParams(int(rng.integers(3, 13)), float(rng.uniform(0, 2)), float(rng.uniform(0, 2)))
        beta = float(rng.uniform(0, 5))
        value = oracle.enumerate_pair_correlation(p, beta, RiskMode.mean_field(), 0, p.n_players - 1)
        worst = max(worst, abs(value))
    return CheckResult('no pair correlation without punishment', worst < 1e-12,
                       f"{draws} draws, max |corr| {worst:.2e}")


def _series_check():
    p = GameParams(8, 1.0, 0.5, 1.0)
    worst = 0.0
    bound_ok = True
    for beta in (0.1, 0.2, 0.3, 0.4, 0.5):
        model = build_energy_model(p, beta)
        exact = analytic.exact_thermo(model, beta)
        density = analytic.density_series(model, beta)
        worst = max(worst,
                    abs(analytic.series_log_partition(model, beta) - exact.log_partition) / abs(exact.log_partition),
                    abs(density - exact.mean_density) / exact.mean_density)
        bound = analytic.density_upper_bound(beta * model.alpha1, beta * model.alpha2, p.n_players)
        bound_ok = bound_ok and density <= bound + 1e-9
    return CheckResult('series matches degeneracy sum', worst < 1e-6 and bound_ok,
                       f"max rel diff {worst:.2e}, bound {'holds' if bound_ok else 'violated'}")


def _digamma_check():
    z = np.logspace(-1, 6, 200)
    worst = float(np.max(np.abs(analytic.digamma(z + 1.0) - analytic.digamma(z) - 1.0 / z)))
    return CheckResult('digamma recurrence', worst < 1e-12, f"max residual {worst:.2e}")


def _crossing_check():
    p = GameParams(1024, 1.0, 0.75, 1.0)
    beta = find_crossing(p)
    reference = analytic.crossing_beta(1.0, 0.75)
    return CheckResult('crossing temperature', abs(beta - reference) <= 0.05,
                       f"found {beta:.4f}, closed form {reference:.4f}")


def oracle_suite(seed=2024, n_points=50):
    """Cross-solver contract checks, each reported as pass/fail with a detail line."""
    rng = np.random.default_rng(seed)
    return [
        _oracle_grid_check(rng, n_points),
        _correlation_check(rng, 20),
        _series_check(),
        _digamma_check(),
        _crossing_check(),
    ]
