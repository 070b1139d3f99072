#!/usr/bin/env python3
"""
coopfield command line

Runs density sweeps, crossing searches, transition gaps, variance curves and
decay fits for the Public Goods game, and reproduces the canned figure data.
Records go to standard output (or --output) as CSV or JSON; status lines
go to standard error.

Usage:
    python -m coopfield sweep --n 1024 --b 1 --c 0.75 --gamma 1 --solver exact --beta-grid 0:5:0.1
    python -m coopfield crossing --n 1024 --b 1 --c 0.75 --gamma 1
    python -m coopfield transition --c-low 0.664 --c-high 0.665 --gamma 1 --beta-grid 3:6:0.5
    python -m coopfield variance --c 0.665 --gamma 1 --beta-grid 1.5:3:0.01
    python -m coopfield fit --input sweep.csv --window 2.3:4.5
    python -m coopfield oracle-check
    python -m coopfield figure 2b --output fig2b.csv

Options can also come from a flat key=value file given with --config; keys
are the long option names with '-' replaced by '_'. The command line wins
over the file, and the file wins over built-in defaults.

Exit status: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import io
import math
import os
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from coopfield import settings
from coopfield.analytic import SeriesParams, crossing_beta
from coopfield.core_model import GameParams, RiskMode
from coopfield.errors import (
    CapacityError,
    ConfigError,
    ConvergenceError,
    CoopfieldError,
    FitError,
    NotFoundError,
    NumericalValidityError,
    ParameterError,
)
from coopfield.experiments import (
    DEFAULT_CROSSING_WINDOW,
    DEFAULT_FIT_WINDOW,
    SIGNIFICANT_DIGITS,
    Solver,
    beta_sweep,
    check_grid,
    decay_discrepancies,
    find_crossing,
    fit_decay,
    frame_to_json,
    oracle_suite,
    read_records,
    records_to_csv,
    records_to_json,
    sort_records,
    transition_curve,
    variance_curve,
)
from coopfield.montecarlo import ChainConfig, InitialState

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

EXIT_CODES = (
    (ParameterError, EXIT_USAGE),
    (NumericalValidityError, EXIT_NUMERICAL),
    (ConvergenceError, EXIT_NUMERICAL),
    (NotFoundError, EXIT_NUMERICAL),
    (CapacityError, EXIT_NUMERICAL),
    (OSError, EXIT_IO),
)

FLOAT_FORMAT = f'%.{SIGNIFICANT_DIGITS}g'

FIGURES = ('2a', '2b', '3a', '3b', '4')

FIGURE_PLAYERS = 1024
FIGURE_GRID = '0:5:0.05'
TRANSITION_GRID = '0:6:0.05'
DECAY_GRID = '2.3:4.5:0.01'
VARIANCE_GRID = '1.5:3:0.01'


def status(mark, message):
    print(f"{mark} {message}", file=sys.stderr)


def exit_code_for(error):
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    return EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# Value parsing
# ---------------------------------------------------------------------------

def parse_beta_grid(text):
    """'start:stop:step' (stop included) or 'b1,b2,...'."""
    text = str(text).strip()
    if ':' in text:
        parts = text.split(':')
        if len(parts) != 3:
            raise ValueError("expected start:stop:step")
        start, stop, step = (float(x) for x in parts)
        if step <= 0:
            raise ValueError("step must be positive")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        if count < 1:
            raise ValueError("stop lies below start")
        values = np.round(start + step * np.arange(count), 12).tolist()
    else:
        values = [float(x) for x in text.split(',') if x.strip()]
    return check_grid(values)


def parse_window(text):
    parts = str(text).split(':')
    if len(parts) != 2:
        raise ValueError("expected lo:hi")
    lo, hi = float(parts[0]), float(parts[1])
    if not lo < hi:
        raise ValueError("lo must be smaller than hi")
    return lo, hi


def parse_bool(text):
    value = str(text).strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError("expected true or false")


def parse_solvers(text):
    return tuple(Solver.parse(s.strip()) for s in str(text).split(',') if s.strip())


def _optional_int(text):
    return None if str(text).strip().lower() in ('', 'none', 'auto') else int(text)


def _format(text):
    value = str(text).strip().lower()
    if value not in ('csv', 'json'):
        raise ValueError("expected csv or json")
    return value


def _nonempty(text):
    return str(text) if str(text) else None


# key -> (converter, default, help)
OPTIONS = {
    'n': (int, FIGURE_PLAYERS, 'number of players N'),
    'b': (float, 1.0, 'benefit b'),
    'c': (float, None, 'cost c'),
    'gamma': (float, 0.0, 'punishment gamma in [0,1]'),
    'mode': (RiskMode.parse, 'mean-field', 'risk closure: bare, mean-field or self-consistent'),
    'solver': (parse_solvers, 'exact', 'solver(s), comma separated: exact, series, digamma, mc'),
    'beta_grid': (parse_beta_grid, FIGURE_GRID, 'beta grid as start:stop:step or a comma list'),
    'window': (parse_window, None, 'beta window lo:hi'),
    'c_low': (float, None, 'lower cost of the transition pair'),
    'c_high': (float, None, 'higher cost of the transition pair'),
    'steps': (int, 10_000_000, 'Metropolis proposals per chain'),
    'burn_in': (_optional_int, None, 'discarded proposals (default 10%% of steps)'),
    'thinning': (_optional_int, None, 'record every this many proposals (default N)'),
    'seed': (int, None, 'chain seed (default COOPFIELD_SEED or 2024)'),
    'initial_state': (InitialState, 'all-defect', 'all-defect, all-cooperate, random or mixed'),
    'truncation_k': (int, 64, 'series truncation index K'),
    'asymptotic_stirling': (parse_bool, False, 'use the asymptotic C_l form'),
    'points': (int, 50, 'random grid points for oracle-check'),
    'input': (_nonempty, None, 'CSV or JSON file written by sweep'),
    'format': (_format, 'csv', 'output format: csv or json'),
    'output': (_nonempty, None, 'output path (default standard output)'),
    'with_mc': (parse_bool, False, 'overlay Metropolis records on figure sweeps'),
}

FLAGS = ('asymptotic_stirling', 'with_mc')

GAME = ('n', 'b', 'c', 'gamma', 'mode')
CHAIN = ('steps', 'burn_in', 'thinning', 'seed', 'initial_state')
OUTPUT = ('format', 'output')

COMMANDS = {
    'sweep': GAME + ('solver', 'beta_grid', 'truncation_k', 'asymptotic_stirling') + CHAIN + OUTPUT,
    'crossing': GAME + ('solver', 'window'),
    'transition': ('n', 'b', 'gamma', 'mode', 'c_low', 'c_high', 'beta_grid') + OUTPUT,
    'variance': GAME + ('solver', 'beta_grid', 'truncation_k', 'asymptotic_stirling') + OUTPUT,
    'fit': ('input', 'window') + OUTPUT,
    'oracle-check': ('seed', 'points'),
    'figure': ('with_mc',) + CHAIN + OUTPUT,
}

ALIASES = {'run': 'sweep'}

REQUIRED = {
    'sweep': ('c',),
    'crossing': ('c',),
    'transition': ('c_low', 'c_high'),
    'variance': ('c',),
    'fit': ('input',),
}


@dataclass(frozen=True)
class RunPlan:
    """A validated command: resolved option values plus the game parameters."""

    command: str
    values: dict = field(default_factory=dict)
    params: GameParams | None = None
    figure: str | None = None

    def __getitem__(self, key):
        return self.values[key]


class _StoreOnce(argparse.Action):
    """Store a scalar option, rejecting a second occurrence."""

    def __call__(self, parser, namespace, values, option_string=None):
        previous = getattr(namespace, self.dest, None)
        if previous is not None:
            raise argparse.ArgumentError(
                self, f"duplicate key {self.dest}: given more than once ({previous} and {values})")
        setattr(namespace, self.dest, values)


def build_parser():
    parser = argparse.ArgumentParser(
        prog='coopfield',
        description='Statistical mechanics of the Public Goods game with punishment')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    helps = {
        'sweep': 'density versus beta for one or more solvers',
        'crossing': 'beta where punished and unpunished densities meet',
        'transition': 'density gap between two costs over a beta grid',
        'variance': 'density variance curve and its peak',
        'fit': 'decay-law fit on a previously written sweep',
        'oracle-check': 'cross-solver contract suite',
        'figure': 'canned parameter sets of the reference figures',
    }
    for name, keys in COMMANDS.items():
        aliases = [alias for alias, target in ALIASES.items() if target == name]
        sub = commands.add_parser(name, aliases=aliases, help=helps[name])
        if name == 'figure':
            sub.add_argument('figure', choices=FIGURES, help='figure to reproduce')
        sub.add_argument('--config', action=_StoreOnce, default=None,
                         help='key=value file with option defaults')
        for key in keys:
            option = '--' + key.replace('_', '-')
            help_text = OPTIONS[key][2]
            if key in FLAGS:
                sub.add_argument(option, dest=key, action='store_const', const='true',
                                 default=None, help=help_text)
            else:
                sub.add_argument(option, dest=key, action=_StoreOnce, default=None,
                                 help=help_text)
    return parser


def _read_config(path, allowed):
    if not os.path.isfile(path):
        raise ConfigError('config', 'file not found', path)
    raw = dotenv_values(path)
    values = {}
    for key, value in raw.items():
        name = key.strip().replace('-', '_').lower()
        if name not in allowed:
            raise ConfigError(name, 'unknown configuration key', value)
        if value is None:
            raise ConfigError(name, 'missing value')
        values[name] = value
    return values


def _convert(key, raw):
    converter = OPTIONS[key][0]
    try:
        return converter(raw)
    except ParameterError as e:
        raise ConfigError(key, str(e), raw) from None
    except (TypeError, ValueError) as e:
        raise ConfigError(key, str(e) or f"invalid value for {key}", raw) from None


_PARAM_KEYS = {'n_players': 'n', 'benefit': 'b', 'cost': 'c', 'punishment': 'gamma'}


def _game_params(n, b, c, gamma):
    try:
        return GameParams(n, b, c, gamma)
    except ParameterError as e:
        message = str(e)
        field_name = message.split(' ', 1)[0]
        key = _PARAM_KEYS.get(field_name, 'params')
        value = {'n': n, 'b': b, 'c': c, 'gamma': gamma}.get(key)
        raise ConfigError(key, message.split(' (got')[0], value) from None


def _chain_config(values):
    seed = values['seed'] if values['seed'] is not None else settings.default_seed()
    try:
        return ChainConfig(
            steps=values['steps'], burn_in=values['burn_in'], thinning=values['thinning'],
            seed=seed, initial_state=values['initial_state'])
    except ParameterError as e:
        raise ConfigError('chain', str(e)) from None


def parse_config(argv):
    """
    Merge defaults, an optional key=value file and the command line into a RunPlan.

    Every invariant is validated here, before any computation starts.
    """
    args = build_parser().parse_args(argv)
    command = ALIASES.get(args.command, args.command)
    allowed = COMMANDS[command]

    raw = {key: OPTIONS[key][1] for key in allowed}
    if args.config is not None:
        raw.update(_read_config(args.config, set(allowed)))
    explicit = {key: getattr(args, key) for key in allowed if getattr(args, key, None) is not None}
    raw.update(explicit)

    for key in REQUIRED.get(command, ()):
        if raw.get(key) is None:
            raise ConfigError(key, 'a value is required')

    values = {key: (None if value is None else _convert(key, value)) for key, value in raw.items()}

    params = None
    if command in ('sweep', 'crossing', 'variance'):
        params = _game_params(values['n'], values['b'], values['c'], values['gamma'])
    elif command == 'transition':
        if values['c_low'] > values['c_high']:
            raise ConfigError('c_low', 'must not exceed c_high', values['c_low'])
        params = _game_params(values['n'], values['b'], values['c_low'], values['gamma'])
        _game_params(values['n'], values['b'], values['c_high'], values['gamma'])

    if 'mode' in values and values['mode'].tag == 'bare' and params is not None and params.punishment > 0:
        raise ConfigError('mode', 'bare risk mode requires gamma = 0', 'bare')
    if 'truncation_k' in values and values['truncation_k'] < 1:
        raise ConfigError('truncation_k', 'must be at least 1', values['truncation_k'])
    if 'points' in values and values['points'] < 1:
        raise ConfigError('points', 'must be at least 1', values['points'])
    if 'steps' in values:
        values['chain'] = _chain_config(values)

    return RunPlan(command, values, params, getattr(args, 'figure', None))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _write(text, destination):
    if destination in (None, '-'):
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(destination, 'w', newline='') as f:
        f.write(text)


def emit_records(records, fmt='csv', destination=None):
    """Write sweep records as CSV or JSON; byte-stable for identical input."""
    if not records:
        raise ParameterError("no records to emit")
    text = records_to_json(records) if fmt == 'json' else records_to_csv(records)
    _write(text, destination)
    if destination not in (None, '-'):
        status('✓', f"Wrote {len(records)} records to {destination}")


def _emit_frame(frame, fmt, destination):
    if fmt == 'json':
        text = frame_to_json(frame)
    else:
        buffer = io.StringIO()
        frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
        text = buffer.getvalue()
    _write(text, destination)
    if destination not in (None, '-'):
        status('✓', f"Wrote {len(frame)} rows to {destination}")


def _series_params(plan):
    return SeriesParams(truncation_k=plan['truncation_k'],
                        use_asymptotic_stirling=plan['asymptotic_stirling'])


def _report_failures(records):
    failed = [r for r in records if r.error]
    for record in failed:
        status('⚠', f"{record.solver} failed at beta={record.beta:g}, c={record.c:g}: {record.error}")
    return failed


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_sweep(plan):
    records = beta_sweep(plan.params, plan['beta_grid'], plan['solver'], plan['chain'],
                         plan['mode'], _series_params(plan))
    _report_failures(records)
    emit_records(records, plan['format'], plan['output'])
    return EXIT_OK


def run_crossing(plan):
    p = plan.params
    solvers = plan['solver']
    window = plan['window'] or DEFAULT_CROSSING_WINDOW
    beta_hat = find_crossing(p, window, solvers[0], plan['mode'])
    closed = crossing_beta(p.benefit, p.cost)
    print(f"beta_hat,closed_form\n{beta_hat:.{SIGNIFICANT_DIGITS}g},{closed:.{SIGNIFICANT_DIGITS}g}")
    status('✓', f"Crossing at beta = {beta_hat:.4f} (ln2/(2c-b) = {closed:.4f})")
    return EXIT_OK


def _gap_frame(rows):
    return pd.DataFrame([vars(r) for r in rows],
                        columns=['beta', 'c_low', 'c_high', 'density_low', 'density_high', 'gap'])


def run_transition(plan):
    low = plan.params
    high = low.with_cost(plan['c_high'])
    rows = transition_curve(low, high, plan['beta_grid'], plan['mode'])
    _emit_frame(_gap_frame(rows), plan['format'], plan['output'])
    return EXIT_OK


def run_variance(plan):
    curve = variance_curve(plan.params, plan['beta_grid'], plan['solver'][0], plan['mode'],
                           _series_params(plan))
    frame = pd.DataFrame(curve.points, columns=['beta', 'density_variance'])
    _emit_frame(frame, plan['format'], plan['output'])
    status('✓', f"Variance peak at beta = {curve.peak_beta:.4f} (variance {curve.peak_variance:.6g})")
    return EXIT_OK


def _fit_frame(fits):
    return pd.DataFrame(
        [dict(solver=solver, mode=mode, beta0=f.beta0, omega1=f.omega1, omega2=f.omega2, const=f.const,
              residual_rms=f.residual_rms, window_lo=f.fit_window[0], window_hi=f.fit_window[1])
         for (solver, mode), f in fits],
        columns=['solver', 'mode', 'beta0', 'omega1', 'omega2', 'const', 'residual_rms', 'window_lo', 'window_hi'])


def _report_discrepancies(mode, fit):
    lines = decay_discrepancies(fit)
    for line in lines:
        status('⚠', f"[{mode}] {line}")
    if not lines:
        status('✓', f"[{mode}] omega1 = {fit.omega1:.4f}, omega2 = {fit.omega2:.4f} within reference ranges")
    return lines


def run_fit(plan):
    records = read_records(plan['input'])
    window = plan['window'] or DEFAULT_FIT_WINDOW
    fits = []
    last_error = FitError(f"{plan['input']}: no records to fit")
    for solver, mode in sorted({(r.solver, r.mode) for r in records}):
        subset = [r for r in records if r.solver == solver and r.mode == mode]
        try:
            fit = fit_decay(subset, window)
        except FitError as e:
            status('⚠', f"[{solver}/{mode}] decay fit skipped: {e}")
            last_error = e
            continue
        _report_discrepancies(f"{solver}/{mode}", fit)
        fits.append(((solver, mode), fit))
    if not fits:
        raise last_error
    _emit_frame(_fit_frame(fits), plan['format'], plan['output'])
    return EXIT_OK


def run_oracle_check(plan):
    seed = plan['seed'] if plan['seed'] is not None else settings.default_seed()
    checks = oracle_suite(seed, plan['points'])
    for check in checks:
        status('✓' if check.passed else '✗', f"{check.name}: {check.detail}")
    failed = [c for c in checks if not c.passed]
    if failed:
        status('✗', f"{len(failed)} of {len(checks)} checks failed")
        return EXIT_NUMERICAL
    status('✓', f"All {len(checks)} checks passed")
    return EXIT_OK


def _figure_solvers(plan):
    return (Solver.EXACT, Solver.MC) if plan['with_mc'] else (Solver.EXACT,)


def _figure_sweeps(plan, costs, gammas, grid, modes=(RiskMode.mean_field(),)):
    betas = parse_beta_grid(grid)
    records = []
    for mode in modes:
        for c in costs:
            for gamma in gammas:
                p = GameParams(FIGURE_PLAYERS, 1.0, c, gamma)
                status('✓', f"Sweeping c={c}, gamma={gamma}, mode={mode.tag}")
                records.extend(beta_sweep(p, betas, _figure_solvers(plan), plan['chain'], mode))
    _report_failures(records)
    return sort_records(records)


def figure_2a(plan):
    records = _figure_sweeps(plan, (0.4, 0.5), (0.0, 0.5, 1.0), FIGURE_GRID)
    emit_records(records, plan['format'], plan['output'])
    return EXIT_OK


def figure_2b(plan):
    records = _figure_sweeps(plan, (0.75,), (0.0, 1.0), FIGURE_GRID)
    emit_records(records, plan['format'], plan['output'])
    beta_hat = find_crossing(GameParams(FIGURE_PLAYERS, 1.0, 0.75, 1.0))
    status('✓', f"Crossing at beta = {beta_hat:.4f} (ln2/(2c-b) = {crossing_beta(1.0, 0.75):.4f})")
    return EXIT_OK


def figure_3a(plan):
    low = GameParams(FIGURE_PLAYERS, 1.0, 0.664, 1.0)
    rows = transition_curve(low, low.with_cost(0.665), parse_beta_grid(TRANSITION_GRID))
    _emit_frame(_gap_frame(rows), plan['format'], plan['output'])
    status('✓', f"Gap at beta = {rows[-1].beta:g}: {rows[-1].gap:.4f}")
    return EXIT_OK


def figure_3b(plan):
    modes = (RiskMode.mean_field(), RiskMode.self_consistent())
    records = _figure_sweeps(plan, (0.665,), (1.0,), DECAY_GRID, modes)
    emit_records(records, plan['format'], plan['output'])

    discrepancies = 0
    for mode in modes:
        subset = [r for r in records if r.mode == mode.tag and r.solver == Solver.EXACT.value]
        try:
            fit = fit_decay(subset, DEFAULT_FIT_WINDOW)
        except FitError as e:
            status('⚠', f"[{mode.tag}] decay fit failed: {e}")
            discrepancies += 1
            continue
        discrepancies += bool(_report_discrepancies(mode.tag, fit))
    if discrepancies == len(modes):
        status('⚠', "Discrepancy report: fitted exponents differ from the reference ranges "
                    "under every risk closure; see DESIGN.md for the analysis")
    return EXIT_OK


def figure_4(plan):
    curve = variance_curve(GameParams(FIGURE_PLAYERS, 1.0, 0.665, 1.0), parse_beta_grid(VARIANCE_GRID))
    frame = pd.DataFrame(curve.points, columns=['beta', 'density_variance'])
    _emit_frame(frame, plan['format'], plan['output'])
    status('✓', f"Variance peak at beta = {curve.peak_beta:.4f}")
    return EXIT_OK


FIGURE_RUNNERS = {'2a': figure_2a, '2b': figure_2b, '3a': figure_3a, '3b': figure_3b, '4': figure_4}


def run_figure(plan):
    return FIGURE_RUNNERS[plan.figure](plan)


RUNNERS = {
    'sweep': run_sweep,
    'crossing': run_crossing,
    'transition': run_transition,
    'variance': run_variance,
    'fit': run_fit,
    'oracle-check': run_oracle_check,
    'figure': run_figure,
}


def _report_warnings(caught):
    seen = set()
    for w in caught:
        message = f"{w.category.__name__}: {w.message}"
        if message not in seen:
            seen.add(message)
            status('⚠', message)


def main(argv=None):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always')
        try:
            plan = parse_config(argv)
            code = RUNNERS[plan.command](plan)
        except SystemExit as e:
            # argparse usage errors and --help
            code = e.code if isinstance(e.code, int) else EXIT_USAGE
        except (CoopfieldError, OSError) as e:
            status('✗', f"Error: {e}")
            code = exit_code_for(e)
    _report_warnings(caught)
    return code


if __name__ == '__main__':
    sys.exit(main())
