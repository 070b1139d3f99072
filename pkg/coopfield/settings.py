"""
Environment configuration.

Values come from the process environment or a local .env file:

    COOPFIELD_THREADS=4      # cap on worker processes for sweeps and replica ensembles
    COOPFIELD_SEED=2024      # default Monte Carlo seed
"""

import os

from dotenv import load_dotenv

from coopfield.errors import ParameterError

# Load environment variables
load_dotenv()

DEFAULT_SEED = 2024


def _positive_int(name, raw):
    try:
        value = int(raw)
    except ValueError:
        raise ParameterError(f"{name} must be a positive integer (got {raw!r})") from None
    if value < 1:
        raise ParameterError(f"{name} must be a positive integer (got {raw!r})")
    return value


def max_workers():
    """Worker cap from COOPFIELD_THREADS, defaulting to the machine's parallelism."""
    raw = os.getenv('COOPFIELD_THREADS', '').strip()
    if not raw:
        return os.cpu_count() or 1
    return _positive_int('COOPFIELD_THREADS', raw)


def default_seed():
    """Chain seed used when neither the command line nor a config file gives one."""
    raw = os.getenv('COOPFIELD_SEED', '').strip()
    if not raw:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ParameterError(f"COOPFIELD_SEED must be an integer (got {raw!r})") from None
