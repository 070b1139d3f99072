"""
coopfield: the Public Goods game with punishment as a statistical-mechanics
system. Exact, series, digamma and Metropolis solvers for the cooperator
density, plus the experiment drivers built on them.
"""

from coopfield.core_model import Configuration, EnergyModel, GameParams, RiskMode, build_energy_model
from coopfield.errors import CoopfieldError

__all__ = [
    'Configuration',
    'CoopfieldError',
    'EnergyModel',
    'GameParams',
    'RiskMode',
    'build_energy_model',
]
