"""Monte Carlo lab for BDG inequalities at random times."""

__version__ = "0.1.0"

from .errors import AlignmentError, BDGLabError, ConfigurationError, UnsupportedTimeError
from .paths import (Ensemble, GridSpec, IntegrandSpec, PathBundle, compensated_poisson,
                    extend_until_hit, generate_brownian, stochastic_integral)
from .random_times import CATALOG, RandomTimeSpec, parse_time, realize

__all__ = [
    "__version__",
    "AlignmentError", "BDGLabError", "ConfigurationError", "UnsupportedTimeError",
    "Ensemble", "GridSpec", "IntegrandSpec", "PathBundle",
    "compensated_poisson", "extend_until_hit", "generate_brownian", "stochastic_integral",
    "CATALOG", "RandomTimeSpec", "parse_time", "realize",
]
