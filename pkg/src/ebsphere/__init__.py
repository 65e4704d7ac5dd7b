"""Einstein-Bogomol'nyi metrics on P^1 and on the plane: PDE and ODE solvers with geometric diagnostics."""

from .errors import *  # noqa: F401,F403
from .model import (INF, Divisor, ModelParams, Mode, StabilityClass, admissible_lower_bound,
                    classify_divisor, cone_angles, lambda_critical, lambda_of_b)

__version__ = "0.1.0"
