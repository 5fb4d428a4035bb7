"""Collective states of a two-population sector economy.

Modules: specfun (verified special functions), scenario (model input),
fieldcore (self-consistent collective state), stability (local stability
and sensitivities), dynamics (macro-time oscillations), abm (agent-based
cross-check), cli (command line).
"""

__version__ = "0.1.0"

from .errors import (ConvergenceError, DomainError, NoSolutionError,
                     NonConvergenceError, ParseError, PoleError, RegimeError,
                     SectorFieldError, SingularError, ValidationError)
from .scenario import (ExpectationParams, ReturnLandscape, Scenario,
                       SectorGrid, StructuralParams, load_scenario,
                       save_scenario)
from .fieldcore import FieldSolution, solve_collective_state

__all__ = [
    "__version__",
    "ConvergenceError", "DomainError", "NoSolutionError", "NonConvergenceError",
    "ParseError", "PoleError", "RegimeError", "SectorFieldError",
    "SingularError", "ValidationError",
    "ExpectationParams", "ReturnLandscape", "Scenario", "SectorGrid",
    "StructuralParams", "load_scenario", "save_scenario",
    "FieldSolution", "solve_collective_state",
]
