"""Learning shared function classes for growth curves with GP-GOMEA and RV-GOMEA."""

from .constraints import DEFAULT_CONSTRAINTS, NO_CONSTRAINTS, ConstraintSet
from .dataset import GlobalDataSet, LocalDataSet, load_global
from .estimator import FunctionClassCurve, FunctionClassRegressor
from .evolver import RunConfig, run
from .expr import ExpressionTree, evaluate, parse
from .rvopt import RVGomea, RVProblem, fit_constants

__version__ = "0.1.0"

__all__ = [
    "ConstraintSet", "DEFAULT_CONSTRAINTS", "NO_CONSTRAINTS", "GlobalDataSet", "LocalDataSet",
    "load_global", "FunctionClassCurve", "FunctionClassRegressor", "RunConfig", "run",
    "ExpressionTree", "evaluate", "parse", "RVGomea", "RVProblem", "fit_constants",
]
