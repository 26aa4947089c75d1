"""scikit-learn style wrappers.

``FunctionClassRegressor`` learns function classes from grouped growth data
(one group per local data set) and predicts with per-group constants.
``FunctionClassCurve`` fits the constants of one known function class.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from .constraints import DEFAULT_CONSTRAINTS, NO_CONSTRAINTS
from .dataset import GlobalDataSet, LocalDataSet
from .evolver import RunConfig, run
from .expr import evaluate, parse
from .rvopt import RVProblem, fit_constants


def _ages(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"expected a single age column, got shape {X.shape}")
        X = X[:, 0]
    if X.ndim != 1:
        raise ValueError(f"expected 1-D ages, got shape {X.shape}")
    return X


class FunctionClassCurve(BaseEstimator, RegressorMixin):
    """Least-squares constants for one fixed expression.

    Parameters
    ----------
    expression : str
        Infix key such as ``"(exp((exp_prod(t, c0) * c1)) * c2)"``.
    rv_budget : int
        Evaluation budget of the real-valued optimizer.
    constrained : bool
        Apply the growth-curve constraints while fitting.
    random_state : int
    """

    def __init__(self, expression="c0", rv_budget=50_000, constrained=True, random_state=0):
        self.expression = expression
        self.rv_budget = rv_budget
        self.constrained = constrained
        self.random_state = random_state

    def fit(self, X, y):
        t = _ages(X)
        y = np.asarray(y, dtype=float)
        if len(t) != len(y):
            raise ValueError("X and y have different lengths")
        if len(t) < 1:
            raise ValueError("need at least one point")
        self.expr_ = parse(self.expression)
        constraints = DEFAULT_CONSTRAINTS if self.constrained else NO_CONSTRAINTS
        sol = fit_constants(RVProblem(self.expr_, t, y, constraints=constraints,
                                      budget=self.rv_budget), self.random_state)
        self.constants_ = np.asarray(sol.constants, dtype=float)
        self.mse_ = float(sol.fitness)
        self.violations_ = int(sol.violations)
        return self

    def predict(self, X):
        check_is_fitted(self, "constants_")
        return evaluate(self.expr_, self.constants_, _ages(X))


class FunctionClassRegressor(BaseEstimator, RegressorMixin):
    """Learn shared function classes from grouped data.

    ``fit(X, y, groups)`` treats each distinct group label as one local
    data set. After fitting, ``expressions_`` holds the trees of the
    archive entry with the lowest global MSE, ``tree_`` the index of the
    tree used for prediction and ``constants_`` maps each group to its
    fitted constants.
    """

    def __init__(self, population_size=1000, n_trees=2, height=4, n_rv=4, batch_size=16,
                 rv_budget=500_000, generations=None, hours=120.0, threads=1, random_state=0):
        self.population_size = population_size
        self.n_trees = n_trees
        self.height = height
        self.n_rv = n_rv
        self.batch_size = batch_size
        self.rv_budget = rv_budget
        self.generations = generations
        self.hours = hours
        self.threads = threads
        self.random_state = random_state

    def _config(self):
        return RunConfig(population_size=self.population_size, n_trees=self.n_trees,
                         height=self.height, n_rv=self.n_rv, batch_size=self.batch_size,
                         rv_budget=self.rv_budget, generations=self.generations,
                         hours=self.hours, threads=self.threads, seed=self.random_state)

    def fit(self, X, y, groups):
        t = _ages(X)
        y = np.asarray(y, dtype=float)
        groups = np.asarray(groups)
        if not len(t) == len(y) == len(groups):
            raise ValueError("X, y and groups have different lengths")
        sets = []
        for g in np.unique(groups):
            mask = groups == g
            order = np.argsort(t[mask], kind="stable")
            sets.append(LocalDataSet(str(g), t[mask][order], y[mask][order]))
        data = GlobalDataSet.from_sets(sets, self.n_rv)
        self.result_ = run(self._config(), data)
        feasible = self.result_.archive.feasible() or list(self.result_.archive)
        best = min(feasible, key=lambda e: (e.objectives.mse_global, e.objectives.dmse_global))
        self.expressions_ = list(best.keys)
        per_set = np.asarray(best.payload["per_set_mse"], dtype=float)
        self.tree_ = int(np.argmin(per_set.mean(axis=1)))
        ids = best.payload["set_ids"]
        consts = best.payload["per_set_constants"][self.tree_]
        self.constants_ = {i: np.asarray(c, dtype=float) for i, c in zip(ids, consts)}
        self.expr_ = parse(self.expressions_[self.tree_])
        return self

    def predict(self, X, groups):
        check_is_fitted(self, "constants_")
        t = _ages(X)
        groups = np.asarray(groups)
        if len(groups) != len(t):
            raise ValueError("X and groups have different lengths")
        out = np.empty(len(t))
        for g in np.unique(groups):
            key = str(g)
            if key not in self.constants_:
                raise ValueError(f"group {key!r} was not seen during fit")
            mask = groups == g
            out[mask] = evaluate(self.expr_, self.constants_[key], t[mask])
        return out

    def score(self, X, y, groups=None):
        return r2_score(y, self.predict(X, groups))
