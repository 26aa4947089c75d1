"""Constraint-aware real-valued GOMEA for fitting CFC constants.

Fits the constant vector of one expression to one local training set. The
population is ordered by constrained-better comparison (fewer violations
first, then lower training MSE); a Gaussian per FOS element is estimated
from the best 35 % and sampled with adaptive variance scaling (AVS),
anticipated mean shift (AMS) and forced improvements (FI).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import DEFAULT_CONSTRAINTS, ConstraintSet
from .expr import CFC_HIGH, CFC_LOW, CompiledExpr, Expr, ExpressionTree, default_subtree_cache
from .linkage import FOS, gaussian_linkage_tree, univariate_fos

SELECTION_FRACTION = 0.35
AMS_FRACTION = 0.5
AMS_FACTOR = 2.0
AVS_DECREASE = 0.9
AVS_SDR_THRESHOLD = 1.0
AVS_MIN = 1e-6
AVS_MAX = 10.0
COV_REGULARIZATION = 1e-10
TERMINATION_WINDOW = 4
TERMINATION_RATE = 0.01
FITNESS_FLOOR = 1e-12
# smallest magnitude drawn by log-uniform initialisation
# constants are searched as u with c = SEARCH_SCALE * sinh(u): linear steps
# near zero, logarithmic steps for large magnitudes
SEARCH_SCALE = 0.1


def check_constraints(tree, constants, constraint_set=DEFAULT_CONSTRAINTS):
    """Number of growth constraints (0..3) violated by ``tree`` under ``constants``."""
    if isinstance(tree, ExpressionTree):
        tree = tree.to_expr()
    f = CompiledExpr(tree, constraint_set.grid)
    return int(constraint_set.violations(f(np.asarray(constants, dtype=float).reshape(1, -1)))[0])


def constrained_order(fitness, violations):
    """Indices sorted best first: fewer violations, then lower fitness."""
    return np.lexsort((fitness, violations))


def not_worse(f_new, v_new, f_old, v_old):
    """Elementwise: new is constrained-better than or equal to old."""
    return (v_new < v_old) | ((v_new == v_old) & (f_new <= f_old))


def strictly_better(f_new, v_new, f_old, v_old):
    return (v_new < v_old) | ((v_new == v_old) & (f_new < f_old))


def should_terminate(history, window=TERMINATION_WINDOW, rate=TERMINATION_RATE,
                     floor=FITNESS_FLOOR, violation_history=None):
    """True once the best fitness fell by less than ``rate`` over ``window`` generations.

    ``history`` holds the best fitness per generation, oldest first. A drop
    in the best violation count over the window counts as progress.
    """
    if history and history[-1] <= floor and (not violation_history or violation_history[-1] == 0):
        return True
    if len(history) <= window:
        return False
    if violation_history is not None and violation_history[-1] < violation_history[-1 - window]:
        return False
    old, new = history[-1 - window], history[-1]
    if old == 0.0:
        return True
    return (old - new) / abs(old) < rate


@dataclass
class RVProblem:
    """One constant fit: expression, training points, bounds, constraints, budget."""

    expr: Expr
    t: np.ndarray
    y: np.ndarray
    bounds: tuple = (CFC_LOW, CFC_HIGH)
    constraints: ConstraintSet | None = DEFAULT_CONSTRAINTS
    budget: int = 500_000
    data_id: object = None
    subtree_cache: object = None

    def __post_init__(self):
        if isinstance(self.expr, ExpressionTree):
            self.expr = self.expr.to_expr()
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.t.shape != self.y.shape:
            raise ValueError("t and y must have the same shape")

    @property
    def dim(self):
        return self.expr.n_constants


@dataclass
class RVSolution:
    constants: np.ndarray
    fitness: float
    violations: int
    evaluations_used: int
    generations: int = 0
    history: list = field(default_factory=list)


def to_search_space(c, scale=SEARCH_SCALE):
    return np.arcsinh(np.asarray(c, dtype=float) / scale)


def from_search_space(u, scale=SEARCH_SCALE):
    return scale * np.sinh(u)


class Evaluator:
    """Vectorised training MSE and constraint violations for a constant matrix.

    With ``scale`` set, rows are search-space points and are mapped through
    :func:`from_search_space` (clipped to the problem bounds) first.
    """

    def __init__(self, problem, scale=None):
        self.problem = problem
        self.scale = scale
        self.n_train = len(problem.t)
        grid = problem.constraints.grid if problem.constraints is not None else np.empty(0)
        data_id = None
        cache = problem.subtree_cache
        if problem.data_id is not None:
            data_id = (problem.data_id, "train+grid")
            cache = default_subtree_cache if cache is None else cache
        self.compiled = CompiledExpr(
            problem.expr, np.concatenate([problem.t, grid]), data_id=data_id, cache=cache
        )
        self.count = 0

    def constants(self, X):
        if self.scale is None:
            return X
        return np.clip(from_search_space(X, self.scale), *self.problem.bounds)

    def __call__(self, X):
        out = self.compiled(self.constants(X))
        self.count += X.shape[0]
        with np.errstate(all="ignore"):
            resid = out[:, :self.n_train] - self.problem.y
            mse = np.mean(resid * resid, axis=1)
        mse = np.where(np.isfinite(mse), mse, np.finfo(float).max)
        if self.problem.constraints is None:
            viol = np.zeros(X.shape[0], dtype=np.int64)
        else:
            viol = self.problem.constraints.violations(out[:, self.n_train:])
        return mse, viol


@dataclass
class GaussianModel:
    """Per-FOS-element normal distributions plus AVS/AMS state."""

    means: list
    covariances: list
    multipliers: np.ndarray
    previous_means: list | None = None
    stagnation: np.ndarray | None = None
    max_stagnation: int = 25

    def __post_init__(self):
        if self.stagnation is None:
            self.stagnation = np.zeros(len(self.means), dtype=int)

    def update_multiplier(self, j, improved, sdr=0.0):
        """Adaptive variance scaling for FOS element ``j``.

        The multiplier never drops below 1 until ``max_stagnation``
        consecutive generations passed without beating the elitist.
        """
        c = self.multipliers[j]
        if improved:
            self.stagnation[j] = 0
            c = max(c, 1.0)
            if sdr > AVS_SDR_THRESHOLD:
                c = min(c / AVS_DECREASE, AVS_MAX)
        else:
            if c <= 1.0:
                self.stagnation[j] += 1
            if c > 1.0 or self.stagnation[j] >= self.max_stagnation:
                c = max(c * AVS_DECREASE, AVS_MIN)
            if c < 1.0 and self.stagnation[j] < self.max_stagnation:
                c = 1.0
        self.multipliers[j] = c

    def shift(self, j):
        if self.previous_means is None:
            return np.zeros_like(self.means[j])
        return self.means[j] - self.previous_means[j]


def initial_constants(rng, n, dim, bounds):
    """Starting matrix drawn uniformly over the (search-space) box."""
    lo, hi = bounds
    return rng.uniform(lo, hi, size=(n, dim))


def _regularized_cholesky(cov):
    k = cov.shape[0]
    reg = 0.0
    while True:
        try:
            return np.linalg.cholesky(cov + reg * np.eye(k))
        except np.linalg.LinAlgError:
            reg = COV_REGULARIZATION if reg == 0.0 else reg * 10.0


def full_fos(dim):
    return FOS((tuple(range(dim)),), "full")


def mixed_fos(dim):
    """Univariate subsets plus the full set (the full set once if ``dim == 1``)."""
    subsets = tuple((i,) for i in range(dim))
    if dim > 1:
        subsets += (tuple(range(dim)),)
    return FOS(subsets, "mixed")


def selection_size(n, fraction=SELECTION_FRACTION):
    return max(1, int(math.floor(fraction * n)))


def estimate_model(population, fitness, violations, fos, selection_fraction=SELECTION_FRACTION,
                   previous=None, max_stagnation=25):
    """Maximum-likelihood Gaussians over the best ``selection_fraction`` of the population.

    "Best" is the constrained ordering, so every feasible solution precedes
    every infeasible one regardless of fitness.
    """
    X = np.asarray(population, dtype=float)
    order = constrained_order(np.asarray(fitness), np.asarray(violations))
    sel = X[order[:selection_size(len(X), selection_fraction)]]
    means, covs = [], []
    for subset in fos:
        idx = list(subset)
        xs = sel[:, idx]
        mu = xs.mean(axis=0)
        d = xs - mu
        cov = d.T @ d / len(xs)
        means.append(mu)
        covs.append(cov)
    if previous is not None:
        return GaussianModel(means, covs, previous.multipliers.copy(), previous.means,
                             previous.stagnation.copy(), previous.max_stagnation)
    return GaussianModel(means, covs, np.ones(len(fos)), None, None, max_stagnation)


def sample_and_improve(X, fitness, violations, model, fos, evaluate, rng, bounds,
                       budget_left=None, elitist=None):
    """One GOM pass over every FOS element for the whole population (in place).

    For each element, each individual gets a Gaussian proposal at those
    indices (AMS-shifted for half of them) and keeps it unless it is
    constrained-worse. Returns ``(improved mask, evaluations used)`` where
    ``improved`` marks individuals strictly better than at entry.
    """
    lo, hi = bounds
    n = X.shape[0]
    f0, v0 = fitness.copy(), violations.copy()
    used = 0
    if elitist is None:
        e = constrained_order(fitness, violations)[0]
        elitist = (fitness[e], violations[e])
    for j in rng.permutation(len(fos)):
        idx = list(fos[j])
        k = len(idx)
        m = n if budget_left is None else min(n, budget_left - used)
        if m <= 0:
            break
        mult = model.multipliers[j]
        L = _regularized_cholesky(mult * model.covariances[j])
        z = rng.standard_normal((m, k))
        prop = model.means[j] + z @ L.T
        ams = rng.random(m) < AMS_FRACTION
        prop[ams] += AMS_FACTOR * mult * model.shift(j)
        np.clip(prop, lo, hi, out=prop)
        cand = X[:m].copy()
        cand[:, idx] = prop
        fn, vn = evaluate(cand)
        used += m
        accept = not_worse(fn, vn, fitness[:m], violations[:m])
        X[:m][accept] = cand[accept]
        fitness[:m][accept] = fn[accept]
        violations[:m][accept] = vn[accept]

        beats = accept & strictly_better(fn, vn, elitist[0], elitist[1])
        if beats.any():
            sd = np.sqrt(np.maximum(np.diag(model.covariances[j]) * mult, 0.0))
            delta = np.abs(prop[beats].mean(axis=0) - model.means[j])
            with np.errstate(all="ignore"):
                sdr = np.max(np.where(sd > 0, delta / sd, 0.0))
            model.update_multiplier(j, True, sdr)
            best = np.flatnonzero(beats)[constrained_order(fn[beats], vn[beats])[0]]
            elitist = (fn[best], vn[best])
        else:
            model.update_multiplier(j, False)
    improved = strictly_better(fitness, violations, f0, v0)
    return improved, used


def forced_improvement(X, fitness, violations, who, fos, evaluate, rng, budget_left):
    """Mix the elitist into stagnant individuals per FOS element; copy it if nothing helps."""
    e = constrained_order(fitness, violations)[0]
    ex, ef, ev = X[e].copy(), fitness[e], violations[e]
    who = np.array([i for i in who if i != e], dtype=int)
    if who.size == 0:
        return 0
    used = 0
    done = np.zeros(who.size, dtype=bool)
    for j in rng.permutation(len(fos)):
        active = who[~done]
        m = min(active.size, budget_left - used)
        if m <= 0:
            break
        active = active[:m]
        idx = list(fos[j])
        cand = X[active].copy()
        cand[:, idx] = ex[idx]
        fn, vn = evaluate(cand)
        used += m
        better = strictly_better(fn, vn, fitness[active], violations[active])
        rows = active[better]
        X[rows] = cand[better]
        fitness[rows] = fn[better]
        violations[rows] = vn[better]
        done[np.isin(who, rows)] = True
        if done.all():
            break
    rest = who[~done]
    X[rest] = ex
    fitness[rest] = ef
    violations[rest] = ev
    return used


class RVGomea:
    """Constant optimiser state; :meth:`run` returns the best solution found.

    ``space="asinh"`` (default) searches ``u`` with ``c = scale * sinh(u)``
    over the image of the bounds, ``space="linear"`` searches ``c`` directly.
    """

    def __init__(self, problem, rng, population_size=None, selection_fraction=SELECTION_FRACTION,
                 no_improvement_stretch=None, fos="mixed", space="asinh", scale=SEARCH_SCALE,
                 engine="auto"):
        self.problem = problem
        self.fos_kind = fos
        self.rng = rng
        self.dim = problem.dim
        if self.dim < 1:
            raise ValueError("expression has no constants to fit")
        self.population_size = population_size or 2 * self.dim + 10
        self.selection_fraction = selection_fraction
        self.no_improvement_stretch = (
            no_improvement_stretch if no_improvement_stretch is not None else 25 + self.dim
        )
        if space == "asinh":
            self.evaluate = Evaluator(problem, scale)
            self.bounds = tuple(to_search_space(problem.bounds, scale))
        elif space == "linear":
            self.evaluate = Evaluator(problem)
            self.bounds = tuple(problem.bounds)
        else:
            raise ValueError(f"unknown search space {space!r}")
        self.scale = scale if space == "asinh" else 0.0
        if engine not in ("auto", "numba", "numpy"):
            raise ValueError(f"unknown engine {engine!r}")
        compiled_fos = fos in ("mixed", "univariate", "full")
        if engine == "numba" and not compiled_fos:
            raise ValueError("the compiled engine supports mixed, univariate and full FOS only")
        self.engine = "numba" if engine != "numpy" and compiled_fos else "numpy"
        self._program = None

    def _fos(self, X):
        kind = self.fos_kind
        if kind == "auto":
            kind = "univariate" if self.dim <= 5 else "linkage"
        if kind == "univariate":
            return univariate_fos(self.dim)
        if kind == "full":
            return full_fos(self.dim)
        if kind == "mixed":
            return mixed_fos(self.dim)
        if kind == "linkage":
            return gaussian_linkage_tree(X)
        raise ValueError(f"unknown FOS kind {kind!r}")

    def run(self, budget=None):
        p = self.problem
        budget = p.budget if budget is None else budget
        if budget < self.population_size:
            raise ValueError("budget must be at least the population size")
        if self.engine == "numba":
            return self._run_compiled(budget)
        rng = self.rng
        X = initial_constants(rng, self.population_size, self.dim, self.bounds)
        f, v = self.evaluate(X)
        used = X.shape[0]
        nis = np.zeros(self.population_size, dtype=int)
        e = constrained_order(f, v)[0]
        history, vhistory = [float(f[e])], [int(v[e])]
        model = None
        generation = 0
        while used < budget and not should_terminate(history, violation_history=vhistory):
            fos = self._fos(X)
            if model is not None and len(model.means) != len(fos):
                model = None
            model = estimate_model(X, f, v, fos, self.selection_fraction, previous=model,
                                   max_stagnation=self.no_improvement_stretch)
            improved, n = sample_and_improve(
                X, f, v, model, fos, self.evaluate, rng, self.bounds, budget_left=budget - used
            )
            used += n
            nis = np.where(improved, 0, nis + 1)
            stuck = np.flatnonzero(nis >= self.no_improvement_stretch)
            if stuck.size and used < budget:
                used += forced_improvement(X, f, v, stuck, fos, self.evaluate, rng, budget - used)
                nis[stuck] = 0
            generation += 1
            e = constrained_order(f, v)[0]
            history.append(float(f[e]))
            vhistory.append(int(v[e]))
        e = constrained_order(f, v)[0]
        constants = self.evaluate.constants(X[e:e + 1])[0].copy()
        return RVSolution(constants, float(f[e]), int(v[e]), used, generation, history)

    def _compiled_program(self):
        if self._program is None:
            from . import _rvfast
            p = self.problem
            cons = p.constraints
            grid = cons.grid if cons is not None else np.empty(0)
            points = np.concatenate([p.t, grid])
            cache, data_id = p.subtree_cache, None
            if p.data_id is not None:
                data_id = (p.data_id, "train+grid")
                cache = default_subtree_cache if cache is None else cache
            code, arg, pre = _rvfast.compile_program(p.expr, points, cache, data_id)
            n = len(p.t)
            self._program = (
                code, arg, np.ascontiguousarray(pre[:, :n]), np.ascontiguousarray(pre[:, n:]),
                p.t, np.ascontiguousarray(grid, dtype=float), p.y, cons is not None,
                cons.late_index if cons is not None else 0,
                float(cons.birth_max) if cons is not None else 0.0,
                float(cons.late_max) if cons is not None else 0.0,
            )
            fos = self._fos(None)
            self._fos_idx = np.array([i for sub in fos for i in sub], dtype=np.int64)
            self._fos_ptr = np.cumsum([0] + [len(sub) for sub in fos]).astype(np.int64)
        return self._program

    def _run_compiled(self, budget):
        from . import _rvfast
        prog = self._compiled_program()
        lo, hi = self.problem.bounds
        seed = int(self.rng.integers(2 ** 32))
        c, f, v, used, g, hist = _rvfast.run_population(
            prog, self.population_size, self.dim, float(self.bounds[0]), float(self.bounds[1]),
            float(self.scale), float(lo), float(hi), int(budget), self._fos_idx, self._fos_ptr,
            float(self.selection_fraction), int(self.no_improvement_stretch), seed,
            AMS_FRACTION, AMS_FACTOR, AVS_DECREASE, AVS_SDR_THRESHOLD, AVS_MIN, AVS_MAX,
            COV_REGULARIZATION, TERMINATION_WINDOW, TERMINATION_RATE, FITNESS_FLOOR,
        )
        return RVSolution(np.array(c), float(f), int(v), int(used), int(g), hist.tolist())


def fit_constants(problem, rng_seed=None, restarts=None, **kwargs):
    """Fit the CFCs of ``problem.expr`` to its training points.

    A single population stops on budget exhaustion, on an exact fit, or when
    the best fitness improved by less than 1 % over the last four
    generations. The optimiser is then restarted from a fresh population
    while budget remains, at most ``restarts`` extra times (``None`` means
    until the budget runs out); the constrained-best result is returned.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if problem.dim == 0:
        ev = Evaluator(problem)
        f, v = ev(np.zeros((1, 0)))
        return RVSolution(np.zeros(0), float(f[0]), int(v[0]), 1, 0, [float(f[0])])
    opt = RVGomea(problem, rng, **kwargs)
    best, used, generations, history = None, 0, 0, []
    runs = 0
    while True:
        sol = opt.run(problem.budget - used)
        used += sol.evaluations_used
        generations += sol.generations
        history.extend(sol.history)
        runs += 1
        if best is None or strictly_better(sol.fitness, sol.violations, best.fitness, best.violations):
            best = sol
        if best.violations == 0 and best.fitness <= FITNESS_FLOOR:
            break
        if restarts is not None and runs > restarts:
            break
        if problem.budget - used < opt.population_size:
            break
    return RVSolution(best.constants, best.fitness, best.violations, used, generations, history)
