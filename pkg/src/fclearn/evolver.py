"""Function-class GOMEA: multi-tree GP-GOMEA whose fitness refits every
tree's constants per local data set.

A generation picks a batch of local sets, learns a linkage tree over the
concatenated multi-tree genotypes, applies gene-pool optimal mixing (GOM) to
every individual and keeps the offspring. Non-dominated solutions seen during
the generation are re-evaluated on all local sets at the end and merged into
the persistent archive, which is the run's output.

GOM runs in lock step: at FOS step ``k`` every individual proposes its
change, all constant refits needed by the proposals are evaluated (in
parallel when ``threads > 1``), and acceptance is then decided in
individual order. Each refit draws its seed from (run seed, generation,
expression key, set index), so results do not depend on the thread count,
on scheduling, or on whether the solution cache is on.
"""

from __future__ import annotations

import json
import logging
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import multiprocessing as mp
import numpy as np

from . import moo
from .constraints import DEFAULT_CONSTRAINTS
from .expr import (CFC_HIGH, CFC_LOW, OPERATORS, ExpressionTree, SubtreeCache, evaluate,
                   make_template, parse, random_genes)
from .linkage import learn_linkage_tree
from .rvopt import RVProblem, fit_constants

logger = logging.getLogger(__name__)

# stand-in for non-finite validation errors so objectives stay ordered
MSE_CAP = 1e300


@dataclass
class RunConfig:
    population_size: int = 1000
    height: int = 4
    template: str = "left_deep"
    n_trees: int = 2
    n_rv: int = 4
    batch_size: int = 16
    rv_budget: int = 500_000
    rv_restarts: int | None = 2
    cfc_bounds: tuple = (CFC_LOW, CFC_HIGH)
    operators: tuple = OPERATORS
    seed: int = 0
    generations: int | None = None
    hours: float | None = 120.0
    threads: int = 1
    solution_cache: bool = True
    subtree_cache: bool = True

    def __post_init__(self):
        self.cfc_bounds = tuple(float(b) for b in self.cfc_bounds)
        self.operators = tuple(self.operators)
        unknown = set(self.operators) - set(OPERATORS)
        if unknown:
            raise ValueError(f"unknown operators {sorted(unknown)}")
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if self.n_trees < 1 or self.height < 1:
            raise ValueError("n_trees and height must be positive")
        if self.n_rv < 3:
            raise ValueError("n_rv must be at least 3")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        if self.cfc_bounds[0] >= self.cfc_bounds[1]:
            raise ValueError("cfc_bounds must be increasing")
        if self.generations is None and self.hours is None:
            raise ValueError("need a generation or a time limit")

    def to_json(self):
        d = asdict(self)
        d["cfc_bounds"] = list(self.cfc_bounds)
        d["operators"] = list(self.operators)
        return d

    @classmethod
    def from_json(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# individuals and objectives

@dataclass
class MultiTreeIndividual:
    trees: list
    keys: tuple = ()
    objectives: moo.ObjectivePair | None = None
    per_set_mse: np.ndarray | None = None     # (T, |sets evaluated|)
    sets: tuple = ()                          # set indices behind per_set_mse columns

    def __post_init__(self):
        if not self.keys:
            self.keys = tuple(t.to_expr().key for t in self.trees)

    @property
    def genotype(self):
        return np.concatenate([t.genes for t in self.trees])

    @classmethod
    def from_genotype(cls, genes, template):
        L = template.size
        trees = [ExpressionTree(genes[i:i + L], template) for i in range(0, len(genes), L)]
        return cls(trees)

    def copy(self):
        return MultiTreeIndividual(list(self.trees), self.keys, self.objectives,
                                   self.per_set_mse, self.sets)


def fc_objectives(per_set_mse, violations=0):
    """Objectives from a ``(T, M)`` matrix of per-set validation MSEs.

    ``mse_global`` sums over trees the mean over sets; ``dmse_global`` is the
    mean over sets of the best tree's MSE.
    """
    E = np.asarray(per_set_mse, dtype=float)
    if E.ndim != 2 or E.size == 0:
        raise ValueError("per_set_mse must be a non-empty (T, M) matrix")
    mse = float(np.sum(np.mean(E, axis=1)))
    dmse = float(np.mean(np.min(E, axis=0)))
    return moo.ObjectivePair(min(mse, MSE_CAP), min(dmse, MSE_CAP), int(violations))


@dataclass(frozen=True)
class SetResult:
    """Outcome of fitting one expression to one local set."""

    mse: float            # validation MSE under the train-fitted constants
    violations: int
    constants: tuple
    evaluations: int


class SolutionCache:
    """Per-generation memo of :class:`SetResult` keyed by (expression key, set index)."""

    def __init__(self, enabled=True):
        self.enabled = enabled
        self._store = {}
        self.hits = 0
        self.misses = 0

    def get(self, key, m):
        if not self.enabled:
            return None
        r = self._store.get((key, m))
        if r is not None:
            self.hits += 1
        return r

    def put(self, key, m, result):
        if self.enabled:
            self._store[(key, m)] = result

    def __contains__(self, item):
        return self.enabled and item in self._store

    def clear(self):
        self._store.clear()

    def __len__(self):
        return len(self._store)


class BatchSchedule:
    """Random permutations of set indices consumed in ``size``-long windows."""

    def __init__(self, n_sets, size, rng):
        self.n_sets = n_sets
        self.size = min(size, n_sets)
        self.rng = rng
        self._queue = []

    def next(self):
        if self.size == self.n_sets:
            return tuple(range(self.n_sets))
        if len(self._queue) < self.size:
            self._queue.extend(self.rng.permutation(self.n_sets).tolist())
        batch, self._queue = self._queue[:self.size], self._queue[self.size:]
        return tuple(sorted(batch))


# ---------------------------------------------------------------------------
# constant refits

def task_seed(run_seed, generation, key, m):
    return [int(run_seed), int(generation), zlib.crc32(key.encode("utf-8")), int(m)]


def fit_on_set(expr, data, m, seed, config, subtree_cache=None):
    """Fit ``expr`` on the train part of set ``m`` and score its validation part."""
    t_tr, y_tr = data.part(m, "train")
    t_va, y_va = data.part(m, "validation")
    problem = RVProblem(expr, t_tr, y_tr, bounds=config.cfc_bounds,
                        constraints=DEFAULT_CONSTRAINTS, budget=config.rv_budget,
                        data_id=m if subtree_cache is not None else None,
                        subtree_cache=subtree_cache)
    sol = fit_constants(problem, np.random.default_rng(seed), restarts=config.rv_restarts)
    with np.errstate(all="ignore"):
        pred = evaluate(expr, sol.constants, t_va)
        mse = float(np.mean((pred - y_va) ** 2))
    if not np.isfinite(mse) or mse > MSE_CAP:
        mse = MSE_CAP
    return SetResult(mse, sol.violations, tuple(float(c) for c in sol.constants),
                     sol.evaluations_used)


# worker-process state, installed by the pool initializer
_WORKER = {}


def _init_worker(data, config):
    _WORKER["data"] = data
    _WORKER["config"] = config
    _WORKER["exprs"] = {}
    _WORKER["subtree_cache"] = SubtreeCache() if config.subtree_cache else None


def _worker_fit(task):
    key, m, seed = task
    exprs = _WORKER["exprs"]
    expr = exprs.get(key)
    if expr is None:
        expr = exprs[key] = parse(key)
    return fit_on_set(expr, _WORKER["data"], m, seed, _WORKER["config"], _WORKER["subtree_cache"])


class Scheduler:
    """Runs (key, set) refit tasks, most-CFC first, serially or on a process pool."""

    def __init__(self, data, config):
        self.data = data
        self.config = config
        self.pool = None
        _init_worker(data, config)
        if config.threads > 1:
            ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
            self.pool = ProcessPoolExecutor(config.threads, mp_context=ctx,
                                            initializer=_init_worker, initargs=(data, config))
        self.dispatched = []

    def order(self, tasks):
        """Stable sort by descending CFC count."""
        return sorted(range(len(tasks)), key=lambda i: -tasks[i][3])

    def run(self, tasks):
        """``tasks``: list of ``(key, m, seed, n_cfc)``; returns results in input order."""
        if not tasks:
            return []
        order = self.order(tasks)
        self.dispatched = [(tasks[i][0], tasks[i][1]) for i in order]
        payload = [tasks[i][:3] for i in order]
        if self.pool is None or len(payload) < 2:
            results = [_worker_fit(p) for p in payload]
        else:
            chunk = max(1, len(payload) // (self.config.threads * 16))
            results = list(self.pool.map(_worker_fit, payload, chunksize=chunk))
        out = [None] * len(tasks)
        for i, r in zip(order, results):
            out[i] = r
        return out

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None


def schedule_evaluations(tasks, data, config):
    """One-shot helper: run refit tasks and return their results in input order."""
    s = Scheduler(data, config)
    try:
        return s.run(tasks)
    finally:
        s.close()


class Evaluator:
    """Objective evaluation of multi-tree individuals through the solution cache."""

    def __init__(self, data, config, scheduler, cache):
        self.data = data
        self.config = config
        self.scheduler = scheduler
        self.cache = cache
        self.generation = 0
        self.fits = 0
        self.rv_evaluations = 0
        self._n_cfc = {}

    def n_cfc(self, key):
        n = self._n_cfc.get(key)
        if n is None:
            n = self._n_cfc[key] = parse(key).n_constants
        return n

    def resolve(self, requests):
        """Results for every ``(key, m)`` in ``requests`` (list), using the cache."""
        results = {}
        tasks, seen = [], set()
        for key, m in requests:
            if (key, m) in results or (key, m) in seen:
                continue
            r = self.cache.get(key, m)
            if r is not None:
                results[(key, m)] = r
                continue
            seen.add((key, m))
            tasks.append((key, m, task_seed(self.config.seed, self.generation, key, m),
                          self.n_cfc(key)))
        if not self.cache.enabled:
            # every request is refit, duplicates included
            tasks = [(k, m, task_seed(self.config.seed, self.generation, k, m), self.n_cfc(k))
                     for k, m in requests]
        fitted = self.scheduler.run(tasks)
        for (key, m, _, _), r in zip(tasks, fitted):
            self.fits += 1
            self.rv_evaluations += r.evaluations
            self.cache.put(key, m, r)
            results[(key, m)] = r
        return results

    def apply(self, individual, sets, results):
        E = np.array([[results[(k, m)].mse for m in sets] for k in individual.keys])
        viol = max(results[(k, m)].violations for k in individual.keys for m in sets)
        individual.per_set_mse = E
        individual.sets = tuple(sets)
        individual.objectives = fc_objectives(E, viol)

    def evaluate_all(self, individuals, sets):
        reqs = [(k, m) for ind in individuals for k in ind.keys for m in sets]
        results = self.resolve(reqs)
        for ind in individuals:
            self.apply(ind, sets, results)
        return results


def evaluate_fc_fitness(individual, data, batch, config=None, cache=None, generation=0):
    """Objectives of one individual on the sets in ``batch`` (refitting constants)."""
    config = config or RunConfig(generations=1)
    scheduler = Scheduler(data, RunConfig(**{**config.to_json(), "threads": 1}))
    ev = Evaluator(data, config, scheduler, cache if cache is not None else SolutionCache())
    ev.generation = generation
    ev.evaluate_all([individual], tuple(batch))
    return individual.objectives


# ---------------------------------------------------------------------------
# variation

def mo_accept(offspring, backup, archive, keys=None):
    """GOM acceptance for the bi-objective constrained case.

    Accept when the offspring constrained-dominates the backup, has identical
    objectives, or is mutually non-dominated with it and enters the
    generation archive.
    """
    o, b = offspring, backup
    if moo.constrained_dominates(o, b):
        return True
    if o == b:
        return True
    if moo.constrained_dominates(b, o):
        return False
    return archive.would_accept(o, keys)


def gom_pass(population, fos, evaluator, batch, rng, archive, template):
    """One lock-step GOM sweep over the whole population; returns the offspring."""
    n = len(population)
    parents = population
    genos = np.array([p.genotype for p in parents])
    offspring = [p.copy() for p in parents]
    cur = genos.copy()
    perms = [rng.permutation(len(fos)) for _ in range(n)]
    stats = {"proposals": 0, "accepted": 0, "evaluated": 0}
    for step in range(len(fos)):
        proposals = []
        for i in range(n):
            subset = list(fos[perms[i][step]])
            d = int(rng.integers(n - 1))
            d = d + 1 if d >= i else d
            g = cur[i].copy()
            g[subset] = genos[d, subset]
            proposals.append(g)
        cands = []
        for i, g in enumerate(proposals):
            if np.array_equal(g, cur[i]):
                cands.append(None)
                continue
            cand = MultiTreeIndividual.from_genotype(g, template)
            cands.append(cand)
        need = [c for i, c in enumerate(cands) if c is not None and c.keys != offspring[i].keys]
        results = evaluator.resolve([(k, m) for c in need for k in c.keys for m in batch])
        for i, cand in enumerate(cands):
            if cand is None:
                continue
            stats["proposals"] += 1
            back = offspring[i]
            if cand.keys == back.keys:
                # only introns changed: same phenotype, same objectives
                cand.objectives, cand.per_set_mse, cand.sets = (
                    back.objectives, back.per_set_mse, back.sets)
                offspring[i] = cand
                cur[i] = proposals[i]
                stats["accepted"] += 1
                continue
            evaluator.apply(cand, batch, results)
            stats["evaluated"] += 1
            ok = mo_accept(cand.objectives, back.objectives, archive, cand.keys)
            archive.insert(moo.ArchiveEntry(cand.objectives, cand.keys, cand.copy()))
            if ok:
                offspring[i] = cand
                cur[i] = proposals[i]
                stats["accepted"] += 1
    return offspring, stats


# ---------------------------------------------------------------------------
# run driver

@dataclass
class RunResult:
    archive: moo.ParetoArchive
    hv: list
    log: list
    config: RunConfig
    bounds: tuple | None = None
    population: list = field(default_factory=list)
    generation_archive: moo.ParetoArchive | None = None


def initial_population(rng, config, template):
    pop = []
    for _ in range(config.population_size):
        genes = np.concatenate([random_genes(rng, template, config.operators)
                                for _ in range(config.n_trees)])
        pop.append(MultiTreeIndividual.from_genotype(genes, template))
    return pop


def _full_entry(entry, data, evaluator):
    ind = entry.payload.copy()
    sets = tuple(range(len(data)))
    results = evaluator.resolve([(k, m) for k in ind.keys for m in sets])
    evaluator.apply(ind, sets, results)
    consts = [[list(results[(k, m)].constants) for m in sets] for k in ind.keys]
    payload = {"per_set_mse": ind.per_set_mse.tolist(), "per_set_constants": consts,
               "set_ids": [s.id for s in data.sets], "individual": ind}
    return moo.ArchiveEntry(ind.objectives, ind.keys, payload, full_data=True)


def run(config, data, out_dir=None, progress=None, linkage_dump=None):
    """Evolve function classes on ``data``; optionally write run files to ``out_dir``.

    ``linkage_dump`` names a JSON-lines file receiving each generation's
    linkage tree.
    """
    rng = np.random.default_rng(config.seed)
    template = make_template(config.template, config.height)
    cache = SolutionCache(config.solution_cache)
    scheduler = Scheduler(data, config)
    evaluator = Evaluator(data, config, scheduler, cache)
    batches = BatchSchedule(len(data), config.batch_size, rng)
    persistent = moo.ParetoArchive("persistent")
    archive = moo.ParetoArchive("generation")
    population = initial_population(rng, config, template)
    log, snapshots = [], []
    if linkage_dump is not None:
        open(linkage_dump, "w", encoding="utf-8").close()
    start = time.monotonic()
    generation = 0
    try:
        while True:
            if config.generations is not None and generation >= config.generations:
                break
            if config.hours is not None and time.monotonic() - start > config.hours * 3600:
                break
            generation += 1
            evaluator.generation = generation
            cache.clear()
            fits0, ev0, hits0 = evaluator.fits, evaluator.rv_evaluations, cache.hits
            batch = batches.next()
            evaluator.evaluate_all(population, batch)
            archive.clear()
            for ind in population:
                archive.insert(moo.ArchiveEntry(ind.objectives, ind.keys, ind.copy()))
            fos = learn_linkage_tree(np.array([p.genotype for p in population]))
            if linkage_dump is not None:
                with open(linkage_dump, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"generation": generation, **fos.to_json()}) + "\n")
            population, stats = gom_pass(population, fos, evaluator, batch, rng, archive, template)
            for entry in archive.entries:
                persistent.insert(_full_entry(entry, data, evaluator))
            snapshots.append(persistent.points().copy())
            lookups = (cache.hits - hits0) + (evaluator.fits - fits0)
            record = {
                "generation": generation,
                "batch": list(batch),
                "fits": evaluator.fits - fits0,
                "rv_evaluations": evaluator.rv_evaluations - ev0,
                "cache_hits": cache.hits - hits0,
                "cache_hit_rate": (cache.hits - hits0) / lookups if lookups else 0.0,
                "gom": stats,
                "generation_archive": len(archive),
                "persistent_archive": len(persistent),
                "feasible_front": len(persistent.feasible()),
                "best_mse_global": min((e.objectives.mse_global for e in persistent.feasible()),
                                       default=None),
            }
            log.append(record)
            logger.info("generation %d: %d fits, %d hits, archive %d", generation,
                        record["fits"], record["cache_hits"], len(persistent))
            if progress is not None:
                progress(record)
    finally:
        scheduler.close()
    bounds, hv = None, []
    nonempty = [s for s in snapshots if len(s)]
    if nonempty:
        bounds = moo.normalization_bounds(nonempty)
        hv = [(g + 1, moo.hypervolume(s, bounds) if len(s) else 0.0)
              for g, s in enumerate(snapshots)]
    else:
        hv = [(g + 1, 0.0) for g in range(len(snapshots))]
    result = RunResult(persistent, hv, log, config, bounds, population, archive)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    moo.write_front(result.archive, os.path.join(out_dir, "front.json"))
    moo.write_hv_csv(result.hv, os.path.join(out_dir, "hv.csv"))
    with open(os.path.join(out_dir, "log.jsonl"), "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "expressions.txt"), "w", encoding="utf-8") as fh:
        for row in moo.front_to_json(result.archive):
            fh.write("\t".join(row["expressions"]) + "\n")
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(result.config.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
