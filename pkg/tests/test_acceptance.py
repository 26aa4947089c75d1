"""Acceptance suite: one test per criterion, tolerances as pinned in the build contract.

The desk-scale recovery runs take roughly an hour each on one core. Their
outputs are kept under ``acceptance_runs/`` together with a provenance file
(run configuration, data bytes and a hash of the sources that influence the
result); a stored run is reused only when all three match, otherwise it is
recomputed. Set ``FCLEARN_FRESH_RUNS=1`` to always recompute.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from fclearn import moo
from fclearn.dataset import generate_synthetic, sample_truth_specs, save_csv, split
from fclearn.evolver import (
    Evaluator, RunConfig, Scheduler, SolutionCache, evaluate_fc_fitness, fc_objectives, gom_pass,
    initial_population, run,
)
from fclearn.expr import apply_operator, left_deep_template, parse, random_tree, to_infix_key
from fclearn.linkage import learn_linkage_tree
from fclearn.recovery import SKELETON_EXPRESSIONS, recovery_of
from fclearn.rvopt import RVProblem, fit_constants, should_terminate

ROOT = Path(__file__).resolve().parents[1]
RUNS_DIR = Path(os.environ.get("FCLEARN_RUNS_DIR", ROOT / "acceptance_runs"))
CORE_SOURCES = ("expr.py", "constraints.py", "linkage.py", "rvopt.py", "_rvfast.py", "dataset.py",
                "moo.py", "evolver.py")


# ---------------------------------------------------------------------------
# helpers

def _interp(e, c, t):
    """Independent recursive interpreter (no compiled programs, no caches)."""
    if e.kind == "t":
        return t
    if e.kind == "c":
        return np.full_like(t, c[e.slot])
    return apply_operator(e.kind, *(_interp(ch, c, t) for ch in e.children))


def _source_hash():
    h = hashlib.sha256()
    src = ROOT / "src" / "fclearn"
    for name in CORE_SOURCES:
        h.update(name.encode())
        h.update((src / name).read_bytes())
    return h.hexdigest()


def _desk_data(noise):
    specs = sample_truth_specs(16, 12345, n_points=6)
    return specs, generate_synthetic(specs, noise, 777, n_rv=4)


def _desk_config(seed):
    return RunConfig(population_size=200, n_trees=2, height=4, batch_size=8, n_rv=4,
                     rv_budget=50_000, generations=15, hours=None, threads=1, seed=seed)


def desk_run(seed, noise):
    """Front rows of one desk-scale run, reusing stored outputs only on an exact match."""
    specs, data = _desk_data(noise)
    config = _desk_config(seed)
    out = RUNS_DIR / f"noise{int(round(noise * 100)):02d}_seed{seed}"
    tmp = out.with_suffix(".csv.tmp")
    out.mkdir(parents=True, exist_ok=True)
    save_csv(data, tmp)
    data_hash = hashlib.sha256(tmp.read_bytes()).hexdigest()
    tmp.unlink()
    provenance = {"config": config.to_json(), "data_sha256": data_hash,
                  "source_sha256": _source_hash()}
    prov_path = out / "provenance.json"
    fresh = os.environ.get("FCLEARN_FRESH_RUNS") == "1"
    if not fresh and prov_path.exists() and (out / "front.json").exists():
        stored = json.loads(prov_path.read_text())
        if {k: stored.get(k) for k in provenance} == provenance:
            return json.loads((out / "front.json").read_text())
    t0 = time.monotonic()
    run(config, data, out)
    provenance["seconds"] = round(time.monotonic() - t0, 1)
    prov_path.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    return json.loads((out / "front.json").read_text())


def _recovery_counts(noise, seeds=(0, 1, 2)):
    flags = [recovery_of(desk_run(s, noise)) for s in seeds]
    return {tag: sum(f[f"found_{tag}"] for f in flags) for tag in ("logistic", "gompertz")}


def _small_data(seed, n_sets=4):
    return generate_synthetic(sample_truth_specs(n_sets, seed), 0.0, seed + 1, n_rv=4)


def _small_config(**kw):
    base = dict(population_size=8, n_trees=2, height=3, batch_size=2, rv_budget=1000,
                rv_restarts=0, generations=3, hours=None, seed=0)
    base.update(kw)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# criteria

def test_objectives_match_nested_loop_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    for instance in range(100):
        T = int(rng.integers(1, 4))
        M = int(rng.integers(1, 6))
        data = _small_data(1000 + instance, n_sets=M)
        cfg = RunConfig(population_size=2, n_trees=T, height=3, rv_budget=300, rv_restarts=0,
                        generations=1, hours=None, seed=instance)
        ind = initial_population(rng, cfg, left_deep_template(3))[0]
        cache = SolutionCache()
        batch = tuple(range(M))
        obj = evaluate_fc_fitness(ind, data, batch, cfg, cache, generation=1)
        E = [[0.0] * M for _ in range(T)]
        for i in range(T):
            expr = parse(ind.keys[i])
            for m in range(M):
                c = cache.get(ind.keys[i], m).constants
                t, y = data.part(m, "validation")
                total = 0.0
                for k in range(len(t)):
                    pred = _interp(expr, c, np.array([t[k]]))[0]
                    total += (pred - y[k]) ** 2
                E[i][m] = total / len(t)
        mse = 0.0
        for i in range(T):
            mse += sum(E[i]) / M
        dmse = 0.0
        for m in range(M):
            dmse += min(E[i][m] for i in range(T))
        dmse /= M
        assert abs(obj.mse_global - mse) <= 1e-12 * max(1.0, abs(mse))
        assert abs(obj.dmse_global - dmse) <= 1e-12 * max(1.0, abs(dmse))
    assert time.monotonic() - t0 < 60


def test_worked_example():
    obj = fc_objectives([[1.0, 4.0], [2.0, 1.0]])
    assert obj.mse_global == 4.0
    assert obj.dmse_global == 1.0


def test_rv_fit_quality():
    t0 = time.monotonic()
    specs = sample_truth_specs(40, 0, n_points=6)
    data = generate_synthetic(specs, 0.0, 0, n_rv=3)
    skeleton = {tag: parse(key) for tag, key in SKELETON_EXPRESSIONS.items()}
    good = 0
    for i, (spec, s) in enumerate(zip(specs, data.sets)):
        sol = fit_constants(RVProblem(skeleton[spec.class_tag], s.t, s.y, budget=50_000), i)
        good += sol.fitness <= 1e-6
    assert sum(s.class_tag == "logistic" for s in specs) == 20
    assert good >= 36, f"{good}/40 sets fitted"
    assert time.monotonic() - t0 < 300


def test_desk_scale_recovery():
    counts = _recovery_counts(0.0)
    assert counts["gompertz"] >= 2 and counts["logistic"] >= 2, counts


def test_noise_degrades_recovery():
    clean = _recovery_counts(0.0)
    noisy = _recovery_counts(0.15)
    assert noisy["logistic"] <= clean["logistic"], (noisy, clean)
    assert noisy["gompertz"] <= clean["gompertz"], (noisy, clean)


def test_gom_steps_are_safe(monkeypatch):
    from fclearn import evolver
    decisions = []
    real = evolver.mo_accept

    def spy(o, b, archive, keys=None):
        ok = real(o, b, archive, keys)
        decisions.append((o, b, ok))
        return ok

    monkeypatch.setattr(evolver, "mo_accept", spy)
    data = _small_data(50, n_sets=4)
    cfg = _small_config(population_size=40, height=2, rv_budget=200)
    tpl = left_deep_template(cfg.height)
    rng = np.random.default_rng(51)
    ev = Evaluator(data, cfg, Scheduler(data, cfg), SolutionCache())
    pop = initial_population(rng, cfg, tpl)
    generation = 0
    while len(decisions) < 10_000:
        assert generation < 200
        generation += 1
        ev.generation = generation
        ev.cache.clear()
        batch = tuple(sorted(rng.choice(len(data), 2, replace=False).tolist()))
        ev.evaluate_all(pop, batch)
        fos = learn_linkage_tree(np.array([p.genotype for p in pop]))
        before = len(decisions)
        pop, _ = gom_pass(pop, fos, ev, batch, rng, moo.ParetoArchive(), tpl)
        if len(decisions) - before < 100:
            # a converged population proposes almost nothing; start a fresh one
            pop = initial_population(rng, cfg, tpl)
    bad = [(o, b) for o, b, ok in decisions
           if ok and (o.violations > b.violations or moo.constrained_dominates(b, o))]
    assert not bad


def test_hv_never_decreases_and_archive_stays_non_dominated():
    for seed in range(10):
        res = run(_small_config(seed=seed, generations=3, population_size=6), _small_data(seed))
        hv = [v for _, v in res.hv]
        assert all(b >= a for a, b in zip(hv, hv[1:])), hv
    rng = np.random.default_rng(7)
    for _ in range(200):
        arch = moo.ParetoArchive()
        for k in range(60):
            p = moo.ObjectivePair(float(rng.integers(0, 8)), float(rng.integers(0, 8)),
                                  int(rng.integers(0, 3)))
            arch.insert(moo.ArchiveEntry(p, (str(k % 4),)))
            es = [e.objectives for e in arch]
            assert not any(moo.constrained_dominates(a, b) for a in es for b in es)


def _stratified_hv(front, n_side=1000, seed=0):
    """Monte-Carlo HV with one uniform sample per cell of an ``n_side`` grid (10^6 samples)."""
    rng = np.random.default_rng(seed)
    i, j = np.meshgrid(np.arange(n_side), np.arange(n_side), indexing="ij")
    x = ((i + rng.random(i.shape)) / n_side).ravel()
    y = ((j + rng.random(j.shape)) / n_side).ravel()
    nd = moo.non_dominated(np.clip(front, 0.0, 1.0))
    k = np.searchsorted(nd[:, 0], x, side="right") - 1
    dominated = (k >= 0) & (nd[np.maximum(k, 0), 1] <= y)
    return dominated.mean()


def test_hv_matches_monte_carlo():
    rng = np.random.default_rng(99)
    for f in range(50):
        front = rng.random((int(rng.integers(1, 15)), 2))
        assert abs(moo.hypervolume(front) - _stratified_hv(front, seed=f)) <= 1e-3
    assert moo.hypervolume([(0.0, 0.0)]) == 1.0
    assert moo.hypervolume([(0.5, 0.5)]) == 0.25
    assert moo.hypervolume([(0.0, 0.5), (0.5, 0.0)]) == 0.75


def test_cache_equivalence():
    data = _small_data(3)
    on = run(_small_config(generations=5), data)
    off = run(_small_config(generations=5, solution_cache=False, subtree_cache=False), data)
    assert len(on.population) == len(off.population)
    for a, b in zip(on.population, off.population):
        assert a.keys == b.keys
        assert abs(a.objectives.mse_global - b.objectives.mse_global) <= 1e-12
        assert abs(a.objectives.dmse_global - b.objectives.dmse_global) <= 1e-12
        assert a.objectives.violations == b.objectives.violations


def test_thread_count_determinism(tmp_path):
    data = _small_data(11)
    run(_small_config(seed=7, threads=1), data, tmp_path / "one")
    run(_small_config(seed=7, threads=8), data, tmp_path / "eight")
    assert (tmp_path / "one" / "front.json").read_bytes() == \
        (tmp_path / "eight" / "front.json").read_bytes()


def test_split_goldens():
    five, six = split(5, 4), split(6, 4)
    assert (five.train, five.validation, five.test) == ((0, 1, 2, 3), (4,), ())
    assert (six.train, six.validation, six.test) == ((0, 1, 2, 3), (4,), (5,))
    assert split(4, 4) is None


def test_termination_rule():
    assert should_terminate([10.0, 9.99, 9.98, 9.98, 9.98])
    assert not should_terminate([10.0, 8.0, 6.0, 4.0, 2.0])


def test_round_trip():
    rng = np.random.default_rng(0)
    for i in range(10_000):
        tree = random_tree(rng, int(rng.integers(1, 6)), "left_deep" if i % 2 else "full")
        key = to_infix_key(tree.to_expr())
        assert to_infix_key(parse(key)) == key
