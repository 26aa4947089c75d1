"""Command line entry point: ``fclearn <command> [flags]``.

Commands: generate, run, fit, predict, recovery, hv-report. Exit codes are 0
on success, 1 for usage errors, 2 for data errors and 3 for runtime errors.
``FCLEARN_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import moo
from .constraints import DEFAULT_CONSTRAINTS, NO_CONSTRAINTS
from .dataset import (DataError, generate_synthetic, load_global,
                      read_sets, sample_truth_specs, save_csv, save_truth)
from .evolver import RunConfig, run
from .expr import ParseError, evaluate, parse
from .recovery import count_recoveries, write_recovery
from .rvopt import RVProblem, fit_constants

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("fclearn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag name -> RunConfig field
RUN_FLAGS = {
    "pop": "population_size", "trees": "n_trees", "height": "height", "batch": "batch_size",
    "nrv": "n_rv", "rv_budget": "rv_budget", "generations": "generations", "hours": "hours",
    "threads": "threads", "seed": "seed",
}


def build_parser():
    p = _Parser(prog="fclearn", description="Function-class learning for growth curves.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic logistic/Gompertz data")
    g.add_argument("--sets", type=int, required=True)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=6)
    g.add_argument("--nrv", type=int, default=4)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="evolve function classes")
    r.add_argument("--config")
    r.add_argument("--data")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int)
    r.add_argument("--pop", type=int)
    r.add_argument("--trees", type=int)
    r.add_argument("--height", type=int)
    r.add_argument("--batch", type=int)
    r.add_argument("--nrv", type=int)
    r.add_argument("--rv-budget", type=int)
    r.add_argument("--generations", type=int)
    r.add_argument("--hours", type=float)
    r.add_argument("--noise", type=float, help="generate synthetic data instead of --data")
    r.add_argument("--sets", type=int, help="number of synthetic sets with --noise")
    r.add_argument("--dump-linkage", help="JSON-lines file for per-generation linkage trees")

    f = sub.add_parser("fit", help="refit one expression to local data")
    f.add_argument("--expr", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--set", dest="set_id")
    f.add_argument("--nrv", type=int, default=4)
    f.add_argument("--rv-budget", type=int, default=50_000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--json", action="store_true")
    f.add_argument("--no-constraints", action="store_true",
                   help="fit without the growth-curve constraints")

    pr = sub.add_parser("predict", help="evaluate an expression with given constants")
    pr.add_argument("--expr", required=True)
    pr.add_argument("--constants", required=True, help="comma separated values")
    pr.add_argument("--ages", required=True, help="comma separated ages")

    rc = sub.add_parser("recovery", help="score class recovery of run fronts")
    rc.add_argument("fronts", nargs="+", help="front.json files or run directories")
    rc.add_argument("--out")

    hv = sub.add_parser("hv-report", help="hypervolume under a shared normalisation")
    hv.add_argument("fronts", nargs="+", help="front.json files or run directories")
    hv.add_argument("--out")
    return p


def _front_path(p):
    return os.path.join(p, "front.json") if os.path.isdir(p) else p


def _floats(text, what):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--{what}: expected comma separated numbers") from None


def cmd_generate(a, out=sys.stdout):
    if a.sets < 1:
        raise UsageError("--sets must be at least 1")
    if a.noise < 0:
        raise UsageError("--noise must be non-negative")
    if a.points < 1:
        raise UsageError("--points must be at least 1")
    specs = sample_truth_specs(a.sets, a.seed, n_points=a.points)
    data = generate_synthetic(specs, a.noise, a.seed + 1, n_rv=a.nrv)
    os.makedirs(a.out, exist_ok=True)
    save_csv(data, os.path.join(a.out, "data.csv"))
    save_truth(specs, [s.id for s in data.sets], os.path.join(a.out, "truth.json"))
    n_log = sum(s.class_tag == "logistic" for s in specs)
    print(f"wrote {len(data)} sets ({n_log} logistic, {len(specs) - n_log} gompertz), "
          f"noise {a.noise} to {a.out}", file=out)
    return EXIT_OK


def _run_config(a):
    values = {}
    if a.config:
        try:
            with open(a.config, encoding="utf-8") as fh:
                values = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid config JSON: {exc}") from None
    for flag, key in RUN_FLAGS.items():
        v = getattr(a, flag)
        if v is not None:
            values[key] = v
    if a.hours is None and "hours" not in values and "generations" in values:
        values["hours"] = None
    try:
        return RunConfig.from_json(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def cmd_run(a, out=sys.stdout):
    config = _run_config(a)
    if a.data:
        data = load_global(a.data, n_rv=config.n_rv)
    elif a.noise is not None:
        specs = sample_truth_specs(a.sets or 16, config.seed)
        data = generate_synthetic(specs, a.noise, config.seed + 1, n_rv=config.n_rv)
        os.makedirs(a.out, exist_ok=True)
        save_csv(data, os.path.join(a.out, "data.csv"))
        save_truth(specs, [s.id for s in data.sets], os.path.join(a.out, "truth.json"))
    else:
        raise UsageError("run needs --data or --noise")
    result = run(config, data, a.out, linkage_dump=a.dump_linkage)
    print(f"{len(result.log)} generations, {len(result.archive)} archive entries "
          f"({len(result.archive.feasible())} feasible); outputs in {a.out}", file=out)
    return EXIT_OK


def _read_local(path, set_id):
    sets = read_sets(path)
    if set_id is None:
        if len(sets) != 1:
            raise UsageError("data holds several sets; choose one with --set")
        return sets[0]
    for s in sets:
        if s.id == set_id:
            return s
    raise DataError(f"no points for set {set_id!r}")


def cmd_fit(a, out=sys.stdout):
    try:
        expr = parse(a.expr)
    except ParseError as exc:
        raise UsageError(f"cannot parse expression: {exc}") from None
    local = _read_local(a.data, a.set_id)
    if local.n < 3:
        raise DataError(f"set {local.id!r} has {local.n} points; at least 3 are needed")
    n_rv = min(a.nrv, local.n)
    t_tr, y_tr = local.t[:n_rv], local.y[:n_rv]
    t_va, y_va = local.t[n_rv:], local.y[n_rv:]
    constraints = NO_CONSTRAINTS if a.no_constraints else DEFAULT_CONSTRAINTS
    sol = fit_constants(RVProblem(expr, t_tr, y_tr, constraints=constraints,
                                  budget=a.rv_budget), a.seed)
    val = None
    if len(t_va):
        val = float(np.mean((evaluate(expr, sol.constants, t_va) - y_va) ** 2))
    report = {"expression": expr.key, "set_id": local.id, "constants": sol.constants.tolist(),
              "train_mse": sol.fitness, "validation_mse": val, "violations": sol.violations,
              "evaluations": sol.evaluations_used}
    if a.json:
        print(json.dumps(report, sort_keys=True), file=out)
    else:
        print(f"expression  {expr.key}", file=out)
        print(f"constants   {', '.join(repr(float(c)) for c in sol.constants)}", file=out)
        print(f"train MSE   {sol.fitness:.6g}", file=out)
        print(f"valid MSE   {'n/a' if val is None else format(val, '.6g')}", file=out)
        print(f"violations  {sol.violations}", file=out)
    return EXIT_OK


def cmd_predict(a, out=sys.stdout):
    try:
        expr = parse(a.expr)
    except ParseError as exc:
        raise UsageError(f"cannot parse expression: {exc}") from None
    c = _floats(a.constants, "constants")
    if len(c) != expr.n_constants:
        raise UsageError(f"expression needs {expr.n_constants} constants, got {len(c)}")
    ages = np.array(_floats(a.ages, "ages"))
    y = evaluate(expr, c, ages)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "y"])
    for t, v in zip(ages, y):
        w.writerow([repr(float(t)), repr(float(v))])
    return EXIT_OK


def _load_rows(path):
    try:
        with open(_front_path(path), encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read front: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid front JSON in {path}: {exc}") from None


def cmd_recovery(a, out=sys.stdout):
    report = count_recoveries([_load_rows(p) for p in a.fronts])
    report["fronts"] = list(a.fronts)
    if a.out:
        write_recovery(report, a.out)
    c = report["counts"]
    print(f"runs {report['n_runs']}: logistic {c['found_logistic']}, gompertz "
          f"{c['found_gompertz']}, both {c['found_both']}", file=out)
    return EXIT_OK


def _config_signature(path):
    cfg_path = os.path.join(os.path.dirname(_front_path(path)), "config.json")
    if not os.path.exists(cfg_path):
        return None
    with open(cfg_path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    cfg.pop("seed", None)
    cfg.pop("threads", None)
    return json.dumps(cfg, sort_keys=True)


def cmd_hv_report(a, out=sys.stdout):
    sigs = {s for s in (_config_signature(p) for p in a.fronts) if s is not None}
    if len(sigs) > 1:
        raise UsageError("fronts come from different configurations")
    fronts = [moo.read_front(_front_path(p))[0] for p in a.fronts]
    if not any(len(f) for f in fronts):
        raise DataError("no feasible points in any front")
    bounds = moo.normalization_bounds(fronts)
    rows = [(p, moo.hypervolume(f, bounds)) for p, f in zip(a.fronts, fronts)]
    target = open(a.out, "w", newline="", encoding="utf-8") if a.out else out
    try:
        w = csv.writer(target, lineterminator="\n")
        w.writerow(["run", "hv"])
        for p, hv in rows:
            w.writerow([p, repr(hv)])
    finally:
        if a.out:
            target.close()
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "fit": cmd_fit, "predict": cmd_predict,
            "recovery": cmd_recovery, "hv-report": cmd_hv_report}


def main(argv=None, out=None):
    out = out or sys.stdout
    logging.basicConfig(level=os.environ.get("FCLEARN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.command is None:
            raise UsageError("a command is required")
        return COMMANDS[a.command](a, out)
    except UsageError as exc:
        print(f"fclearn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"fclearn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"fclearn: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
