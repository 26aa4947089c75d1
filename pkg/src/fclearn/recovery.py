"""Ground-truth class recovery: is an expression a logistic or a Gompertz
function class, up to simple algebraic identities?

Expressions are rewritten into a structural normal form where every CFC is
an anonymous ``C`` and constant-coefficient shapes collapse:

* ``x + C`` becomes ``shift(x)`` and ``C * x`` (or ``x / C``) ``scale(x)``;
  nested shifts/scales merge and a scale moves outside a shift.
* signs are absorbed into neighbouring constants;
* ``exp(x + C)`` becomes ``scale(exp(x))``, ``C^x`` becomes
  ``exp(scale(x))``, ``1/exp(x)`` becomes ``exp(-x)``;
* mirrored operators are rewritten to their plain forms.

The result is compared with the normal forms of the two target classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .constraints import NO_CONSTRAINTS
from .dataset import eval_gompertz, eval_logistic
from .expr import Expr, ExpressionTree, parse
from .rvopt import RVProblem, fit_constants

C = ("C",)
T = ("t",)


def render(n):
    if len(n) == 1:
        return n[0]
    return f"{n[0]}({', '.join(render(ch) for ch in n[1:])})"


def _sorted(a, b):
    return (a, b) if render(a) <= render(b) else (b, a)


def mk_neg(x):
    if x == C:
        return C
    if x[0] == "neg":
        return x[1]
    if x[0] == "scale":
        return x
    if x[0] == "shift":
        return mk_shift(mk_neg(x[1]))
    return ("neg", x)


def mk_shift(x):
    if x == C:
        return C
    if x[0] == "shift":
        return x
    return ("shift", x)


def mk_scale(x):
    if x == C:
        return C
    if x[0] == "scale":
        return x
    if x[0] == "neg":
        return mk_scale(x[1])
    if x[0] == "shift":
        return mk_shift(mk_scale(x[1]))
    return ("scale", x)


def mk_inv(x):
    if x == C:
        return C
    kind = x[0]
    if kind == "inv":
        return x[1]
    if kind == "scale":
        return mk_scale(mk_inv(x[1]))
    if kind == "neg":
        return mk_neg(mk_inv(x[1]))
    if kind == "exp":
        return mk_exp(mk_neg(x[1]))
    if kind == "powc":
        return x
    if kind == "shift" and x[1][0] == "scale":
        # 1 / (C + C x) = C / (C + x)
        return mk_scale(mk_inv(mk_shift(x[1][1])))
    return ("inv", x)


def mk_exp(x):
    if x == C:
        return C
    if x[0] == "shift":
        return mk_scale(mk_exp(x[1]))
    if x[0] == "log":
        return x[1]
    return ("exp", x)


def mk_log(x):
    if x == C:
        return C
    kind = x[0]
    if kind == "scale":
        return mk_shift(mk_log(x[1]))
    if kind == "exp":
        return x[1]
    if kind == "powc":
        return mk_scale(mk_log(x[1]))
    if kind == "inv":
        return mk_neg(mk_log(x[1]))
    if kind == "neg":
        return mk_log(x[1])
    return ("log", x)


def mk_powc(x):
    """``|x| ** C``."""
    if x == C:
        return C
    kind = x[0]
    if kind == "exp":
        return mk_exp(mk_scale(x[1]))
    if kind == "scale":
        return mk_scale(mk_powc(x[1]))
    if kind in ("powc", "inv", "neg"):
        return mk_powc(x[1]) if kind != "powc" else x
    return ("powc", x)


def mk_add(a, b):
    if a == C and b == C:
        return C
    if a == C:
        return mk_shift(b)
    if b == C:
        return mk_shift(a)
    if a[0] == "shift":
        return mk_shift(mk_add(a[1], b))
    if b[0] == "shift":
        return mk_shift(mk_add(a, b[1]))
    return ("add2",) + _sorted(a, b)


def mk_mul(a, b):
    if a == C and b == C:
        return C
    if a == C:
        return mk_scale(b)
    if b == C:
        return mk_scale(a)
    for x, y in ((a, b), (b, a)):
        if x[0] == "scale":
            return mk_scale(mk_mul(x[1], y))
        if x[0] == "neg":
            return mk_neg(mk_mul(x[1], y))
    if a[0] == "exp" and b[0] == "exp":
        return mk_exp(mk_add(a[1], b[1]))
    if a[0] == "inv" and b[0] == "inv":
        return mk_inv(mk_mul(a[1], b[1]))
    return ("mul2",) + _sorted(a, b)


def mk_pow(a, b):
    """Protected ``|a| ** b``."""
    if b == C:
        return mk_powc(a)
    if a == C:
        return mk_exp(mk_scale(b))
    return ("pow2", a, b)


def normal_form(expr):
    """Structural normal form (nested tuples) of an expression."""
    if isinstance(expr, str):
        expr = parse(expr)
    elif isinstance(expr, ExpressionTree):
        expr = expr.to_expr()
    return _nf(expr)


def _nf(e):
    k = e.kind
    if k == "t":
        return T
    if k == "c":
        return C
    a = _nf(e.children[0])
    if k == "exp":
        return mk_exp(a)
    if k == "log_p":
        return mk_log(a)
    b = _nf(e.children[1])
    if k == "add":
        return mk_add(a, b)
    if k == "sub":
        return mk_add(a, mk_neg(b))
    if k == "mul":
        return mk_mul(a, b)
    if k == "div":
        return mk_mul(a, mk_inv(b))
    if k == "div_m":
        return mk_mul(b, mk_inv(a))
    if k == "exp_prod":
        return mk_exp(mk_mul(a, b))
    if k == "pow":
        return mk_pow(a, b)
    if k == "pow_m":
        return mk_pow(b, a)
    raise ValueError(f"unknown node kind {k!r}")


SKELETONS = {
    # c1 / (1 + exp(-c2 (t - c3)))
    "logistic": ("scale", ("inv", ("shift", ("exp", ("scale", T))))),
    # c1 exp(-c2 exp(-c3 t))
    "gompertz": ("scale", ("exp", ("scale", ("exp", ("scale", T))))),
}

SKELETON_EXPRESSIONS = {
    "logistic": "div_m((exp_prod((t - c0), c1) + c2), c3)",
    "gompertz": "(exp((exp_prod(t, c0) * c1)) * c2)",
}


@dataclass(frozen=True)
class CanonicalClass:
    tag: str
    key: str


def classify(expr):
    """Class tag (``logistic``, ``gompertz`` or ``other``) by structural matching."""
    nf = normal_form(expr)
    for tag, skeleton in SKELETONS.items():
        if nf == skeleton:
            return CanonicalClass(tag, render(nf))
    return CanonicalClass("other", render(nf))


def behavioral_class(expr, n_probes=3, budget=50_000, tol=1e-9, seed=0):
    """Secondary check: which target classes ``expr`` can reproduce exactly.

    Fits ``expr`` to noiseless probes of each class (12 ages over 0..100,
    random constants) and returns the tags whose every probe reaches a
    relative MSE below ``tol``. This tests that the expression's family
    contains the class, not the reverse inclusion.
    """
    if isinstance(expr, str):
        expr = parse(expr)
    elif isinstance(expr, ExpressionTree):
        expr = expr.to_expr()
    rng = np.random.default_rng(seed)
    ages = np.linspace(5.0, 95.0, 12)
    found = []
    for tag, fn in (("logistic", eval_logistic), ("gompertz", eval_gompertz)):
        ok = True
        for _ in range(n_probes):
            c1 = rng.uniform(5, 50)
            rate = rng.uniform(0.05, 0.3)
            mid = rng.uniform(30, 70)
            c = (c1, rate, mid) if tag == "logistic" else (c1, float(np.exp(rate * mid)), rate)
            y = fn(ages, *c)
            if expr.n_constants == 0:
                ok = False
                break
            sol = fit_constants(RVProblem(expr, ages, y, constraints=NO_CONSTRAINTS, budget=budget),
                                rng)
            if sol.fitness > tol * float(np.mean(y * y)):
                ok = False
                break
        if ok:
            found.append(tag)
    return found


def archive_keys(archive):
    """Expression keys of every tree in an archive, ``front.json`` rows or entries."""
    keys = []
    for e in archive:
        ks = e["expressions"] if isinstance(e, dict) else e.keys
        keys.extend(ks)
    return keys


def recovery_of(archive):
    """Found flags and matching keys for one archive."""
    matched = {"logistic": [], "gompertz": []}
    for key in sorted(set(archive_keys(archive))):
        tag = classify(key).tag
        if tag in matched:
            matched[tag].append(key)
    return {
        "found_logistic": bool(matched["logistic"]),
        "found_gompertz": bool(matched["gompertz"]),
        "found_both": bool(matched["logistic"] and matched["gompertz"]),
        "matched": matched,
    }


def count_recoveries(archives, truth_tags=("logistic", "gompertz")):
    """Per-run recovery flags and the counts over runs."""
    runs = [recovery_of(a) for a in archives]
    counts = {f"found_{t}": sum(r[f"found_{t}"] for r in runs) for t in truth_tags}
    counts["found_both"] = sum(r["found_both"] for r in runs)
    return {"runs": runs, "counts": counts, "n_runs": len(runs)}


def write_recovery(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


__all__ = ["CanonicalClass", "classify", "normal_form", "behavioral_class", "count_recoveries",
           "recovery_of", "write_recovery", "SKELETONS", "SKELETON_EXPRESSIONS", "Expr"]
