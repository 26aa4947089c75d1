"""Bi-objective utilities: constrained domination, elitist archives and the
exact two-dimensional hypervolume.

Objectives are ``(mse_global, dmse_global)``, both minimised; the violation
count takes priority over both.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ObjectivePair:
    mse_global: float
    dmse_global: float
    violations: int = 0

    def as_tuple(self):
        return (self.mse_global, self.dmse_global)


def constrained_dominates(a, b):
    """``a`` has fewer violations, or equal violations and Pareto-dominates ``b``."""
    if a.violations != b.violations:
        return a.violations < b.violations
    return (a.mse_global <= b.mse_global and a.dmse_global <= b.dmse_global
            and (a.mse_global < b.mse_global or a.dmse_global < b.dmse_global))


def constrained_worse(a, b):
    """``a`` is constrained-dominated by ``b``."""
    return constrained_dominates(b, a)


@dataclass
class ArchiveEntry:
    objectives: ObjectivePair
    keys: tuple
    payload: object = None
    full_data: bool = False

    def identity(self):
        return (self.objectives.as_tuple(), self.objectives.violations, self.keys)


@dataclass
class ParetoArchive:
    """Elitist archive of mutually non-dominated entries.

    Exact duplicates (same objectives and expression keys) are rejected, so
    the first-inserted copy is kept. ``persistent`` archives only take
    entries evaluated on the full data.
    """

    scope: str = "generation"
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if self.scope not in ("generation", "persistent"):
            raise ValueError(f"unknown archive scope {self.scope!r}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def clear(self):
        self.entries = []

    def would_accept(self, objectives, keys=None):
        for e in self.entries:
            if constrained_dominates(e.objectives, objectives):
                return False
            if keys is not None and e.objectives == objectives and e.keys == tuple(keys):
                return False
        return True

    def insert(self, entry):
        """Insert ``entry``; returns whether it was accepted."""
        if self.scope == "persistent" and not entry.full_data:
            raise ValueError("persistent archive entries must be evaluated on all local sets")
        if not self.would_accept(entry.objectives, entry.keys):
            return False
        self.entries = [e for e in self.entries
                        if not constrained_dominates(entry.objectives, e.objectives)]
        self.entries.append(entry)
        return True

    def feasible(self):
        return [e for e in self.entries if e.objectives.violations == 0]

    def infeasible(self):
        return [e for e in self.entries if e.objectives.violations > 0]

    def points(self, feasible_only=True):
        es = self.feasible() if feasible_only else self.entries
        return np.array([e.objectives.as_tuple() for e in es], dtype=float).reshape(-1, 2)


def non_dominated(points):
    """Rows of an ``(n, 2)`` array not Pareto-dominated by another row (duplicates kept once)."""
    p = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(p) == 0:
        return p
    order = np.lexsort((p[:, 1], p[:, 0]))
    p = p[order]
    keep, best = [], np.inf
    for row in p:
        if row[1] < best:
            keep.append(row)
            best = row[1]
    return np.array(keep)


def normalization_bounds(fronts):
    """Per-objective ``(min, max)`` over the non-dominated union of ``fronts``."""
    pts = [np.asarray(f, dtype=float).reshape(-1, 2) for f in fronts]
    pts = [p for p in pts if len(p)]
    if not pts:
        raise ValueError("no points to normalise")
    nd = non_dominated(np.vstack(pts))
    return nd.min(axis=0), nd.max(axis=0)


def normalize(points, bounds):
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    span = hi - lo
    with np.errstate(all="ignore"):
        out = np.where(span > 0, (p - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out


def hypervolume(points, bounds=None, reference=(1.0, 1.0)):
    """Exact area dominated by ``points`` inside the box up to ``reference``.

    With ``bounds`` the points are first normalised; coordinates are then
    clipped to ``[0, 1]`` (or to the reference box).
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if bounds is not None:
        p = normalize(p, bounds)
    ref = np.asarray(reference, dtype=float)
    if len(p) == 0:
        return 0.0
    p = np.clip(p, 0.0, ref)
    nd = non_dominated(p)
    # sorted by first objective ascending, second descending
    area = 0.0
    for i, (x, y) in enumerate(nd):
        x_next = nd[i + 1, 0] if i + 1 < len(nd) else ref[0]
        area += (x_next - x) * (ref[1] - y)
    return float(area)


def archive_hypervolume(archive, bounds):
    return hypervolume(archive.points(), bounds)


def front_to_json(archive):
    """Plain-data export of an archive, feasible entries first, sorted by objectives."""
    rows = []
    for e in archive.entries:
        payload = e.payload if isinstance(e.payload, dict) else {}
        rows.append({
            "expressions": list(e.keys),
            "objectives": {"mse_global": e.objectives.mse_global,
                           "dmse_global": e.objectives.dmse_global},
            "violations": e.objectives.violations,
            "per_set_mse": payload.get("per_set_mse"),
        })
        if "per_set_constants" in payload:
            rows[-1]["per_set_constants"] = payload["per_set_constants"]
            rows[-1]["set_ids"] = payload["set_ids"]
    rows.sort(key=lambda r: (r["violations"], r["objectives"]["mse_global"],
                             r["objectives"]["dmse_global"], r["expressions"]))
    return rows


def write_front(archive, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(front_to_json(archive), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_front(path):
    """Objective points (feasible only) and raw rows of a ``front.json``."""
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    pts = np.array([(r["objectives"]["mse_global"], r["objectives"]["dmse_global"])
                    for r in rows if r["violations"] == 0], dtype=float).reshape(-1, 2)
    return pts, rows


def write_hv_csv(values, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "hv"])
        for g, hv in values:
            w.writerow([g, repr(float(hv))])
