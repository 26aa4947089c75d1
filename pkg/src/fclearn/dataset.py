"""Local/global growth data sets, the train/validation/test split rule, CSV
loading and synthetic logistic/Gompertz generation.

Indices in :class:`SplitView` are 0-based positions into the local set.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import DEFAULT_CONSTRAINTS, function_violations
from .expr import EXP_CLAMP

logger = logging.getLogger(__name__)

CLASS_TAGS = ("logistic", "gompertz")

# ground-truth sampling ranges
SCALE_RANGE = (0.5, 50.0)        # c1, maximum volume (cc)
RATE_RANGE = (0.05, 0.5)         # logistic c2 / Gompertz c3 (1/years)
INFLECTION_RANGE = (20.0, 80.0)  # age of the inflection point (years)
AGE_RANGE = (30.0, 80.0)
MAX_GOMPERTZ_SHIFT = 1e4         # keep Gompertz c2 inside the CFC bounds


class DataError(ValueError):
    """Malformed or unusable input data."""


def _exp(x):
    return np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))


def eval_logistic(t, c1, c2, c3):
    """``c1 / (1 + exp(-c2 (t - c3)))`` with the exponent clamped."""
    t = np.asarray(t, dtype=float)
    return c1 / (1.0 + _exp(-c2 * (t - c3)))


def eval_gompertz(t, c1, c2, c3):
    """``c1 exp(-c2 exp(-c3 t))`` with both exponents clamped."""
    t = np.asarray(t, dtype=float)
    return c1 * _exp(-c2 * _exp(-c3 * t))


CLASS_FUNCTIONS = {"logistic": eval_logistic, "gompertz": eval_gompertz}


@dataclass(frozen=True)
class LocalDataSet:
    id: str
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if t.size == 0 or t.shape != y.shape:
            raise DataError(f"set {self.id!r}: need matching, non-empty t and y")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise DataError(f"set {self.id!r}: non-finite values")
        if np.any(np.diff(t) <= 0):
            raise DataError(f"set {self.id!r}: ages must be strictly increasing")
        t.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    @property
    def n(self):
        return len(self.t)


@dataclass(frozen=True)
class SplitView:
    train: tuple
    validation: tuple
    test: tuple
    n_rv: int


def split(local, n_rv):
    """Prefix split: the first ``n_rv`` points train the constants.

    With ``n == n_rv + 1`` the last point validates and there is no test
    point; with more points, points ``n_rv .. n-2`` validate and the last
    one is the test point. Returns ``None`` when ``n < n_rv + 1``.
    """
    if n_rv < 3:
        raise ValueError("n_rv must be at least 3")
    n = local.n if isinstance(local, LocalDataSet) else int(local)
    if n < n_rv + 1:
        return None
    train = tuple(range(n_rv))
    if n == n_rv + 1:
        return SplitView(train, (n_rv,), (), n_rv)
    return SplitView(train, tuple(range(n_rv, n - 1)), (n - 1,), n_rv)


@dataclass(frozen=True)
class GlobalDataSet:
    sets: tuple
    splits: tuple
    n_rv: int
    excluded: tuple = ()

    @classmethod
    def from_sets(cls, sets, n_rv):
        kept, views, dropped = [], [], []
        for s in sets:
            view = split(s, n_rv)
            if view is None:
                logger.warning("set %s has %d points (< n_rv + 1 = %d); excluded", s.id, s.n, n_rv + 1)
                dropped.append(s.id)
                continue
            kept.append(s)
            views.append(view)
        if not kept:
            raise DataError("no local data sets")
        return cls(tuple(kept), tuple(views), n_rv, tuple(dropped))

    def __len__(self):
        return len(self.sets)

    def part(self, m, which):
        """``(t, y)`` of set ``m`` for ``which`` in train/validation/test/all."""
        s = self.sets[m]
        if which == "all":
            return s.t, s.y
        idx = list(getattr(self.splits[m], which))
        return s.t[idx], s.y[idx]


@dataclass(frozen=True)
class GroundTruthSpec:
    class_tag: str
    c1: float
    c2: float
    c3: float
    sample_ages: tuple = field(default=())

    def __post_init__(self):
        if self.class_tag not in CLASS_TAGS:
            raise ValueError(f"unknown class {self.class_tag!r}")

    def __call__(self, t):
        return CLASS_FUNCTIONS[self.class_tag](t, self.c1, self.c2, self.c3)

    def violations(self, constraints=DEFAULT_CONSTRAINTS):
        return function_violations(self, constraints)

    def to_json(self):
        return {"class": self.class_tag, "c1": self.c1, "c2": self.c2, "c3": self.c3,
                "ages": list(self.sample_ages)}

    @classmethod
    def from_json(cls, d):
        return cls(d["class"], float(d["c1"]), float(d["c2"]), float(d["c3"]),
                   tuple(float(a) for a in d.get("ages", ())))


def sample_truth_specs(n_sets, rng, n_points=6, constraints=DEFAULT_CONSTRAINTS):
    """Draw ``n_sets`` constraint-satisfying ground truths, alternating classes.

    Logistic: ``c1`` in the scale range, rate ``c2`` and midpoint ``c3`` from
    their ranges. Gompertz: ``c1`` likewise, rate ``c3`` and an inflection
    age ``a`` from the same ranges, giving ``c2 = exp(c3 a)``. Draws that
    violate a constraint (or put ``c2`` outside the CFC bounds) are redrawn.
    """
    rng = np.random.default_rng(rng)
    specs = []
    for i in range(n_sets):
        tag = CLASS_TAGS[i % 2]
        while True:
            c1 = rng.uniform(*SCALE_RANGE)
            rate = rng.uniform(*RATE_RANGE)
            age = rng.uniform(*INFLECTION_RANGE)
            if tag == "logistic":
                c2, c3 = rate, age
            else:
                c2, c3 = math.exp(rate * age), rate
                if c2 > MAX_GOMPERTZ_SHIFT:
                    continue
            ages = tuple(np.sort(rng.uniform(*AGE_RANGE, size=n_points)).tolist())
            spec = GroundTruthSpec(tag, c1, c2, c3, ages)
            if spec.violations(constraints) == 0:
                specs.append(spec)
                break
    return specs


def generate_synthetic(specs, noise_sigma=0.0, rng_seed=None, n_rv=4,
                       constraints=DEFAULT_CONSTRAINTS):
    """Sample every spec at its ages with multiplicative Gaussian noise.

    ``y = f(t) (1 + eps)``, ``eps ~ N(0, noise_sigma)``, negative results
    clamped to 0. Specs violating a growth constraint are rejected.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(rng_seed)
    sets = []
    for i, spec in enumerate(specs):
        if spec.violations(constraints):
            raise DataError(f"ground truth {i} ({spec.class_tag}) violates the growth constraints")
        t = np.asarray(spec.sample_ages, dtype=float)
        y = spec(t)
        if noise_sigma > 0:
            y = np.maximum(y * (1.0 + rng.normal(0.0, noise_sigma, size=y.shape)), 0.0)
        sets.append(LocalDataSet(f"s{i:03d}", t, y))
    return GlobalDataSet.from_sets(sets, n_rv)


def save_csv(data, path):
    sets = data.sets if isinstance(data, GlobalDataSet) else data
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set_id", "t", "y"])
        for s in sets:
            for t, y in zip(s.t, s.y):
                w.writerow([s.id, repr(float(t)), repr(float(y))])


def save_truth(specs, ids, path):
    """JSON sidecar mapping set id to its ground truth."""
    payload = {i: s.to_json() for i, s in zip(ids, specs)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_truth(path):
    with open(path, encoding="utf-8") as fh:
        return {k: GroundTruthSpec.from_json(v) for k, v in json.load(fh).items()}


def read_sets(path):
    """Read a ``set_id,t,y`` CSV into a list of :class:`LocalDataSet`.

    Rows may come in any order; each set is sorted by age. Duplicate ages
    within a set are an error.
    """
    groups = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("no local data sets")
        if [h.strip() for h in header] != ["set_id", "t", "y"]:
            raise DataError(f"line 1: expected header 'set_id,t,y', got {','.join(header)!r}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"line {line}: expected 3 fields, got {len(row)}")
            sid = row[0].strip()
            if not sid:
                raise DataError(f"line {line}: empty set_id")
            try:
                t, y = float(row[1]), float(row[2])
            except ValueError:
                raise DataError(f"line {line}: could not parse number in {row!r}") from None
            if not (math.isfinite(t) and math.isfinite(y)):
                raise DataError(f"line {line}: non-finite value")
            pts = groups.setdefault(sid, {})
            if t in pts:
                raise DataError(f"line {line}: duplicate age {t} in set {sid!r}")
            pts[t] = y
    if not groups:
        raise DataError("no local data sets")
    sets = []
    for sid, pts in groups.items():
        ages = sorted(pts)
        sets.append(LocalDataSet(sid, np.array(ages), np.array([pts[a] for a in ages])))
    return sets


def load_global(path, n_rv=4):
    """Read a ``set_id,t,y`` CSV into a :class:`GlobalDataSet` (see :func:`read_sets`)."""
    return GlobalDataSet.from_sets(read_sets(path), n_rv)
