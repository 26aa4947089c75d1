"""Growth-curve plausibility constraints.

Three checks, one violation each: the volume at birth lies in ``[0, 0.01]``
cc, the volume at age 100 stays at or below 1500 cc, and the curve never
decreases on the integer age grid ``0..100``.
"""

from dataclasses import dataclass, field

import numpy as np


def _default_grid():
    return np.arange(0.0, 101.0)


@dataclass(frozen=True)
class ConstraintSet:
    birth_max: float = 0.01
    late_age: float = 100.0
    late_max: float = 1500.0
    grid: np.ndarray = field(default_factory=_default_grid, compare=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid[0] != 0.0 or not np.any(grid == self.late_age):
            raise ValueError("constraint grid must start at age 0 and contain the late age")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("constraint grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)

    @property
    def late_index(self):
        return int(np.flatnonzero(self.grid == self.late_age)[0])

    def violations(self, values):
        """Violation counts for grid values of shape ``(P, G)`` (or ``(G,)``)."""
        v = np.atleast_2d(values)
        birth = v[:, 0]
        count = ((birth < 0.0) | (birth > self.birth_max)).astype(np.int64)
        count += (v[:, self.late_index] > self.late_max).astype(np.int64)
        count += np.any(np.diff(v, axis=1) < 0.0, axis=1).astype(np.int64)
        return count if np.ndim(values) == 2 else int(count[0])


NO_CONSTRAINTS = None
DEFAULT_CONSTRAINTS = ConstraintSet()


def function_violations(fn, constraints=DEFAULT_CONSTRAINTS):
    """Violation count of a plain callable ``fn(ages) -> volumes``."""
    with np.errstate(all="ignore"):
        values = np.asarray(fn(constraints.grid), dtype=float)
    if not np.all(np.isfinite(values)):
        return 3
    return constraints.violations(values)
