import numpy as np
import pytest

from fclearn.constraints import DEFAULT_CONSTRAINTS, ConstraintSet, function_violations
from fclearn.dataset import eval_logistic
from fclearn.expr import parse
from fclearn.rvopt import check_constraints


def test_late_logistic_is_feasible():
    assert function_violations(lambda t: eval_logistic(t, 1.0, 1.0, 50.0)) == 0


def test_constant_volume_breaks_birth_bound_only():
    assert function_violations(lambda t: np.full_like(t, 5.0)) == 1


def test_negated_age():
    # -t is -0 at birth, which is not below zero: only monotonicity fails
    assert function_violations(lambda t: -t) == 1
    # shifted below zero at birth as well
    assert function_violations(lambda t: -t - 1.0) == 2


def test_late_bound():
    assert function_violations(lambda t: 20.0 * t) == 1
    assert function_violations(lambda t: 15.0 * t) == 0


def test_all_three():
    assert function_violations(lambda t: 3000.0 + 200.0 * t - 1.5 * t ** 2) == 3


def test_non_finite_counts_as_all():
    assert function_violations(lambda t: np.full_like(t, np.nan)) == 3


def test_batch_shape():
    v = DEFAULT_CONSTRAINTS.violations(np.vstack([np.zeros(101), np.full(101, 5.0)]))
    assert v.tolist() == [0, 1]


def test_expression_check_uses_grid():
    assert check_constraints(parse("(c0 * t)"), [2.0]) == 0
    assert check_constraints(parse("(c0 * t)"), [-2.0]) == 1


def test_grid_validation():
    with pytest.raises(ValueError):
        ConstraintSet(grid=np.arange(1.0, 101.0))
    with pytest.raises(ValueError):
        ConstraintSet(grid=np.array([0.0, 50.0, 50.0, 100.0]))
