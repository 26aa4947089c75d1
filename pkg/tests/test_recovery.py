import json

import numpy as np
import pytest

from fclearn.dataset import eval_gompertz, eval_logistic
from fclearn.expr import evaluate, parse
from fclearn.recovery import (SKELETON_EXPRESSIONS, behavioral_class, classify, count_recoveries,
                              normal_form, recovery_of, write_recovery)

FC1 = "div_m(exp_prod(pow(t, c0), c1), c2)"
FC3 = "div_m(exp_prod(exp_prod((t / c0), c1), c2), c3)"
FC4 = "(exp_prod(exp_prod((t / c0), c1), c2) * c3)"


def test_skeletons_reproduce_their_generators():
    t = np.linspace(0, 100, 11)
    logi = parse(SKELETON_EXPRESSIONS["logistic"])
    # div_m((exp_prod((t - c0), c1) + c2), c3) = c3 / (exp((t - c0) c1) + c2)
    np.testing.assert_allclose(evaluate(logi, [50.0, -0.2, 1.0, 10.0], t),
                               eval_logistic(t, 10.0, 0.2, 50.0), rtol=1e-12)
    gomp = parse(SKELETON_EXPRESSIONS["gompertz"])
    # (exp((exp_prod(t, c0) * c1)) * c2) = c2 exp(c1 exp(c0 t))
    np.testing.assert_allclose(evaluate(gomp, [-0.1, -200.0, 30.0], t),
                               eval_gompertz(t, 30.0, 200.0, 0.1), rtol=1e-12)


@pytest.mark.parametrize("tag", ["logistic", "gompertz"])
def test_skeletons_classify(tag):
    assert classify(SKELETON_EXPRESSIONS[tag]).tag == tag


@pytest.mark.parametrize("key,tag", [
    (FC3, "gompertz"),
    (FC4, "gompertz"),
    (FC1, "other"),
    ("(c0 / (pow_m(t, c1) + c2))", "logistic"),
    ("div_m((exp(t) + c0), c1)", "other"),
    ("(t * c0)", "other"),
    ("div_m((exp_prod(t, c0) + c1), c2)", "logistic"),
    ("(c0 * exp_prod(exp_prod(t, c1), c2))", "gompertz"),
    ("(exp_prod(exp_prod(t, c0), c1) - c2)", "other"),
])
def test_classification(key, tag):
    assert classify(key).tag == tag


def test_fc3_and_fc4_share_a_normal_form():
    assert normal_form(FC3) == normal_form(FC4)


def test_classification_is_sound_on_probes():
    # anything labelled as a class must be able to reproduce that class exactly
    for key in (FC3, "(c0 / (pow_m(t, c1) + c2))"):
        tag = classify(key).tag
        assert tag in behavioral_class(key, n_probes=1, budget=60_000, tol=1e-8)


def test_recovery_flags():
    both = [{"expressions": [SKELETON_EXPRESSIONS["logistic"], SKELETON_EXPRESSIONS["gompertz"]]}]
    r = recovery_of(both)
    assert r["found_logistic"] and r["found_gompertz"] and r["found_both"]
    assert not recovery_of([])["found_logistic"]
    only = recovery_of([{"expressions": [FC3, "(t * c0)"]}])
    assert only["found_gompertz"] and not only["found_logistic"]


def test_counts(tmp_path):
    rep = count_recoveries([[{"expressions": [FC3]}], [], [{"expressions": [FC4]}]])
    assert rep["counts"] == {"found_logistic": 0, "found_gompertz": 2, "found_both": 0}
    write_recovery(rep, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["n_runs"] == 3
