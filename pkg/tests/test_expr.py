import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fclearn.expr import (
    DENOM_FLOOR, EXP_CLAMP, OPERATORS, POW_CLAMP, VALUE_CLAMP, CompiledExpr, ExpressionTree,
    ParseError, SubtreeCache, apply_operator, cfc, cfc_count, constant_free_subtree_outputs,
    evaluate, full_template, left_deep_template, legal_symbols, make_template, node, parse,
    random_tree, simplify, to_infix_key, tree_from_symbols, var,
)


def test_left_deep_height_four_has_nine_nodes():
    tpl = left_deep_template(4)
    assert tpl.size == 9
    assert tpl.internal_positions == [0, 1, 2, 3]
    assert tpl.terminal_positions == [4, 5, 6, 7, 8]
    # every right child is a terminal
    assert all(not tpl.is_internal(tpl.right[i]) for i in tpl.internal_positions)


def test_full_template_sizes():
    tpl = full_template(3)
    assert tpl.size == 15
    assert len(tpl.internal_positions) == 7
    with pytest.raises(ValueError):
        make_template("ring", 3)


def test_legal_symbols_split_by_position():
    tpl = left_deep_template(2)
    assert len(legal_symbols(tpl, 0)) == len(OPERATORS)
    assert len(legal_symbols(tpl, 2)) == 2


def test_illegal_genes_rejected():
    tpl = left_deep_template(1)
    with pytest.raises(ValueError):
        tree_from_symbols(["t", "t", "c"], tpl)
    with pytest.raises(ValueError):
        tree_from_symbols(["add", "mul", "c"], tpl)


def test_scale_times_t():
    e = parse("(c0 * t)")
    np.testing.assert_allclose(evaluate(e, [2.0], [1.0, 3.0]), [2.0, 6.0])


def test_fc1_with_zero_rate_is_constant():
    # c1 / exp(c2 * t^c3) with c1 = 1, c2 = 0
    e = parse("div_m(exp_prod(pow(t, c0), c1), c2)")
    t = np.linspace(0, 100, 11)
    np.testing.assert_allclose(evaluate(e, [3.7, 0.0, 1.0], t), np.ones_like(t))


def test_exp_prod_encodes_power_of_constant():
    # exp(t * ln 2) at t = 1 is 2
    e = parse("exp_prod(t, c0)")
    assert evaluate(e, [math.log(2.0)], [1.0])[0] == pytest.approx(2.0, abs=1e-12)


def test_protected_division_floor():
    out = apply_operator("div", np.array([1.0, 1.0, 1.0]), np.array([0.0, 1e-12, -1e-12]))
    np.testing.assert_allclose(out, [1 / DENOM_FLOOR, 1 / DENOM_FLOOR, -1 / DENOM_FLOOR])


def test_protected_log_and_pow():
    assert apply_operator("log_p", np.array([0.0]))[0] == pytest.approx(math.log(DENOM_FLOOR))
    assert apply_operator("log_p", np.array([-math.e]))[0] == pytest.approx(1.0)
    assert apply_operator("pow", np.array([-2.0]), np.array([2.0]))[0] == pytest.approx(4.0)
    assert apply_operator("pow", np.array([10.0]), np.array([400.0]))[0] == POW_CLAMP
    assert apply_operator("pow_m", np.array([2.0]), np.array([3.0]))[0] == pytest.approx(9.0)


def test_exp_argument_clamped():
    assert apply_operator("exp", np.array([1e6]))[0] == pytest.approx(min(math.exp(EXP_CLAMP),
                                                                          VALUE_CLAMP))
    assert apply_operator("exp", np.array([-1e6]))[0] == pytest.approx(math.exp(-EXP_CLAMP))


@given(st.sampled_from(OPERATORS),
       st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2,
                max_size=2))
def test_operators_always_finite(op, args):
    a, b = (np.array([x]) for x in args)
    out = apply_operator(op, a) if op in ("exp", "log_p") else apply_operator(op, a, b)
    assert np.all(np.isfinite(out))
    assert np.all(np.abs(out) <= VALUE_CLAMP)


def test_cfc_counts():
    assert cfc_count(parse("((t + c0) * c1)")) == 2
    assert cfc_count(parse("(t * t)")) == 0
    assert cfc_count(node("add", cfc(0), cfc(1))) == 1


def test_simplify_rules():
    assert simplify(node("add", cfc(0), cfc(1))).key == "c0"
    assert simplify(parse("(t + c0)")).key == "(t + c0)"
    e = node("add", node("mul", cfc(0), cfc(1)), var())
    assert simplify(e).key == "(c0 + t)"


def test_simplify_preserves_optimal_fit(rng):
    # (c0 * c1) + t and c0 + t reach the same best fit: c0*c1 = c
    t = rng.uniform(0, 10, 8)
    y = t + 3.25
    full = node("add", node("mul", cfc(0), cfc(1)), var())
    simple = simplify(full)
    assert np.allclose(evaluate(full, [1.3, 2.5], t), evaluate(simple, [3.25], t))
    assert np.allclose(evaluate(simple, [3.25], t), y)


def test_keys_are_syntactic():
    assert parse("(t + c0)").key != parse("(c0 + t)").key
    rng = np.random.default_rng(0)
    tree = random_tree(rng, 4)
    clone = ExpressionTree(tree.genes.copy(), tree.template)
    assert clone.to_expr().key == tree.to_expr().key


@pytest.mark.parametrize("text", ["(t + c0", "((t))", "(t + c0))", "foo(t, c0)", "exp(t, c0)",
                                  "(t ^ c0)", ""])
def test_parser_rejects(text):
    with pytest.raises(ParseError):
        parse(text)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.sampled_from(["left_deep", "full"]))
def test_round_trip(seed, height, tag):
    tree = random_tree(np.random.default_rng(seed), height, tag)
    key = to_infix_key(tree.to_expr())
    assert parse(key).key == key
    raw = tree.to_expr(simplified=False)
    assert parse(raw.key).key == raw.key


@given(st.integers(0, 2**32 - 1))
def test_simplify_idempotent(seed):
    tree = random_tree(np.random.default_rng(seed), 4, "full")
    once = simplify(tree.to_expr(simplified=False))
    assert simplify(once).key == once.key


def _brute(e, c, t):
    if e.kind == "t":
        return t
    if e.kind == "c":
        return np.full_like(t, c[e.slot])
    return apply_operator(e.kind, *(_brute(ch, c, t) for ch in e.children))


@given(st.integers(0, 2**32 - 1))
def test_compiled_matches_recursive_interpreter(seed):
    rng = np.random.default_rng(seed)
    e = random_tree(rng, 4).to_expr()
    t = rng.uniform(0, 100, 7)
    c = rng.uniform(-5, 5, max(e.n_constants, 1))
    np.testing.assert_allclose(evaluate(e, c, t), _brute(e, c, t), rtol=1e-12, atol=0)


def test_compiled_batch_rows_are_independent(rng):
    e = parse("((exp_prod(t, c0) + c1) * c2)")
    t = np.linspace(0, 10, 5)
    C = rng.normal(size=(6, 3))
    f = CompiledExpr(e, t)
    out = f(C)
    for row, c in zip(out, C):
        np.testing.assert_allclose(row, evaluate(e, c, t))


def test_subtree_cache_reuses_constant_free_parts():
    cache = SubtreeCache()
    e = parse("(exp(t) * c0)")
    t = np.arange(5.0)
    first = constant_free_subtree_outputs(e, t, "d", cache)
    assert list(first) == ["exp(t)"]
    constant_free_subtree_outputs(e, t, "d", cache)
    assert cache.misses == 1 and cache.hits == 1
    np.testing.assert_allclose(first["exp(t)"], np.exp(t))


def test_subtree_cache_only_terminal_when_constants_everywhere():
    e = parse("((((t + c0) * c1) - c2) / c3)")
    assert constant_free_subtree_outputs(e, np.arange(3.0), "x", SubtreeCache()) == {}


def test_evaluate_needs_enough_constants():
    with pytest.raises(ValueError):
        evaluate(parse("(t * c1)"), [1.0], [1.0])
