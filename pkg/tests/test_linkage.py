import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import mutual_info_score

from fclearn.linkage import (gaussian_linkage_tree, learn_linkage_tree, mi_matrix, pairwise_mi,
                             univariate_fos, upgma)


def test_identical_columns_give_entropy():
    col = np.array([0, 1, 1, 2, 2, 2])
    p = np.array([1, 2, 3]) / 6
    h = -(p * np.log(p)).sum()
    g = np.stack([col, col], axis=1)
    assert pairwise_mi(g, 0, 1) == pytest.approx(h, abs=1e-12)


def test_negated_binary_column_carries_full_information(rng):
    a = rng.integers(0, 2, 1000)
    g = np.stack([a, 1 - a], axis=1)
    p = np.bincount(a) / len(a)
    assert pairwise_mi(g, 0, 1) == pytest.approx(-(p * np.log(p)).sum(), abs=1e-12)


def test_constant_column_has_zero_mi(rng):
    g = np.stack([np.zeros(50, int), rng.integers(0, 4, 50)], axis=1)
    assert pairwise_mi(g, 0, 1) == 0.0


def test_independent_columns_near_zero(rng):
    g = rng.integers(0, 2, size=(100_000, 2))
    assert pairwise_mi(g, 0, 1) < 1e-3


@given(st.integers(0, 2**32 - 1))
def test_mi_matrix_matches_sklearn(seed):
    rng = np.random.default_rng(seed)
    g = rng.integers(0, 4, size=(40, 5))
    g[:, 3] = (g[:, 0] + rng.integers(0, 2, 40)) % 4
    M = mi_matrix(g)
    for i in range(5):
        for j in range(i + 1, 5):
            assert M[i, j] == pytest.approx(mutual_info_score(g[:, i], g[:, j]), abs=1e-12)
            assert M[j, i] == M[i, j]


def test_correlated_pair_merges_first(rng):
    g = rng.integers(0, 5, size=(300, 6))
    g[:, 4] = g[:, 1]
    fos = learn_linkage_tree(g)
    assert fos.subsets[6] == (1, 4)
    assert fos.merges[0][:2] == ((1,), (4,))


def test_two_positions_only_leaves():
    fos = learn_linkage_tree(np.array([[0, 1], [1, 0], [1, 1]]))
    assert fos.subsets == ((0,), (1,))


@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_linkage_tree_structure(L, seed):
    rng = np.random.default_rng(seed)
    fos = learn_linkage_tree(rng.integers(0, 3, size=(30, L)))
    assert len(fos) == 2 * L - 2
    assert tuple(range(L)) not in fos.subsets
    assert fos.subsets[:L] == tuple((i,) for i in range(L))
    # every merged subset is the union of two earlier disjoint subsets
    seen = set(fos.subsets[:L])
    for s in fos.subsets[L:]:
        assert any(set(a) | set(b) == set(s) and not set(a) & set(b)
                   for a in seen for b in seen)
        seen.add(s)


def test_ties_break_by_lowest_positions():
    fos = upgma(np.zeros((4, 4)))
    assert fos.subsets[4] == (0, 1)


def test_gaussian_linkage_groups_correlated(rng):
    x = rng.normal(size=(500, 4))
    x[:, 2] = x[:, 0] * 2 + 0.01 * rng.normal(size=500)
    assert gaussian_linkage_tree(x).subsets[4] == (0, 2)


def test_univariate():
    assert univariate_fos(3).subsets == ((0,), (1,), (2,))


def test_json_dump():
    d = learn_linkage_tree(np.array([[0, 1, 2], [1, 1, 0], [2, 0, 1]])).to_json()
    assert d["kind"] == "linkage_tree"
    assert len(d["merges"]) == 2
