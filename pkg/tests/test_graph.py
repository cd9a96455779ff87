from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given

from ocdist.graph import (DirectedGraph, GraphError, format_graph, incidence, laplacian, mixing_matrix,
                          parse_graph, random_balanced_graph, second_singular_value, validate)

from conftest import balanced_graphs


def test_validate_examples(pair, cycle3):
    assert validate(pair).ok
    one_way = validate(DirectedGraph.from_edges(2, [(0, 1)]))
    assert not one_way.balanced and not one_way.strongly_connected
    assert "node" in one_way.witness
    d = validate(cycle3)
    assert d.balanced and d.strongly_connected


def test_validate_rational_weights_exact():
    # 1/3 + 1/3 + 1/3 against 1 is exact with fractions
    third = Fraction(1, 3)
    g = DirectedGraph.from_edges(2, [(0, 1, third), (0, 1, third), (0, 1, third), (1, 0, 1)])
    assert validate(g).balanced
    g = DirectedGraph.from_edges(2, [(0, 1, Fraction(1, 3)), (1, 0, Fraction(1, 3) + Fraction(1, 10**18))])
    assert not validate(g).balanced


def test_balanced_but_not_strongly_connected():
    g = DirectedGraph.from_edges(4, [(0, 1), (1, 0), (2, 3), (3, 2)])
    d = validate(g)
    assert d.balanced and not d.strongly_connected
    assert "unreachable" in d.witness


def test_graph_preconditions():
    with pytest.raises(GraphError):
        DirectedGraph(1, {})
    with pytest.raises(GraphError):
        DirectedGraph.from_edges(2, [(0, 0)])
    with pytest.raises(GraphError):
        DirectedGraph.from_edges(2, [(0, 1, 0)])
    with pytest.raises(GraphError):
        DirectedGraph.from_edges(2, [(0, 2)])


def test_laplacian_examples(pair, cycle3):
    np.testing.assert_array_equal(laplacian(pair), [[2, -2], [-2, 2]])
    L = laplacian(cycle3)
    np.testing.assert_array_equal(np.diag(L), [2, 2, 2])
    np.testing.assert_array_equal(L[~np.eye(3, dtype=bool)], -np.ones(6))
    with pytest.raises(GraphError):
        laplacian(DirectedGraph.from_edges(4, [(0, 1), (1, 0), (2, 3), (3, 2)]), require_connected=True)


def test_incidence_examples(pair, cycle3):
    np.testing.assert_array_equal(incidence(pair).matrix, [[1, -1], [-1, 1]])
    B = incidence(cycle3).matrix
    assert B.shape == (3, 3)
    assert incidence(cycle3).edges == ((0, 1), (1, 2), (2, 0))
    np.testing.assert_array_equal(B, [[1, -1, 0], [0, 1, -1], [-1, 0, 1]])


def test_edge_errors_and_expand(cycle3):
    inc = incidence(cycle3)
    x = np.array([[1.0, 2.0], [3.0, 5.0], [0.0, -1.0]])
    e = inc.edge_errors(x)
    np.testing.assert_array_equal(e, [[-2, -3], [3, 6], [-1, -3]])
    np.testing.assert_allclose(inc.expand(2) @ x.ravel(), e.ravel())


@given(balanced_graphs())
def test_incidence_laplacian_properties(g):
    inc = incidence(g)
    B = inc.matrix
    assert np.all((B == 1).sum(axis=1) == 1) and np.all((B == -1).sum(axis=1) == 1)
    L = B.T @ B
    np.testing.assert_array_equal(L, laplacian(g))
    np.testing.assert_array_equal(L, L.T)
    assert np.max(np.abs(L.sum(axis=1))) == 0
    eig = np.linalg.eigvalsh(L)
    assert eig[0] >= -1e-10
    assert eig[1] > 1e-9  # null space is exactly span{1}


@given(balanced_graphs())
def test_generated_graphs_satisfy_assumption(g):
    assert validate(g).ok


def test_mixing_examples(pair):
    np.testing.assert_allclose(mixing_matrix(pair), [[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(GraphError):
        mixing_matrix(DirectedGraph.from_edges(3, [(0, 1), (1, 0)]))  # node 2 isolated
    with pytest.raises(GraphError):
        mixing_matrix(DirectedGraph.from_edges(2, [(0, 1)]))
    g = random_balanced_graph(6, np.random.default_rng(4))
    W = mixing_matrix(g)
    # power iteration on W - J estimates sigma_2 independently of the SVD
    D = W - np.full((6, 6), 1 / 6)
    v = np.random.default_rng(0).standard_normal(6)
    for _ in range(500):
        v = D.T @ (D @ v)
        v /= np.linalg.norm(v)
    sigma2 = np.sqrt(np.linalg.norm(D.T @ (D @ v)))
    assert sigma2 < 1
    assert sigma2 == pytest.approx(second_singular_value(W), rel=1e-8)


@given(balanced_graphs())
def test_mixing_properties(g):
    W = mixing_matrix(g)
    assert W.min() >= 0
    assert np.max(np.abs(W.sum(axis=0) - 1)) <= 1e-12
    assert np.max(np.abs(W.sum(axis=1) - 1)) <= 1e-12
    off = (W > 0) & ~np.eye(g.n, dtype=bool)
    for i, j in zip(*np.nonzero(off)):
        assert g.is_adjacent(i, j)
    assert second_singular_value(W) < 1


def test_graph_file_roundtrip(tmp_path):
    text = "# comment\nn 3\nedge 1 2 1/2\nedge 2 3 0.5\nedge 3 1 1/2  # trailing\n"
    g = parse_graph(text)
    assert g.n == 3 and g.edges == [(0, 1), (1, 2), (2, 0)]
    assert g.weights[(0, 1)] == Fraction(1, 2)
    assert parse_graph(format_graph(g)) == g
    with pytest.raises(GraphError, match="line 2"):
        parse_graph("n 2\nedge one 2\n")
    with pytest.raises(GraphError, match="missing"):
        parse_graph("edge 1 2\n")


def test_neighbors_and_diameter(cycle3):
    assert cycle3.out_neighbors(0) == [1]
    assert cycle3.neighbors(0) == [1, 2]
    assert cycle3.diameter() == 1
    line = DirectedGraph.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    assert line.diameter() == 2
