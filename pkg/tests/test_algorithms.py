import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import block_diag

from ocdist import algorithms as alg
from ocdist.consensus import ConsensusConfig
from ocdist.control import CostWeights, solve_riccati
from ocdist.graph import DirectedGraph, incidence, mixing_matrix, random_balanced_graph
from ocdist.objective import ObjectiveSet, QuadraticObjective, random_quadratics, reference_minimizer

seeds = st.integers(0, 2**32 - 1)


def setup(seed, n=None, p=None, q=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 7))
    p = p or int(rng.integers(1, 4))
    g = random_balanced_graph(n, rng)
    inc = incidence(g)
    obj = random_quadratics(n, p, 0.1, 2.0, rng)
    sol = solve_riccati(CostWeights.scaled(n, p, q=q or float(rng.uniform(0.5, 10))), inc)
    return rng, g, inc, obj, sol


def test_dgd_by_hand():
    objs = ObjectiveSet([QuadraticObjective([[1.0]], [0.0]), QuadraticObjective([[1.0]], [2.0])])
    inc = incidence(DirectedGraph.from_edges(2, [(0, 1), (1, 0)]))
    state = alg.make_state(0, np.zeros((2, 1)), inc, objs)
    nxt = alg.dgd_step(state, np.full((2, 2), 0.5), alg.StepSchedule("constant", eta=0.5))
    np.testing.assert_array_equal(nxt, [[0.0], [1.0]])


def test_dgd_fixed_point_and_zero_step():
    objs = ObjectiveSet([QuadraticObjective(np.eye(2), [1.0, -1.0])] * 3)
    inc = incidence(DirectedGraph.from_edges(3, [(0, 1), (1, 2), (2, 0)]))
    W = np.full((3, 3), 1 / 3)
    x = np.tile([1.0, -1.0], (3, 1))
    np.testing.assert_array_equal(alg.dgd_step(alg.make_state(0, x, inc, objs), W, alg.StepSchedule("constant", 0.3)), x)
    y = np.arange(6.0).reshape(3, 2)
    out = alg.dgd_step(alg.make_state(0, y, inc, objs), W, alg.StepSchedule("constant", 0.0))
    np.testing.assert_allclose(out, np.tile(y.mean(axis=0), (3, 1)))


def test_schedules_and_config_validation():
    h = alg.StepSchedule("harmonic", c=2.0)
    assert [h(k) for k in range(3)] == [2.0, 1.0, 2.0 / 3.0]
    assert sum(h(k) for k in range(10000)) > 2.0 * np.log(10000)  # divergent sum
    with pytest.raises(ValueError):
        alg.StepSchedule("harmonic", c=0)
    with pytest.raises(ValueError):
        alg.StepSchedule("cosine")
    with pytest.raises(ValueError):
        alg.AlgorithmConfig(eta=0)
    with pytest.raises(ValueError):
        alg.AlgorithmConfig(inner_cap=-1)


@given(seeds)
def test_make_state_edge_errors_exact(seed):
    rng, g, inc, obj, _ = setup(seed)
    x = rng.standard_normal((g.n, obj.p))
    st_ = alg.make_state(3, x, inc, obj)
    np.testing.assert_array_equal(st_.e, inc.edge_errors(x))
    np.testing.assert_allclose(st_.e.ravel(), inc.expand(obj.p) @ x.ravel(), atol=1e-15)
    with pytest.raises(ValueError):
        alg.make_state(0, x[:-1], inc, obj)


def test_docmc_examples():
    rng, g, inc, obj, sol = setup(7)
    n, p = g.n, obj.p
    x = rng.standard_normal((n, p))
    base = alg.make_state(0, x, inc, obj)
    # k = 0 is exactly d_0
    d0 = -np.linalg.solve(sol.gamma_P + block_diag(*base.h), np.ravel(base.g) + sol.feedback(base.e))
    np.testing.assert_allclose(alg.docmc_direction(base, sol).ravel(), d0, atol=1e-13)
    # g = 0 and e = 0 give zero at every depth
    x_c = np.tile(rng.standard_normal(p), (n, 1))
    zero = alg.IterationState(5, x_c, inc.edge_errors(x_c), np.zeros((n, p)), np.zeros((n, p)), base.h)
    assert np.max(np.abs(alg.docmc_direction(zero, sol))) == 0
    assert np.max(np.abs(alg.docmc_direction_closed(zero, sol))) == 0


@given(seeds, st.integers(0, 30))
def test_docmc_loop_equals_closed_form(seed, k):
    rng, g, inc, obj, sol = setup(seed)
    state = alg.make_state(k, rng.standard_normal((g.n, obj.p)), inc, obj)
    diff = alg.docmc_direction(state, sol) - alg.docmc_direction_closed(state, sol)
    assert np.max(np.abs(diff)) <= 1e-10
    cap = int(rng.integers(0, 5))
    diff = alg.docmc_direction(state, sol, cap) - alg.docmc_direction_closed(state, sol, cap)
    assert np.max(np.abs(diff)) <= 1e-10


def test_closed_form_large_k_is_averaged_newton():
    rng, g, inc, obj, sol = setup(3, q=1.0)
    x_c = np.tile(rng.standard_normal(obj.p), (g.n, 1))
    state = alg.make_state(4000, x_c, inc, obj)
    newton = -np.linalg.solve(state.h[0], state.g[0])
    np.testing.assert_allclose(alg.docmc_direction_closed(state, sol), np.tile(newton, (g.n, 1)), atol=1e-10)


def test_doaoc_examples():
    rng, g, inc, obj, sol = setup(11)
    eta = 1 / obj.m2
    state = alg.make_state(0, rng.standard_normal((g.n, obj.p)), inc, obj)
    expect = -eta * (np.ravel(state.g) + sol.feedback(state.e))
    np.testing.assert_allclose(alg.doaoc_direction(state, sol, eta).ravel(), expect, atol=1e-15)
    x_c = np.tile(rng.standard_normal(obj.p), (g.n, 1))
    zero = alg.IterationState(6, x_c, inc.edge_errors(x_c), np.zeros_like(x_c), np.zeros_like(x_c), state.h)
    assert np.max(np.abs(alg.doaoc_direction(zero, sol, eta))) == 0


@given(seeds, st.integers(0, 25))
def test_doaoc_stacked_equals_per_agent(seed, k):
    rng, g, inc, obj, sol = setup(seed)
    eta = float(rng.uniform(0.1, 1.9)) / obj.m2
    state = alg.make_state(k, rng.standard_normal((g.n, obj.p)), inc, obj)
    stacked = alg.doaoc_direction(state, sol, eta)
    c = sol.feedback(state.e).reshape(g.n, obj.p)
    per = np.stack([alg.doaoc_agent_direction(state.g[i], state.h[i], c[i], eta, k) for i in range(g.n)])
    assert np.max(np.abs(stacked - per)) <= 1e-14 * max(1.0, np.max(np.abs(stacked)))


def test_centralized_scalar_by_hand():
    # f = x^2 / 2, eta = 1/2: d_k = -(1 - 2^-(k+1)) x, so x(k+1) = 2^-(k+1) x(k)
    x = np.array([1.0])
    for k, expect in enumerate([0.5, 0.125, 0.015625]):
        x = alg.centralized_step(x, x, np.eye(1), "eta", eta=0.5, k=k)
        assert x[0] == expect
    np.testing.assert_array_equal(alg.centralized_step([2.0], [0.0], [[3.0]], "exact", k=4), [2.0])
    with pytest.raises(ValueError):
        alg.centralized_step([1.0], [1.0], [[1.0]], "eta")
    with pytest.raises(ValueError):
        alg.centralized_step([1.0], [1.0], [[1.0]], "newton")


@given(st.floats(0.05, 5), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 12))
def test_exact_with_identity_r_equals_eta_variant(h, g, x, k):
    a = alg.centralized_step([x], [g], [[h]], "exact", k=k)
    b = alg.centralized_step([x], [g], [[h]], "eta", eta=1 / (1 + h), k=k)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


def test_consensus_only_examples():
    g = DirectedGraph.from_edges(2, [(0, 1), (1, 0)])
    inc = incidence(g)
    sol = solve_riccati(CostWeights.scaled(2, 1), inc)
    x = np.array([[0.0], [2.0]])
    nxt = alg.consensus_only_step(alg.make_state(0, x, inc), sol)
    assert nxt[0, 0] > 0 and nxt[1, 0] < 2
    assert nxt[0, 0] == pytest.approx(2 - nxt[1, 0], abs=1e-15)
    still = np.ones((2, 1))
    np.testing.assert_array_equal(alg.consensus_only_step(alg.make_state(0, still, inc), sol), still)


@given(seeds)
def test_consensus_only_contracts_and_matches_docmc_without_objectives(seed):
    rng, g, inc, obj, sol = setup(seed)
    x = rng.standard_normal((g.n, obj.p))
    state = alg.make_state(2, x, inc)
    nxt = alg.consensus_only_step(state, sol)
    assert np.linalg.norm(inc.edge_errors(nxt)) < np.linalg.norm(state.e)
    np.testing.assert_allclose(nxt.mean(axis=0), x.mean(axis=0), atol=1e-12)
    zero = alg.IterationState(2, x, state.e, np.zeros_like(x), np.zeros_like(x), np.zeros((g.n, obj.p, obj.p)))
    np.testing.assert_allclose(x + alg.docmc_direction(zero, sol), nxt, atol=1e-12)


@given(seeds)
def test_all_directions_vanish_at_optimum(seed):
    rng, g, inc, obj, sol = setup(seed)
    x_star = np.tile(reference_minimizer(obj), (g.n, 1))
    state = alg.make_state(int(rng.integers(0, 20)), x_star, inc, obj)
    assert np.max(np.abs(alg.docmc_direction(state, sol))) <= 1e-11
    assert np.max(np.abs(alg.docmc_direction_closed(state, sol))) <= 1e-11
    assert np.max(np.abs(alg.doaoc_direction(state, sol, 1 / obj.m2))) <= 1e-11


def _docmc_run(inc, obj, sol, x, iters):
    for k in range(iters):
        x = x + alg.docmc_direction(alg.make_state(k, x, inc, obj), sol)
    return x


def test_identity_weights_disagreement_stalls_from_split_start():
    """The consensus gain (A^(k+1)) vanishes with k, so a split start keeps residual disagreement."""
    g = DirectedGraph.from_edges(3, [(0, 1), (1, 2), (2, 0)])
    inc = incidence(g)
    obj = random_quadratics(3, 2, 0.5, 2.0, np.random.default_rng(5))
    sol = solve_riccati(CostWeights.scaled(3, 2), inc)
    split = _docmc_run(inc, obj, sol, np.random.default_rng(0).standard_normal((3, 2)), 200)
    assert np.linalg.norm(split - split.mean(axis=0)) > 1e-3
    common = _docmc_run(inc, obj, sol, np.tile([0.3, -0.7], (3, 1)), 30)
    assert np.linalg.norm(common - reference_minimizer(obj)) <= 1e-8


def test_linear_consensus_keeps_agents_apart():
    """DOAOC driven by one round of W-averaging: averages differ per agent and the run does not settle."""
    g = DirectedGraph.from_edges(3, [(0, 1), (1, 2), (2, 0)])
    inc = incidence(g)
    obj = random_quadratics(3, 2, 0.05, 0.5, np.random.default_rng(2))
    sol = solve_riccati(CostWeights.scaled(3, 2, q=100), inc)
    cfg = ConsensusConfig("linear", 1, mixing_matrix(g))
    x = np.tile([0.1, 0.2], (3, 1))
    for k in range(60):
        x = x + alg.doaoc_direction(alg.make_state(k, x, inc, obj, cfg), sol, 1 / obj.m2)
    assert not np.linalg.norm(x - reference_minimizer(obj)) <= 1e-8
