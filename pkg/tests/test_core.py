"""Tests for the relaxation functionals and their gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparseanneal.core import (
    DomainError,
    Problem,
    RelaxedState,
    ShapeError,
    SparseSolution,
    entropy,
    entropy_gradient,
    free_energy,
    free_energy_gradients,
    relaxed_cost,
    relaxed_cost_gradients,
    xi_matrix,
)


def make_problem(seed=0, n=6, d=4, k=2):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    y = rng.standard_normal(n)
    return Problem(A=A, y=y, k=k)


def make_state(problem, seed=1, T=0.7, mu_scale=0.3):
    rng = np.random.default_rng(seed)
    Q = rng.uniform(0.05, 0.95, size=(problem.d, problem.k))
    x = rng.standard_normal(problem.k)
    mu = mu_scale * rng.standard_normal(problem.k)
    return RelaxedState(Q=Q, x=x, mu=mu, T=T, rho=1.0 / T)


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

# Oracle: per-entry sum -[q ln q + (1-q) ln(1-q)] evaluated with mpmath at
# 40 digits for the fixed matrix below, rounded to double.
ENTROPY_ORACLE_Q = np.array([[0.1, 0.9], [0.5, 0.25], [0.999, 0.001]])
ENTROPY_ORACLE_VALUE = 1.9214627821861143


def test_entropy_matches_high_precision_oracle():
    assert entropy(ENTROPY_ORACLE_Q) == pytest.approx(ENTROPY_ORACLE_VALUE, abs=1e-14)


def test_entropy_binary_is_zero():
    Q = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    assert entropy(Q) == 0.0


def test_entropy_uniform_half_is_maximal():
    Q = np.full((5, 3), 0.5)
    assert entropy(Q) == pytest.approx(15 * math.log(2), rel=1e-15)


def test_entropy_rejects_out_of_domain():
    with pytest.raises(DomainError):
        entropy(np.array([[0.5, 1.0 + 1e-6]]))
    # within the 1e-12 tolerance band is accepted and clipped
    assert entropy(np.array([[0.5, 1.0 + 1e-13]])) >= 0.0


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=12),
)
def test_entropy_bounds_property(entries):
    Q = np.array(entries).reshape(-1, 1)
    H = entropy(Q)
    assert 0.0 <= H <= Q.size * math.log(2) + 1e-12


def test_entropy_gradient_matches_finite_differences():
    Q = ENTROPY_ORACLE_Q.copy()
    g = entropy_gradient(Q)
    h = 1e-7
    for i in range(Q.shape[0]):
        for j in range(Q.shape[1]):
            Qp, Qm = Q.copy(), Q.copy()
            Qp[i, j] += h
            Qm[i, j] -= h
            fd = (entropy(Qp) - entropy(Qm)) / (2 * h)
            assert g[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-5)


# ---------------------------------------------------------------------------
# relaxed cost and the enumeration identity
# ---------------------------------------------------------------------------

def test_relaxed_cost_hand_computed_value():
    # A = [[1,0],[0,2],[1,1]], y = [1,2,3], Q = [[0.25],[0.5]], x = [2]:
    # residual term 2.5, variance term 2*0.1875*4 + 5*0.25*4 = 6.5, total 9.
    problem = Problem(A=np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]),
                      y=np.array([1.0, 2.0, 3.0]), k=1)
    val = relaxed_cost(problem, np.array([[0.25], [0.5]]), np.array([2.0]))
    assert val == pytest.approx(9.0, abs=1e-12)


def enumeration_expectation(problem, Q, x):
    """Independent oracle: expectation of ||y - A V x||^2 over every binary
    matrix V in {0,1}^(d x k) with independent Bernoulli(q_ij) entries."""
    d, k = Q.shape
    total = 0.0
    for code in range(2 ** (d * k)):
        V = np.zeros((d, k))
        weight = 1.0
        for pos in range(d * k):
            i, j = divmod(pos, k)
            bit = (code >> pos) & 1
            V[i, j] = bit
            weight *= Q[i, j] if bit else (1.0 - Q[i, j])
        r = problem.y - problem.A @ (V @ x)
        total += weight * float(r @ r)
    return total


def test_relaxed_cost_equals_enumeration_expectation():
    for seed in range(10):
        problem = make_problem(seed=seed, n=5, d=4, k=2)
        state = make_state(problem, seed=seed + 100)
        expected = enumeration_expectation(problem, state.Q, state.x)
        got = relaxed_cost(problem, state.Q, state.x)
        assert got == pytest.approx(expected, rel=1e-11, abs=1e-11)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10 ** 6))
def test_enumeration_identity_property(seed):
    problem = make_problem(seed=seed, n=4, d=3, k=2)
    state = make_state(problem, seed=seed + 1)
    expected = enumeration_expectation(problem, state.Q, state.x)
    assert relaxed_cost(problem, state.Q, state.x) == pytest.approx(
        expected, rel=1e-10, abs=1e-10
    )


def test_relaxed_cost_gradients_match_finite_differences():
    problem = make_problem(seed=3)
    state = make_state(problem, seed=4)
    Q, x = state.Q.copy(), state.x.copy()
    grad_q, grad_x = relaxed_cost_gradients(problem, Q, x)
    h = 1e-6
    for i in range(Q.shape[0]):
        for j in range(Q.shape[1]):
            Qp, Qm = Q.copy(), Q.copy()
            Qp[i, j] += h
            Qm[i, j] -= h
            fd = (relaxed_cost(problem, Qp, x) - relaxed_cost(problem, Qm, x)) / (2 * h)
            assert grad_q[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-6)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd = (relaxed_cost(problem, Q, xp) - relaxed_cost(problem, Q, xm)) / (2 * h)
        assert grad_x[j] == pytest.approx(fd, rel=1e-6, abs=1e-6)


# ---------------------------------------------------------------------------
# free energy
# ---------------------------------------------------------------------------

def test_free_energy_requires_rho_slaved_to_temperature():
    problem = make_problem()
    state = make_state(problem)
    bad = RelaxedState(Q=state.Q, x=state.x, mu=state.mu, T=state.T,
                       rho=2.0 / state.T)
    with pytest.raises(DomainError):
        free_energy(problem, bad)


def test_free_energy_approaches_entropy_at_high_temperature():
    problem = make_problem()
    T = 1e12
    rng = np.random.default_rng(5)
    Q = rng.uniform(0.2, 0.8, size=(problem.d, problem.k))
    state = RelaxedState(Q=Q, x=rng.standard_normal(problem.k),
                         mu=rng.standard_normal(problem.k), T=T, rho=1.0 / T)
    assert free_energy(problem, state) == pytest.approx(entropy(Q), abs=1e-9)


def test_free_energy_gradients_match_finite_differences():
    problem = make_problem(seed=7)
    state = make_state(problem, seed=8, T=0.9)
    grad_q, grad_x = free_energy_gradients(problem, state, c0=0.3)
    h = 1e-6

    def F(Q, x):
        s = RelaxedState(Q=Q, x=x, mu=state.mu, T=state.T, rho=state.rho)
        return free_energy(problem, s, c0=0.3)

    Q, x = state.Q.copy(), state.x.copy()
    for i in range(Q.shape[0]):
        for j in range(Q.shape[1]):
            Qp, Qm = Q.copy(), Q.copy()
            Qp[i, j] += h
            Qm[i, j] -= h
            fd = (F(Qp, x) - F(Qm, x)) / (2 * h)
            assert grad_q[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-6)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd = (F(Q, xp) - F(Q, xm)) / (2 * h)
        assert grad_x[j] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_c0_shifts_free_energy_without_changing_gradient():
    problem = make_problem(seed=9)
    state = make_state(problem, seed=10)
    f0 = free_energy(problem, state, c0=0.0)
    f1 = free_energy(problem, state, c0=2.5)
    assert f1 - f0 == pytest.approx(2.5 / state.T, rel=1e-12)
    g0 = free_energy_gradients(problem, state, c0=0.0)
    g1 = free_energy_gradients(problem, state, c0=2.5)
    assert np.allclose(g0[0], g1[0], atol=1e-15)


# ---------------------------------------------------------------------------
# xi matrix
# ---------------------------------------------------------------------------

def test_xi_is_half_negative_bracket_gradient():
    # dF_T/dQ = entropy_gradient + (2/T) Xi is the identity that makes Gibbs
    # fixed points stationary; check it entrywise.
    problem = make_problem(seed=11)
    state = make_state(problem, seed=12, T=0.6)
    grad_q, _ = free_energy_gradients(problem, state)
    lhs = entropy_gradient(state.Q) + (2.0 / state.T) * xi_matrix(problem, state)
    assert np.allclose(lhs, grad_q, atol=1e-12)


def test_xi_penalty_terms_vanish_for_stochastic_columns():
    # when Q is column stochastic and mu = 0, Xi reduces to the pure cost part
    problem = make_problem(seed=13)
    rng = np.random.default_rng(14)
    raw = rng.uniform(0.1, 1.0, size=(problem.d, problem.k))
    Q = raw / raw.sum(axis=0)
    x = rng.standard_normal(problem.k)
    state = RelaxedState(Q=Q, x=x, mu=np.zeros(problem.k), T=0.5, rho=2.0)
    grad_q_cost, _ = relaxed_cost_gradients(problem, Q, x)
    assert np.allclose(xi_matrix(problem, state), -0.5 * grad_q_cost, atol=1e-10)


# ---------------------------------------------------------------------------
# type validation
# ---------------------------------------------------------------------------

def test_problem_validates_shapes_and_budget():
    A = np.eye(3)
    with pytest.raises(ShapeError):
        Problem(A=A, y=np.zeros(2), k=1)
    with pytest.raises(DomainError):
        Problem(A=A, y=np.zeros(3), k=4)
    with pytest.raises(DomainError):
        Problem(A=A, y=np.zeros(3), k=0)
    with pytest.raises(DomainError):
        Problem(A=A, y=np.zeros(3), k=2, column_norms_sq=np.array([1.0, 1.0, 2.0]))


def test_problem_precomputes_column_norms():
    problem = make_problem(seed=15)
    expected = (problem.A ** 2).sum(axis=0)
    assert np.allclose(problem.column_norms_sq, expected, rtol=1e-15)


def test_relaxed_state_clips_into_open_interval():
    problem = make_problem()
    Q = np.zeros((problem.d, problem.k))
    Q[0, 0] = 1.0
    state = RelaxedState(Q=Q, x=np.zeros(problem.k), mu=np.zeros(problem.k),
                         T=1.0, rho=1.0)
    assert state.Q.min() > 0.0
    assert state.Q.max() < 1.0


def test_sparse_solution_invariants():
    V = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    x = np.array([2.0, -1.0])
    w = V @ x
    sol = SparseSolution(V=V, x=x, w=w, cost=0.5, effective_sparsity=2,
                         residual_norm=0.5 ** 0.5)
    assert sol.support == (0, 1)
    with pytest.raises(DomainError):
        SparseSolution(V=V * 0.5, x=x, w=w, cost=0.5, effective_sparsity=2)
    with pytest.raises(DomainError):
        SparseSolution(V=V, x=x, w=w + 1e-9, cost=0.5, effective_sparsity=2)
    bad_cols = np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(DomainError):
        SparseSolution(V=bad_cols, x=x, w=bad_cols @ x, cost=0.5,
                       effective_sparsity=2)
