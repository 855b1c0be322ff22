"""Closed-form LQR oracles.

Everything here is checked against hand algebra or scipy's DARE solver, so
these tests anchor the rest of the suite: if they pass, the module is safe
to use as ground truth for the optimization-based code.
"""

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from qmpc.lqr import (
    LqrCost,
    LqrTheta,
    gain_from,
    lqr_stage_cost,
    q1_exact,
    q1_matrix,
    riccati_map,
    riccati_residual,
    solve_riccati,
    v0_exact,
    v1_exact,
    wrong_td_error,
)


def scalar_cost(t=1.0, r=1.0, gamma=1.0):
    return LqrCost(T=np.array([[t]]), S=np.zeros((1, 1)), R=np.array([[r]]), gamma=gamma)


def test_scalar_fixed_point_is_golden_ratio():
    # A = B = T = R = 1, gamma = 1: P = 1 + P - P^2/(1+P) gives P^2 = P + 1.
    cost = scalar_cost()
    P = solve_riccati(np.array([[1.0]]), np.array([[1.0]]), cost)
    assert abs(P[0, 0] - (1.0 + np.sqrt(5.0)) / 2.0) < 1e-10


def test_zero_dynamics_fixed_point_is_stage_weight():
    cost = LqrCost(T=np.diag([2.0, 3.0]), S=np.zeros((2, 2)), R=np.eye(2), gamma=0.9)
    P = solve_riccati(np.zeros((2, 2)), np.eye(2), cost)
    assert np.abs(P - np.diag([2.0, 3.0])).max() < 1e-12


def test_fixed_point_matches_scipy_dare():
    # Discounting folds into the model: the fixed point solves the standard
    # DARE for (sqrt(gamma) A, sqrt(gamma) B) with the same cost blocks.
    A = np.array([[0.9, 0.2, 0.0], [0.1, 0.7, 0.1], [0.0, 0.0, 0.8]])
    B = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.2]])
    S = np.array([[0.1, 0.0], [0.0, -0.1], [0.05, 0.0]])
    cost = LqrCost(T=np.diag([1.0, 2.0, 0.5]), S=S, R=np.diag([1.0, 0.5]), gamma=0.9)
    P = solve_riccati(A, B, cost)
    sq = np.sqrt(cost.gamma)
    P_ref = scipy.linalg.solve_discrete_are(sq * A, sq * B, cost.T, cost.R, s=S)
    assert np.abs(P - P_ref).max() < 1e-9
    assert riccati_residual(P, A, B, cost) < 1e-10


def test_residual_detects_perturbation():
    A = np.array([[0.8]])
    B = np.array([[1.0]])
    cost = scalar_cost(gamma=0.95)
    P = solve_riccati(A, B, cost)
    assert riccati_residual(P, A, B, cost) < 1e-11
    assert riccati_residual(P + 0.1, A, B, cost) > 1e-3


def test_riccati_map_one_sweep_by_hand():
    # One sweep from P = 0 must reproduce T - S R^-1 S'.
    S = np.array([[0.3], [0.1]])
    cost = LqrCost(T=np.eye(2), S=S, R=np.array([[2.0]]), gamma=0.9)
    got = riccati_map(np.zeros((2, 2)), np.eye(2), np.ones((2, 1)), cost)
    assert np.abs(got - (np.eye(2) - S @ S.T / 2.0)).max() < 1e-14


def test_scaling_family_leaves_q1_invariant():
    # (c A, c B, P / c^2) produces the same one-step action value.
    rng = np.random.default_rng(11)
    A = rng.standard_normal((2, 2)) * 0.4
    B = rng.standard_normal((2, 2))
    G = rng.standard_normal((2, 2))
    P = G @ G.T + np.eye(2)
    cost = LqrCost(T=np.eye(2), S=np.zeros((2, 2)), R=np.eye(2), gamma=0.9)
    theta = LqrTheta(A_hat=A, B_hat=B, P_hat=P)
    theta_scaled = LqrTheta(A_hat=0.5 * A, B_hat=0.5 * B, P_hat=4.0 * P)
    for _ in range(25):
        s = rng.standard_normal(2)
        a = rng.standard_normal(2)
        q = q1_exact(theta, cost, s, a)
        q_scaled = q1_exact(theta_scaled, cost, s, a)
        assert abs(q - q_scaled) <= 1e-12 * (1.0 + abs(q))
    assert np.abs(gain_from(theta, cost) - gain_from(theta_scaled, cost)).max() < 1e-12


def test_gain_minimizes_q1():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((2, 2)) * 0.5
    B = rng.standard_normal((2, 2))
    G = rng.standard_normal((2, 2))
    theta = LqrTheta(A_hat=A, B_hat=B, P_hat=G @ G.T + 0.5 * np.eye(2))
    cost = LqrCost(T=np.eye(2), S=0.1 * np.ones((2, 2)), R=2.0 * np.eye(2), gamma=0.85)
    K = gain_from(theta, cost)
    s = rng.standard_normal(2)
    a_star = -K @ s
    q_star = q1_exact(theta, cost, s, a_star)
    assert abs(v1_exact(theta, cost, s) - q_star) < 1e-12
    for _ in range(40):
        a = a_star + rng.standard_normal(2)
        assert q1_exact(theta, cost, s, a) >= q_star - 1e-12


def test_v1_at_fixed_point_recovers_quadratic_value():
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    B = np.eye(2)
    cost = LqrCost(T=np.eye(2), S=np.zeros((2, 2)), R=np.eye(2), gamma=0.9)
    P = solve_riccati(A, B, cost)
    theta = LqrTheta(A_hat=A, B_hat=B, P_hat=P)
    rng = np.random.default_rng(1)
    for _ in range(10):
        s = rng.standard_normal(2)
        assert abs(v1_exact(theta, cost, s) - s @ P @ s) < 1e-10
        assert abs(v0_exact(theta, s) - s @ P @ s) < 1e-12


def test_wrong_td_error_matches_direct_bootstrap():
    # delta = l + gamma * v0(true next) - q1 under the internal model.
    rng = np.random.default_rng(8)
    A = rng.standard_normal((2, 2)) * 0.5
    B = rng.standard_normal((2, 2))
    A_hat = A + 0.1 * rng.standard_normal((2, 2))
    B_hat = B - 0.05 * rng.standard_normal((2, 2))
    G = rng.standard_normal((2, 2))
    theta = LqrTheta(A_hat=A_hat, B_hat=B_hat, P_hat=G @ G.T + np.eye(2))
    cost = LqrCost(T=np.eye(2), S=np.zeros((2, 2)), R=np.eye(2), gamma=0.9)
    for _ in range(10):
        s = rng.standard_normal(2)
        a = rng.standard_normal(2)
        s_next = A @ s + B @ a
        direct = (lqr_stage_cost(cost, s, a) + cost.gamma * v0_exact(theta, s_next)
                  - q1_exact(theta, cost, s, a))
        assert abs(wrong_td_error(theta, cost, A, B, s, a) - direct) < 1e-10


def test_wrong_td_error_scalar_hand_value():
    # A = B = 1, A_hat = 1.1, B_hat = 1, P = 2, gamma = 0.9, s = 1, a = 0:
    # delta = 0.9 * 2 * (1^2 - 1.1^2) = -0.378.
    theta = LqrTheta(A_hat=np.array([[1.1]]), B_hat=np.array([[1.0]]), P_hat=np.array([[2.0]]))
    cost = scalar_cost(gamma=0.9)
    delta = wrong_td_error(theta, cost, np.array([[1.0]]), np.array([[1.0]]),
                           np.array([1.0]), np.array([0.0]))
    assert abs(delta - (-0.378)) < 1e-12


def test_exact_model_kills_td_error_for_every_value_matrix():
    A = np.array([[0.7, 0.2], [0.0, 0.9]])
    B = np.array([[1.0], [0.5]])
    cost = LqrCost(T=np.eye(2), S=np.zeros((2, 1)), R=np.array([[1.0]]), gamma=0.95)
    rng = np.random.default_rng(21)
    for _ in range(10):
        G = rng.standard_normal((2, 2))
        theta = LqrTheta(A_hat=A, B_hat=B, P_hat=G @ G.T + np.eye(2))
        s = rng.standard_normal(2)
        a = rng.standard_normal(1)
        assert abs(wrong_td_error(theta, cost, A, B, s, a)) < 1e-12


def test_cost_validation():
    with pytest.raises(ValueError):
        LqrCost(T=np.eye(2), S=np.zeros((2, 1)), R=np.array([[0.0]]), gamma=0.9)
    with pytest.raises(ValueError):
        LqrCost(T=np.array([[1.0, 0.5], [0.0, 1.0]]), S=np.zeros((2, 1)),
                R=np.array([[1.0]]), gamma=0.9)
    with pytest.raises(ValueError):
        LqrCost(T=np.eye(1), S=np.zeros((1, 1)), R=np.eye(1), gamma=0.0)
    with pytest.raises(ValueError):
        LqrTheta(A_hat=np.eye(2), B_hat=np.eye(2), P_hat=np.array([[1.0, 0.2], [0.0, 1.0]]))


def test_q1_matrix_is_symmetric():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((3, 3)) * 0.4
    B = rng.standard_normal((3, 2))
    G = rng.standard_normal((3, 3))
    theta = LqrTheta(A_hat=A, B_hat=B, P_hat=G @ G.T)
    cost = LqrCost(T=np.eye(3), S=np.zeros((3, 2)), R=np.eye(2), gamma=0.8)
    W = q1_matrix(theta, cost)
    assert np.abs(W - W.T).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_stabilizable_systems_reach_tiny_residual(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    m = int(rng.integers(1, 3))
    gamma = float(rng.uniform(0.7, 0.99))
    A = rng.standard_normal((n, n))
    rho = max(np.abs(np.linalg.eigvals(A)))
    if rho > 0:
        A *= 0.95 / (np.sqrt(gamma) * rho)  # contractive even before feedback
    B = rng.standard_normal((n, m))
    G = rng.standard_normal((n, n))
    cost = LqrCost(T=G @ G.T + np.eye(n), S=np.zeros((n, m)),
                   R=np.eye(m) * float(rng.uniform(0.5, 2.0)), gamma=gamma)
    P = solve_riccati(A, B, cost)
    scale = 1.0 + float(np.abs(P).max())
    assert riccati_residual(P, A, B, cost) < 1e-10 * scale
