"""Closed-form discounted LQR quantities.

Everything in this module has an explicit formula: the discounted Riccati
fixed point, the one-step action-value built from a (possibly wrong) model
and value matrix, the induced linear feedback, and the model-mismatch
temporal-difference identity. These serve as ground truth for the
optimization-based approximators elsewhere in the package.

Conventions: stage cost l(s, a) = [s; a]' [[T, S], [S', R]] [s; a], dynamics
s+ = A s + B a, discount gamma in (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverError


@dataclass(frozen=True)
class LqrCost:
    """Quadratic stage cost blocks and discount factor."""

    T: np.ndarray
    S: np.ndarray
    R: np.ndarray
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "T", np.asarray(self.T, dtype=float))
        object.__setattr__(self, "S", np.asarray(self.S, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        n, m = self.S.shape if self.S.ndim == 2 else (self.S.shape[0], 1)
        if self.T.shape != (n, n) or self.R.shape != (m, m):
            raise ValueError("cost block shapes are inconsistent")
        if not np.allclose(self.T, self.T.T, atol=1e-12) or not np.allclose(self.R, self.R.T, atol=1e-12):
            raise ValueError("T and R must be symmetric")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def n_s(self):
        return self.T.shape[0]

    @property
    def n_a(self):
        return self.R.shape[0]

    def stage_matrix(self):
        return np.block([[self.T, self.S], [self.S.T, self.R]])


@dataclass(frozen=True)
class LqrTheta:
    """A linear model guess together with a value matrix.

    ``P_hat`` plays the role of a one-step-ahead value function s'P_hat s;
    it does not have to solve any Riccati equation, which is exactly what
    makes the mismatch identities below interesting.
    """

    A_hat: np.ndarray
    B_hat: np.ndarray
    P_hat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A_hat", np.asarray(self.A_hat, dtype=float))
        object.__setattr__(self, "B_hat", np.asarray(self.B_hat, dtype=float))
        object.__setattr__(self, "P_hat", np.asarray(self.P_hat, dtype=float))
        n = self.A_hat.shape[0]
        if self.A_hat.shape != (n, n) or self.B_hat.shape[0] != n or self.P_hat.shape != (n, n):
            raise ValueError("model and value matrix dimensions are inconsistent")
        if not np.allclose(self.P_hat, self.P_hat.T, atol=1e-12):
            raise ValueError("P_hat must be symmetric")


def riccati_map(P, A, B, cost):
    """One discounted Riccati value-iteration sweep."""
    g = cost.gamma
    APB = cost.S + g * A.T @ P @ B
    inner = cost.R + g * B.T @ P @ B
    return cost.T + g * A.T @ P @ A - APB @ np.linalg.solve(inner, APB.T)


def riccati_residual(P, A, B, cost):
    """Max-norm defect of the discounted Riccati equation at P."""
    return float(np.abs(riccati_map(P, A, B, cost) - P).max())


def solve_riccati(A, B, cost, tol=1e-12, max_iter=100_000):
    """Discounted Riccati fixed point by straight value iteration.

    Iterates the Riccati map from P = 0 until successive iterates agree to
    ``tol`` in max norm. Stabilizable instances with sqrt(gamma) * rho(A_cl)
    bounded away from 1 converge linearly; the iteration cap guards the rest.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    P = np.zeros_like(cost.T)
    for _ in range(int(max_iter)):
        P_next = riccati_map(P, A, B, cost)
        delta = np.abs(P_next - P).max()
        P = 0.5 * (P_next + P_next.T)
        if delta <= tol:
            return P
    raise SolverError("max_iter", f"Riccati iteration did not converge within {max_iter} sweeps")


def q1_matrix(theta, cost):
    """Coefficient matrix of the one-step action value in [s; a]."""
    g = cost.gamma
    A, B, P = theta.A_hat, theta.B_hat, theta.P_hat
    return np.block(
        [
            [cost.T + g * A.T @ P @ A, cost.S + g * A.T @ P @ B],
            [cost.S.T + g * B.T @ P @ A, cost.R + g * B.T @ P @ B],
        ]
    )


def q1_exact(theta, cost, s, a):
    """One-step action value [s; a]' W [s; a] under the model, value matrix pair."""
    v = np.concatenate([np.asarray(s, dtype=float), np.asarray(a, dtype=float)])
    return float(v @ q1_matrix(theta, cost) @ v)


def v0_exact(theta, s):
    """Zero-step value s' P_hat s."""
    s = np.asarray(s, dtype=float)
    return float(s @ theta.P_hat @ s)


def gain_from(theta, cost):
    """Feedback gain of the one-step action value's exact minimizer.

    Minimizing q1 over a gives a = -K s with
    K = (R + g B'PB)^-1 (S' + g B'PA). Both occurrences of the value matrix
    carry the discount; anything else would not minimize the stated quadratic.
    """
    g = cost.gamma
    A, B, P = theta.A_hat, theta.B_hat, theta.P_hat
    return np.linalg.solve(cost.R + g * B.T @ P @ B, cost.S.T + g * B.T @ P @ A)


def v1_exact(theta, cost, s):
    """One-step value min_a q1(s, a), assuming the control block is PD."""
    g = cost.gamma
    A, B, P = theta.A_hat, theta.B_hat, theta.P_hat
    K = gain_from(theta, cost)
    W = cost.T + g * A.T @ P @ A - (cost.S + g * A.T @ P @ B) @ K
    s = np.asarray(s, dtype=float)
    return float(s @ W @ s)


def wrong_td_error(theta, cost, true_A, true_B, s, a):
    """Temporal-difference error of the naive model-based target.

    Bootstrapping the one-step value with the true successor state while
    evaluating the action value under the internal model gives

        delta = gamma [s; a]' ([A B]'P[A B] - [Ah Bh]'P[Ah Bh]) [s; a],

    which collapses to zero for a perfect model regardless of P_hat: the
    naive criterion stops carrying any information about the value matrix.
    """
    true_A = np.asarray(true_A, dtype=float)
    true_B = np.asarray(true_B, dtype=float)
    F_true = np.hstack([true_A, true_B])
    F_model = np.hstack([theta.A_hat, theta.B_hat])
    P = theta.P_hat
    D = F_true.T @ P @ F_true - F_model.T @ P @ F_model
    v = np.concatenate([np.asarray(s, dtype=float), np.asarray(a, dtype=float)])
    return float(cost.gamma * (v @ D @ v))


def lqr_stage_cost(cost, s, a):
    """Quadratic stage cost [s; a]' [[T, S], [S', R]] [s; a]."""
    v = np.concatenate([np.asarray(s, dtype=float), np.asarray(a, dtype=float)])
    return float(v @ cost.stage_matrix() @ v)
