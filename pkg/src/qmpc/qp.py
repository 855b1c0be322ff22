"""Dense primal active-set solver for convex and mildly indefinite QPs.

Solves

    min_z 0.5 z'Hz + g'z   s.t.  A_eq z = b_eq,  A_in z <= b_in

with a null-space method: at each working set the step solves the reduced
Newton system on the constraint null space, negative curvature or a gradient
component in the reduced null space triggers a ray search that either hits a
blocking constraint or certifies unboundedness, and at a stationary point the
most negative working-set multiplier leaves (lowest index on ties, which also
breaks blocking-constraint ties). Problems of a few hundred variables are
well inside this method's comfort zone.

A feasible start is constructed by least-squares projection onto the
equalities, followed when necessary by an elastic phase-1 solve of the same
kind. The final point is polished by one factorization of the full KKT
system on the optimal active set plus iterative refinement, which brings the
KKT residual down to machine precision on reasonably conditioned problems.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

_RANK_TOL = 1e-11
_CURV_TOL = 1e-9
_MULT_TOL = 1e-9
_FEAS_TOL = 1e-8
_STEP_TOL = 1e-11


@dataclass
class QpResult:
    z: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    active: tuple
    objective: float
    status: str  # optimal | infeasible | unbounded | max_iter
    iterations: int


def kkt_residual(H, g, A_eq, b_eq, A_in, b_in, z, lam_eq, mu_in):
    """Max-norm KKT residuals: stationarity, primal, complementarity, dual."""
    grad = H @ z + g
    if A_eq.shape[0]:
        grad = grad + A_eq.T @ lam_eq
    if A_in.shape[0]:
        grad = grad + A_in.T @ mu_in
    stat = float(np.abs(grad).max()) if grad.size else 0.0
    primal = 0.0
    comp = 0.0
    dual = 0.0
    if A_eq.shape[0]:
        primal = float(np.abs(A_eq @ z - b_eq).max())
    if A_in.shape[0]:
        slack = A_in @ z - b_in
        primal = max(primal, float(np.maximum(slack, 0.0).max(initial=0.0)))
        comp = float(np.abs(mu_in * slack).max(initial=0.0))
        dual = float(np.maximum(-mu_in, 0.0).max(initial=0.0))
    return {"stationarity": stat, "primal": primal, "complementarity": comp, "dual": dual}


def _range_null(A_rows):
    """Pivoted QR of the row space of A_rows (may be empty).

    Returns (Y, Z, rank, R, perm): orthonormal range/null bases plus the
    triangular factor and column permutation, so callers can recover
    multipliers by a triangular solve instead of a fresh least-squares.
    """
    m, n = A_rows.shape
    if m == 0:
        return np.zeros((n, 0)), np.eye(n), 0, np.zeros((0, 0)), np.zeros(0, dtype=int)
    Q, R, perm = scipy.linalg.qr(A_rows.T, mode="full", pivoting=True, check_finite=False)
    diag = np.abs(np.diag(R[: min(m, n), : min(m, n)])) if min(m, n) else np.zeros(0)
    scale = diag[0] if diag.size and diag[0] > 0 else 1.0
    rank = int(np.sum(diag > _RANK_TOL * max(scale, 1.0)))
    return Q[:, :rank], Q[:, rank:], rank, R, perm


def _feasible_start(A_eq, b_eq, A_in, b_in, z0, n, allow_phase1=True):
    """Return a point satisfying equalities exactly-ish and inequalities, or None."""
    if z0 is not None:
        z = np.array(z0, dtype=float)
        if A_eq.shape[0]:
            r = b_eq - A_eq @ z
            if np.abs(r).max(initial=0.0) > 1e-13:
                corr, *_ = np.linalg.lstsq(A_eq, r, rcond=None)
                z = z + corr
    elif A_eq.shape[0]:
        z, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
    else:
        z = np.zeros(n)
    if A_eq.shape[0] and np.abs(A_eq @ z - b_eq).max() > _FEAS_TOL * (1.0 + np.abs(b_eq).max(initial=0.0)):
        return None  # equalities inconsistent
    if A_in.shape[0] and (A_in @ z - b_in).max(initial=0.0) > _FEAS_TOL:
        if not allow_phase1:
            return None
        z = _elastic_phase1(A_eq, b_eq, A_in, b_in, z)
    return z


def _elastic_phase1(A_eq, b_eq, A_in, b_in, z_ref):
    """Minimize the worst inequality violation; None if it stays positive.

    One shared elastic variable t bounds every row (A_in z - t <= b_in,
    t >= 0), which keeps the phase-1 problem barely bigger than the original
    and starts strictly feasible at t just above the current worst violation.
    """
    n = z_ref.shape[0]
    m = A_in.shape[0]
    viol = float(np.maximum(A_in @ z_ref - b_in, 0.0).max(initial=0.0))
    big = 1e3 * (1.0 + viol)
    H = np.zeros((n + 1, n + 1))
    H[:n, :n] = 1e-8 * np.eye(n)
    H[n, n] = 1.0
    g = np.concatenate([-1e-8 * z_ref, [big]])
    A_eq_el = np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))]) if A_eq.shape[0] else np.zeros((0, n + 1))
    A_in_el = np.vstack([
        np.hstack([A_in, -np.ones((m, 1))]),
        np.hstack([np.zeros((1, n)), -np.ones((1, 1))]),
    ])
    b_in_el = np.concatenate([b_in, [0.0]])
    zt0 = np.concatenate([z_ref, [viol + 1e-9]])
    res = solve_qp(H, g, A_eq_el, b_eq, A_in_el, b_in_el, z0=zt0, _phase1=True)
    if res.status != "optimal":
        return None
    if res.z[n] > 1e2 * _FEAS_TOL:
        return None
    return res.z[:n]


def _polish(H, g, A_rows, b_rows, z, n_eq):
    """Re-solve the equality-constrained KKT system on the final active set.

    Two rounds of iterative refinement knock the residual of the direct
    factorization down to machine noise, which matters when the objective
    scale is large. Falls back to least squares if the KKT matrix is
    singular (degenerate active sets).
    """
    n = z.shape[0]
    m = A_rows.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    if m:
        K[:n, n:] = A_rows.T
        K[n:, :n] = A_rows
    rhs = np.concatenate([-g, b_rows])
    try:
        with warnings.catch_warnings():
            # a singular K only warns; escalate so the fallback engages
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(K, check_finite=False)
            y = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
            for _ in range(2):
                r = rhs - K @ y
                y = y + scipy.linalg.lu_solve(lu, r, check_finite=False)
    except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
        y, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    return y[:n], y[n:]


def solve_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None, z0=None, active0=None, max_iter=None, _phase1=False):
    """Solve the dense QP; see module docstring for the formulation.

    z0 warm-starts the primal point (it is projected onto the equalities) and
    active0 seeds the working set with whichever of those inequality rows are
    active at the start point. Warm data changes the path, never the answer.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    A_in = np.zeros((0, n)) if A_in is None else np.asarray(A_in, dtype=float)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float)
    m_eq, m_in = A_eq.shape[0], A_in.shape[0]
    if max_iter is None:
        max_iter = 50 * (n + m_in) + 200

    def finish(z, lam_eq, mu_full, active, status, it):
        obj = float(0.5 * z @ H @ z + g @ z)
        return QpResult(z=z, lam_eq=lam_eq, mu_in=mu_full, active=tuple(sorted(active)), objective=obj, status=status, iterations=it)

    z = _feasible_start(A_eq, b_eq, A_in, b_in, z0, n, allow_phase1=not _phase1)
    if z is None:
        return finish(np.full(n, np.nan), np.zeros(m_eq), np.zeros(m_in), (), "infeasible", 0)

    work = []
    if active0 is not None and m_in:
        slack0 = A_in @ z - b_in
        work = [int(i) for i in active0 if 0 <= int(i) < m_in and slack0[int(i)] >= -1e-9]
        work = sorted(set(work))

    free = np.ones(m_in, dtype=bool)
    for it in range(1, max_iter + 1):
        rows = np.vstack([A_eq, A_in[work]]) if (m_eq or work) else np.zeros((0, n))
        Y, Z, rank, Rfac, perm = _range_null(rows)
        grad = H @ z + g
        free.fill(True)
        free[work] = False
        direction = None  # ray with guaranteed descent, searched to the nearest blocker

        if Z.shape[1]:
            Hz = Z.T @ H @ Z
            gz = Z.T @ grad
            scale = max(1.0, float(np.abs(Hz).max()))
            try:
                c, low = scipy.linalg.cho_factor(Hz, check_finite=False)
                pz = scipy.linalg.cho_solve((c, low), -gz, check_finite=False)
                p = Z @ pz
            except scipy.linalg.LinAlgError:
                w, V = np.linalg.eigh(Hz)
                if w[0] < -_CURV_TOL * scale:
                    d = V[:, 0]
                    if gz @ d > 0:
                        d = -d
                    direction = Z @ d
                else:
                    pos = w > _CURV_TOL * scale
                    g_modes = V.T @ gz
                    null_grad = np.where(pos, 0.0, g_modes)
                    if np.abs(null_grad).max(initial=0.0) > 1e-9 * (1.0 + np.abs(gz).max()):
                        direction = Z @ (V @ np.where(pos, 0.0, -null_grad))
                    else:
                        pz = V @ np.where(pos, -g_modes / np.where(pos, w, 1.0), 0.0)
                        p = Z @ pz
        else:
            p = np.zeros(n)

        if direction is not None:
            # Ray search: objective strictly decreases along the ray forever,
            # so either some inactive constraint blocks or the QP is unbounded.
            Ad = A_in @ direction
            hit = free & (Ad > 1e-12)
            if not np.any(hit):
                return finish(z, np.zeros(m_eq), np.zeros(m_in), work, "unbounded", it)
            alphas = np.full(m_in, np.inf)
            alphas[hit] = (b_in[hit] - A_in[hit] @ z) / Ad[hit]
            blocker = int(np.argmax(alphas <= alphas.min() + 1e-14))
            z = z + max(alphas[blocker], 0.0) * direction
            work = sorted(set(work) | {blocker})
            continue

        if np.abs(p).max(initial=0.0) <= _STEP_TOL * (1.0 + np.abs(z).max()):
            # Stationary on the working set; check multiplier signs via the
            # already-factored pivoted QR (basic least-squares solution).
            if rows.shape[0]:
                lam = np.zeros(rows.shape[0])
                if rank:
                    try:
                        lam[perm[:rank]] = scipy.linalg.solve_triangular(
                            Rfac[:rank, :rank], Y.T @ -grad, check_finite=False)
                    except (scipy.linalg.LinAlgError, ValueError):
                        lam, *_ = np.linalg.lstsq(rows.T, -grad, rcond=None)
            else:
                lam = np.zeros(0)
            lam_eq = lam[:m_eq]
            lam_w = lam[m_eq:]
            if lam_w.size == 0 or lam_w.min() >= -_MULT_TOL:
                b_rows = np.concatenate([b_eq, b_in[work]])
                z_fin, lam_fin = _polish(H, g, rows, b_rows, z, m_eq)
                ok = np.all(np.isfinite(z_fin)) and np.abs(z_fin - z).max(initial=0.0) < 1e-6 * (1.0 + np.abs(z).max())
                if ok and m_in:
                    ok = (A_in @ z_fin - b_in).max(initial=0.0) <= _FEAS_TOL
                if ok:
                    z, lam_eq, lam_w = z_fin, lam_fin[:m_eq], lam_fin[m_eq:]
                mu_full = np.zeros(m_in)
                for idx, i in enumerate(work):
                    mu_full[i] = max(lam_w[idx], 0.0) if lam_w[idx] > -_MULT_TOL else lam_w[idx]
                return finish(z, lam_eq, mu_full, work, "optimal", it)
            drop = work[int(np.argmin(lam_w))]
            work = [i for i in work if i != drop]
            continue

        # Line step toward the EQP minimizer, clipped at the nearest blocker.
        Ad = A_in @ p
        hit = free & (Ad > 1e-12)
        if np.any(hit):
            alphas = np.full(m_in, np.inf)
            alphas[hit] = (b_in[hit] - A_in[hit] @ z) / Ad[hit]
            amin = float(alphas.min())
            if amin < 1.0 - 1e-14:
                blocker = int(np.argmax(alphas <= amin + 1e-14))
                z = z + max(alphas[blocker], 0.0) * p
                work = sorted(set(work) | {blocker})
                continue
        z = z + p

    return finish(z, np.zeros(m_eq), np.zeros(m_in), work, "max_iter", max_iter)
