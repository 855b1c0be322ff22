"""Solve assembled instances and differentiate their optimal values.

Linear-model instances are a single dense QP. Nonlinear ones run SQP with
the exact Lagrangian Hessian, an l1 merit line search (backtracking factor
0.5, sufficient-decrease constant 1e-4), and the same QP kernel for the
subproblems. Every returned solution is re-checked against the first-order
conditions; a violation raises instead of handing back a bad point.

Differentiation comes in two flavors. ``grad_q_theta``/``grad_v_theta``
return the gradient of the optimal value with respect to each parameter
block, which at a solution is just the partial derivative of the Lagrangian
(the envelope argument: the optimizing variables and multipliers contribute
nothing to first order). ``sensitivity_y`` differentiates the primal-dual
solution itself through the active-set KKT system; it refuses to answer when
the active set is ambiguous (a constraint on the boundary with a vanishing
multiplier) because the derivative does not exist there.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import qp
from .errors import DegeneracyError, SolverError
from .ocp import ROW_INPUT_HI, ROW_INPUT_LO, ROW_SLACK, ROW_STATE_HI, ROW_STATE_LO
from .params import ThetaCondensed, ThetaNonCondensed

_KKT_CHECK_TOL = 1e-8
_WEAK_ACTIVE_TOL = 1e-7
_ARMIJO = 1e-4
_BACKTRACK = 0.5
_MIN_STEP = 1e-12


@dataclass
class MpcSolution:
    """Primal-dual solution of one instance.

    ``chi`` collects the multipliers of the initial-state pin and the
    dynamics rows, ``zeta`` the pinned-action rows (empty when the action is
    free), ``nu``/``mu``/``eta`` the input-box, state-bound, and
    slack-nonnegativity multipliers in row order.
    """

    z: np.ndarray
    objective: float
    status: str
    lam_eq: np.ndarray
    mu_in: np.ndarray
    active: np.ndarray
    chi: np.ndarray
    zeta: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    x: np.ndarray
    u: np.ndarray
    slack: np.ndarray
    iterations: int
    kkt: dict

    @property
    def u0(self):
        return self.u[0]


def _nlp_kkt(inst, z, lam_eq, mu_in, grad, ceq, J, rin):
    stat = grad + J.T @ lam_eq
    if mu_in.size:
        stat = stat + inst.A_in.T @ mu_in
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0)),
        "primal": float(max(np.abs(ceq).max(initial=0.0), rin.max(initial=0.0))),
        "dual": float(np.maximum(-mu_in, 0.0).max(initial=0.0)),
        "complementarity": float(np.abs(mu_in * rin).max(initial=0.0)),
    }


def _check_kkt(inst, z, lam_eq, mu_in, check_tol):
    grad = inst.H_obj @ z + inst.g_obj
    ceq = inst.eq_residual(z)
    J = inst.eq_jacobian(z)
    rin = inst.A_in @ z - inst.b_in if inst.A_in.shape[0] else np.zeros(0)
    kk = _nlp_kkt(inst, z, lam_eq, mu_in, grad, ceq, J, rin)
    sc_g = 1.0 + float(np.abs(grad).max(initial=0.0))
    sc_z = 1.0 + float(np.abs(z).max(initial=0.0))
    sc_m = 1.0 + float(np.abs(mu_in).max(initial=0.0))
    # NaN comparisons are False, so test finiteness explicitly
    bad = (
        not all(np.isfinite(v) for v in kk.values())
        or kk["stationarity"] > check_tol * sc_g
        or kk["primal"] > check_tol * sc_z
        or kk["dual"] > check_tol * sc_m
        or kk["complementarity"] > check_tol * sc_m * sc_z
    )
    if bad:
        raise SolverError("kkt", f"first-order check failed: {kk}")
    return kk


def _package(inst, z, lam_eq, mu_in, iterations, check_tol):
    kk = _check_kkt(inst, z, lam_eq, mu_in, check_tol)
    rin = inst.A_in @ z - inst.b_in if inst.A_in.shape[0] else np.zeros(0)
    active = rin >= -1e-8 * (1.0 + np.abs(inst.b_in)) if rin.size else np.zeros(0, dtype=bool)
    chi, zeta = inst.split_eq_multipliers(lam_eq)
    kind = inst.in_kind
    nu = mu_in[(kind == ROW_INPUT_LO) | (kind == ROW_INPUT_HI)]
    mu = mu_in[(kind == ROW_STATE_LO) | (kind == ROW_STATE_HI)]
    eta = mu_in[kind == ROW_SLACK]
    x = np.array([z[sl] for sl in inst.idx_x])
    u = np.array([z[sl] for sl in inst.idx_u]) if inst.idx_u else np.zeros((0, inst.n_u))
    slack = np.array([z[sl] for sl in inst.idx_s]) if inst.n_sl else np.zeros((len(inst.idx_x), 0))
    return MpcSolution(
        z=z, objective=inst.objective(z), status="optimal", lam_eq=lam_eq, mu_in=mu_in,
        active=active, chi=chi, zeta=zeta, nu=nu, mu=mu, eta=eta,
        x=x, u=u, slack=slack, iterations=iterations, kkt=kk,
    )


def _subproblem(W, grad, J, ceq, A_in, r_in, active0, p0):
    """One SQP step; Levenberg shifts bail out indefiniteness if needed."""
    tau = 0.0
    bump = 1e-8 * (1.0 + float(np.abs(np.diag(W)).max(initial=0.0)))
    for _ in range(24):
        Wt = W if tau == 0.0 else W + tau * np.eye(W.shape[0])
        res = qp.solve_qp(Wt, grad, J, -ceq, A_in, -r_in, z0=p0, active0=active0)
        if res.status == "optimal":
            return res
        if res.status == "infeasible":
            return res
        tau = bump if tau == 0.0 else 2.0 * tau
    return res


def _merit(inst, z, rho):
    ceq = inst.eq_residual(z)
    rin = inst.A_in @ z - inst.b_in if inst.A_in.shape[0] else np.zeros(0)
    viol = float(np.abs(ceq).sum() + np.maximum(rin, 0.0).sum())
    return inst.objective(z) + rho * viol, viol


def solve(inst, z0=None, active0=None, tol=1e-10, check_tol=_KKT_CHECK_TOL, max_iter=50, log_path=None):
    """Solve an instance to first-order optimality.

    Warm-start data (``z0``, ``active0``) only changes the path taken, never
    the reported solution. ``log_path`` writes one CSV row per iteration.
    Raises SolverError when the subproblem is infeasible or unbounded, when
    the line search stalls, or when the final point fails the optimality
    check at ``check_tol``.
    """
    if inst.linear:
        if z0 is None:
            z_start = inst.initial_point()
        else:
            # re-pin the warm point so the QP skips its equality projection
            z_start = np.asarray(z0, dtype=float).copy()
            if inst.condensed:
                z_start[inst.idx_x[0]] = inst.s
                if inst.pinned:
                    z_start[inst.idx_u[0]] = inst.a
            else:
                z_start = z_start + inst.feasible_step(z_start)
        res = qp.solve_qp(inst.H_obj, inst.g_obj, inst.A_eq, inst.b_eq, inst.A_in, inst.b_in,
                          z0=z_start, active0=active0)
        if res.status != "optimal":
            raise SolverError(res.status, f"QP finished with status {res.status}")
        sol = _package(inst, res.z, res.lam_eq, res.mu_in, res.iterations, check_tol)
        if log_path:
            _write_log(log_path, [(0, 1.0, 0.0, sol.objective, 0.0, 0.0, res.iterations, res.status)])
        return sol

    z = inst.initial_point() if z0 is None else np.asarray(z0, dtype=float).copy()
    lam = np.zeros(inst.n_eq)
    mu = np.zeros(inst.A_in.shape[0])
    act = active0
    rho = 1.0
    rows = []
    for it in range(1, max_iter + 1):
        grad = inst.H_obj @ z + inst.g_obj
        ceq = inst.eq_residual(z)
        J = inst.eq_jacobian(z)
        rin = inst.A_in @ z - inst.b_in if inst.A_in.shape[0] else np.zeros(0)
        kk = _nlp_kkt(inst, z, lam, mu, grad, ceq, J, rin)
        sc_g = 1.0 + float(np.abs(grad).max(initial=0.0))
        sc_z = 1.0 + float(np.abs(z).max(initial=0.0))
        if (kk["stationarity"] <= tol * sc_g and kk["primal"] <= tol * sc_z
                and kk["dual"] <= tol and kk["complementarity"] <= tol * sc_g * sc_z):
            if log_path:
                _write_log(log_path, rows)
            return _package(inst, z, lam, mu, it - 1, check_tol)

        W = inst.lag_hess(z, lam)
        p0 = inst.feasible_step(z)
        sub = _subproblem(W, grad, J, ceq, inst.A_in, rin, act, p0)
        if sub.status != "optimal":
            raise SolverError(sub.status, f"SQP subproblem finished with status {sub.status}")
        p = sub.z
        act = sub.active
        rho = max(rho, 2.0 * float(np.abs(sub.lam_eq).max(initial=0.0)),
                  2.0 * float(sub.mu_in.max(initial=0.0)), 1.0)
        phi0, viol0 = _merit(inst, z, rho)
        descent = float(grad @ p) - rho * viol0
        alpha = 1.0
        while True:
            phi_try, _ = _merit(inst, z + alpha * p, rho)
            if phi_try <= phi0 + _ARMIJO * alpha * descent:
                break
            alpha *= _BACKTRACK
            if alpha < _MIN_STEP:
                raise SolverError("line_search", "merit line search stalled")
        z = z + alpha * p
        lam = (1.0 - alpha) * lam + alpha * sub.lam_eq
        mu = (1.0 - alpha) * mu + alpha * sub.mu_in
        rows.append((it, alpha, float(np.linalg.norm(alpha * p)), inst.objective(z),
                     float(np.abs(inst.eq_residual(z)).max(initial=0.0)), viol0,
                     sub.iterations, sub.status))
    raise SolverError("max_iter", f"no convergence in {max_iter} SQP iterations")


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "alpha", "step_norm", "objective", "eq_viol", "merit_viol", "qp_iters", "qp_status"])
        for row in rows:
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


def _stage_v(inst, z, k):
    return np.concatenate([z[inst.idx_x[k]], z[inst.idx_u[k]]])


def grad_q_theta(inst, sol):
    """Gradient of the optimal value with respect to every parameter block.

    The value function inherits the Lagrangian's partial derivatives at the
    solution, so each block's gradient is read off the terms it enters:
    quadratic blocks pick up outer products of the trajectory, the model
    offset picks up the dynamics multipliers, and the soft bounds pick up
    their rows' multipliers.
    """
    z = sol.z
    if inst.condensed:
        th = inst.theta
        return ThetaCondensed(M=np.outer(z, z), m=z.copy(), c=1.0,
                              C=np.zeros_like(th.C), d=np.zeros_like(th.d),
                              n_x=th.n_x, n_u=th.n_u, N=th.N)
    N, gamma = inst.N, inst.gamma
    gam = gamma ** np.arange(N + 1)
    x0 = z[inst.idx_x[0]]
    xN = z[inst.idx_x[N]]
    nv = inst.n_x + inst.n_u
    g_Hl = np.zeros((nv, nv))
    g_hl = np.zeros(nv)
    for k in range(N):
        vk = _stage_v(inst, z, k)
        g_Hl += gam[k] * 0.5 * np.outer(vk, vk)
        g_hl += gam[k] * vk
    g_cf = np.zeros(inst.n_x)
    for k in range(N):
        g_cf += sol.lam_eq[inst.eq_dyn[k]]
    g_xlo = np.zeros(inst.n_x)
    g_xhi = np.zeros(inst.n_x)
    for i in range(inst.A_in.shape[0]):
        if inst.in_kind[i] == ROW_STATE_LO:
            g_xlo[inst.in_comp[i]] += sol.mu_in[i]
        elif inst.in_kind[i] == ROW_STATE_HI:
            g_xhi[inst.in_comp[i]] -= sol.mu_in[i]
    return ThetaNonCondensed(
        H_lam=0.5 * np.outer(x0, x0), h_lam=x0.copy(), c_lam=1.0,
        H_Vf=0.5 * gam[N] * np.outer(xN, xN), h_Vf=gam[N] * xN, c_Vf=gam[N],
        H_l=g_Hl, h_l=g_hl, c_l=float(np.sum(gam[:N])),
        c_f=g_cf, x_lo=g_xlo, x_hi=g_xhi,
    )


def grad_v_theta(inst, sol):
    """Same as grad_q_theta; the pinned-action rows simply do not appear."""
    return grad_q_theta(inst, sol)


@dataclass
class Sensitivity:
    """Derivatives of the primal-dual solution in each flattened parameter.

    Columns follow ``theta.names()`` order. ``dmu_act`` covers only the
    strictly active inequality rows listed in ``active_rows``; inactive rows
    have identically zero multiplier derivatives.
    """

    dz: np.ndarray
    dlam_eq: np.ndarray
    dmu_act: np.ndarray
    active_rows: np.ndarray
    names: list


def _theta_columns(inst, z, act_rows):
    """Stack d(xi)/d(theta_p) for the KKT map xi = (grad_z L, c_eq, r_act)."""
    n_z, n_eq, n_act = inst.n_z, inst.n_eq, act_rows.size
    n_rows = n_z + n_eq + n_act
    th = inst.theta
    cols = []
    if inst.condensed:
        for i in range(th.n_z):
            for j in range(th.n_z):
                col = np.zeros(n_rows)
                col[i] += z[j]
                col[j] += z[i]
                cols.append(col)
        for i in range(th.n_z):
            col = np.zeros(n_rows)
            col[i] = 1.0
            cols.append(col)
        cols.append(np.zeros(n_rows))
        return np.column_stack(cols)

    N = inst.N
    gam = inst.gamma ** np.arange(N + 1)
    x0s = inst.idx_x[0].start
    xNs = inst.idx_x[N].start
    n_x, n_u = inst.n_x, inst.n_u
    nv = n_x + n_u

    def quad_cols(starts_and_weights, dim):
        out = []
        for i in range(dim):
            for j in range(dim):
                col = np.zeros(n_rows)
                for coords, wgt in starts_and_weights:
                    col[coords[i]] += 0.5 * wgt * z[coords[j]]
                    col[coords[j]] += 0.5 * wgt * z[coords[i]]
                out.append(col)
        return out

    def lin_cols(starts_and_weights, dim):
        out = []
        for i in range(dim):
            col = np.zeros(n_rows)
            for coords, wgt in starts_and_weights:
                col[coords[i]] += wgt
            out.append(col)
        return out

    x0_coords = np.arange(x0s, x0s + n_x)
    xN_coords = np.arange(xNs, xNs + n_x)
    stage_coords = []
    for k in range(N):
        vk = np.r_[np.arange(inst.idx_x[k].start, inst.idx_x[k].stop),
                   np.arange(inst.idx_u[k].start, inst.idx_u[k].stop)]
        stage_coords.append((vk, gam[k]))

    cols.extend(quad_cols([(x0_coords, 1.0)], n_x))       # H_lam
    cols.extend(lin_cols([(x0_coords, 1.0)], n_x))        # h_lam
    cols.append(np.zeros(n_rows))                          # c_lam
    cols.extend(quad_cols([(xN_coords, gam[N])], n_x))     # H_Vf
    cols.extend(lin_cols([(xN_coords, gam[N])], n_x))      # h_Vf
    cols.append(np.zeros(n_rows))                          # c_Vf
    cols.extend(quad_cols(stage_coords, nv))               # H_l
    cols.extend(lin_cols(stage_coords, nv))                # h_l
    cols.append(np.zeros(n_rows))                          # c_l
    for i in range(n_x):                                   # c_f: equality residual shifts
        col = np.zeros(n_rows)
        for k in range(N):
            col[n_z + inst.eq_dyn[k].start + i] = 1.0
        cols.append(col)
    for j in range(n_x):                                   # x_lo: active lo rows move with the bound
        col = np.zeros(n_rows)
        for pos, row in enumerate(act_rows):
            if inst.in_kind[row] == ROW_STATE_LO and inst.in_comp[row] == j:
                col[n_z + n_eq + pos] = 1.0
        cols.append(col)
    for j in range(n_x):                                   # x_hi
        col = np.zeros(n_rows)
        for pos, row in enumerate(act_rows):
            if inst.in_kind[row] == ROW_STATE_HI and inst.in_comp[row] == j:
                col[n_z + n_eq + pos] = -1.0
        cols.append(col)
    return np.column_stack(cols)


def sensitivity_y(inst, sol, weak_tol=_WEAK_ACTIVE_TOL):
    """Differentiate the primal-dual solution through the KKT system.

    Solves K dy = -d(xi)/d(theta) where K is the Jacobian of the stationarity,
    equality, and strictly-active-row residuals in (z, lam, mu_act). Raises
    DegeneracyError when a row sits on the boundary without a solid
    multiplier (within ``weak_tol``), or when the KKT matrix is singular;
    both mean the solution map is not differentiable at this instance.
    """
    z = sol.z
    rin = inst.A_in @ z - inst.b_in if inst.A_in.shape[0] else np.zeros(0)
    near = rin >= -weak_tol
    strict = sol.mu_in > weak_tol
    weak = near & ~strict
    if np.any(weak):
        rows = np.where(weak)[0].tolist()
        raise DegeneracyError(f"active set is ambiguous on rows {rows}: boundary contact with vanishing multiplier")
    act_rows = np.where(strict)[0]
    n_z, n_eq, n_act = inst.n_z, inst.n_eq, act_rows.size
    W = inst.lag_hess(z, sol.lam_eq)
    J = inst.eq_jacobian(z)
    A_act = inst.A_in[act_rows] if n_act else np.zeros((0, n_z))
    n_y = n_z + n_eq + n_act
    K = np.zeros((n_y, n_y))
    K[:n_z, :n_z] = W
    K[:n_z, n_z:n_z + n_eq] = J.T
    K[n_z:n_z + n_eq, :n_z] = J
    if n_act:
        K[:n_z, n_z + n_eq:] = A_act.T
        K[n_z + n_eq:, :n_z] = A_act
    dxi = _theta_columns(inst, z, act_rows)
    try:
        dy = np.linalg.solve(K, -dxi)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(f"KKT matrix is singular: {exc}") from exc
    resid = float(np.abs(K @ dy + dxi).max(initial=0.0))
    if not np.isfinite(resid) or resid > 1e-6 * (1.0 + float(np.abs(dxi).max(initial=0.0))):
        raise DegeneracyError("KKT matrix is numerically singular")
    return Sensitivity(dz=dy[:n_z], dlam_eq=dy[n_z:n_z + n_eq], dmu_act=dy[n_z + n_eq:],
                       active_rows=act_rows, names=inst.theta.names())
