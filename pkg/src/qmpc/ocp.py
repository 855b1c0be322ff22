"""Builders that turn parameter blocks into concrete optimal control problems.

The structured (non-condensed) form keeps the full state/control/slack
trajectory as decision variables:

    min  lam(x_0) + g^N Vf(x_N) + sum_k g^k l(x_k, u_k)
         + sum_k g^k (s_k' W_s s_k + w_s' s_k)
    s.t. x_0 = s,  (u_0 = a for the pinned action-value problem),
         x_{k+1} = f(x_k, u_k) + c_f,
         u_lo <= u_k <= u_hi,
         soft state bounds x_lo - x_k <= s_k, x_k - x_hi <= s_k, s_k >= 0.

Slack variables exist only for finite bound components; infinite entries in
x_lo/x_hi drop their rows entirely. The slack penalty (quadratic plus a
linear weight with positive entries) is an exact relaxation whenever the
linear weight dominates the hard problem's multipliers, so feasible
instances are solved unchanged while infeasible ones degrade gracefully.

The condensed form works directly on z = (x_0, u_0, ..., u_{N-1}) with value
z'Mz + m'z + c and fixed constraint rows C z <= d; ``condense_lti`` produces
those coefficients from structured blocks and a linear model, which is the
bridge used to cross-check the two forms against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ThetaCondensed, ThetaNonCondensed, _sym

ROW_INPUT_LO = 0
ROW_INPUT_HI = 1
ROW_STATE_LO = 2
ROW_STATE_HI = 3
ROW_SLACK = 4
ROW_GENERIC = 5


@dataclass
class OcpInstance:
    """A fully assembled problem instance consumed by the solver.

    Carries the numeric objective (0.5 z'Hz + g'z + c convention), affine
    inequality rows with per-row provenance, the equality structure (pins and
    dynamics), and index maps back into states, controls, and slacks. For a
    linear model the equalities are cached as a matrix; nonlinear models are
    evaluated through the residual/Jacobian callbacks.
    """

    theta: object
    s: np.ndarray
    a: np.ndarray | None
    N: int
    gamma: float
    model: object | None
    condensed: bool
    relax: bool
    u_lo: np.ndarray | None
    u_hi: np.ndarray | None
    W_s: np.ndarray | None
    w_s: np.ndarray | None
    n_x: int
    n_u: int
    n_sl: int
    n_z: int
    idx_x: list
    idx_u: list
    idx_s: list
    lo_idx: np.ndarray
    hi_idx: np.ndarray
    H_obj: np.ndarray
    g_obj: np.ndarray
    c_obj: float
    A_in: np.ndarray
    b_in: np.ndarray
    in_kind: np.ndarray
    in_stage: np.ndarray
    in_comp: np.ndarray
    eq_pin_x: slice = field(default=slice(0, 0))
    eq_pin_u: slice | None = None
    eq_dyn: list = field(default_factory=list)
    n_eq: int = 0
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    @property
    def pinned(self):
        return self.a is not None

    @property
    def linear(self):
        return self.condensed or getattr(self.model, "linear", False)

    def objective(self, z):
        return float(0.5 * z @ self.H_obj @ z + self.g_obj @ z + self.c_obj)

    def eq_residual(self, z):
        if self.A_eq is not None:
            return self.A_eq @ z - self.b_eq
        r = np.zeros(self.n_eq)
        r[self.eq_pin_x] = z[self.idx_x[0]] - self.s
        if self.eq_pin_u is not None:
            r[self.eq_pin_u] = z[self.idx_u[0]] - self.a
        c_f = self.theta.c_f
        if hasattr(self.model, "f_all"):
            X = np.stack([z[self.idx_x[k]] for k in range(self.N)])
            U = np.stack([z[self.idx_u[k]] for k in range(self.N)])
            Xn = np.stack([z[self.idx_x[k + 1]] for k in range(self.N)])
            # dynamics rows are laid out consecutively after the pins
            r[self.eq_dyn[0].start: self.eq_dyn[-1].stop] = (self.model.f_all(X, U) + c_f - Xn).ravel()
            return r
        for k in range(self.N):
            xk = z[self.idx_x[k]]
            uk = z[self.idx_u[k]]
            r[self.eq_dyn[k]] = self.model.f(xk, uk) + c_f - z[self.idx_x[k + 1]]
        return r

    def eq_jacobian(self, z):
        if self.A_eq is not None:
            return self.A_eq
        J = np.zeros((self.n_eq, self.n_z))
        J[self.eq_pin_x, self.idx_x[0]] = np.eye(self.n_x)
        if self.eq_pin_u is not None:
            J[self.eq_pin_u, self.idx_u[0]] = np.eye(self.n_u)
        for k in range(self.N):
            Fx, Fu = self.model.jac(z[self.idx_x[k]], z[self.idx_u[k]])
            J[self.eq_dyn[k], self.idx_x[k]] = Fx
            J[self.eq_dyn[k], self.idx_u[k]] = Fu
            J[self.eq_dyn[k], self.idx_x[k + 1]] = -np.eye(self.n_x)
        return J

    def lag_hess(self, z, lam_eq):
        """Hessian of the Lagrangian in z (objective plus dynamics curvature)."""
        if self.linear:
            return self.H_obj
        H = self.H_obj.copy()
        for k in range(self.N):
            lam_k = lam_eq[self.eq_dyn[k]]
            Hd = self.model.hess(z[self.idx_x[k]], z[self.idx_u[k]], lam_k)
            # x_k and u_k are adjacent in the layout, so one slice covers v_k
            vk = slice(self.idx_x[k].start, self.idx_u[k].stop)
            H[vk, vk] += Hd
        return H

    def initial_point(self):
        """A feasible-by-construction primal start (rollout plus slack lift)."""
        z = np.zeros(self.n_z)
        if self.condensed:
            z[self.idx_x[0]] = self.s
            for k in range(self.N):
                z[self.idx_u[k]] = self.a if (k == 0 and self.pinned) else _box_mid(self.u_lo, self.u_hi, self.n_u)
            return z
        z[self.idx_x[0]] = self.s
        for k in range(self.N):
            uk = self.a if (k == 0 and self.pinned) else _box_mid(self.u_lo, self.u_hi, self.n_u)
            z[self.idx_u[k]] = uk
            z[self.idx_x[k + 1]] = self.model.f(z[self.idx_x[k]], uk) + self.theta.c_f
        if self.n_sl:
            lo = self.theta.x_lo[self.lo_idx]
            hi = self.theta.x_hi[self.hi_idx]
            for k in range(self.N + 1):
                xk = z[self.idx_x[k]]
                viol = np.concatenate([np.maximum(lo - xk[self.lo_idx], 0.0), np.maximum(xk[self.hi_idx] - hi, 0.0)])
                z[self.idx_s[k]] = viol
        return z

    def feasible_step(self, z):
        """A step p that satisfies the linearized equalities and all inequality rows.

        Used to start the quadratic subproblem at a feasible point without a
        phase-1 solve: controls stay put (they are already inside their box),
        states follow the linearized dynamics to absorb the equality residual,
        and slacks are lifted to the violations of the shifted states.
        """
        p = np.zeros(self.n_z)
        p[self.idx_x[0]] = self.s - z[self.idx_x[0]]
        if self.eq_pin_u is not None:
            p[self.idx_u[0]] = self.a - z[self.idx_u[0]]
        for k in range(self.N):
            xk, uk = z[self.idx_x[k]], z[self.idx_u[k]]
            Fx, Fu = self.model.jac(xk, uk)
            r_k = self.model.f(xk, uk) + self.theta.c_f - z[self.idx_x[k + 1]]
            p[self.idx_x[k + 1]] = r_k + Fx @ p[self.idx_x[k]] + Fu @ p[self.idx_u[k]]
        if self.n_sl:
            lo = self.theta.x_lo[self.lo_idx]
            hi = self.theta.x_hi[self.hi_idx]
            for k in range(self.N + 1):
                xk = z[self.idx_x[k]] + p[self.idx_x[k]]
                need = np.concatenate([np.maximum(lo - xk[self.lo_idx], 0.0),
                                       np.maximum(xk[self.hi_idx] - hi, 0.0)])
                p[self.idx_s[k]] = need - z[self.idx_s[k]]
        return p

    def split_eq_multipliers(self, lam_eq):
        """Split equality multipliers into (chi, zeta)."""
        chi = np.concatenate([lam_eq[self.eq_pin_x]] + [lam_eq[self.eq_dyn[k]] for k in range(self.N)]) if not self.condensed else lam_eq[self.eq_pin_x]
        zeta = lam_eq[self.eq_pin_u] if self.eq_pin_u is not None else np.zeros(0)
        return chi, zeta

    def debug_text(self):
        kind = "condensed" if self.condensed else "noncondensed"
        lines = [
            f"ocp kind={kind} pinned={'yes' if self.pinned else 'no'} N={self.N} gamma={self.gamma:.10g}",
            f"dims: n_x={self.n_x} n_u={self.n_u} n_slack_stage={self.n_sl} n_z={self.n_z} n_eq={self.n_eq} n_in={self.A_in.shape[0]}",
        ]
        counts = {name: int(np.sum(self.in_kind == code)) for name, code in
                  [("input", ROW_INPUT_LO), ("state", ROW_STATE_LO), ("slack", ROW_SLACK), ("generic", ROW_GENERIC)]}
        counts["input"] += int(np.sum(self.in_kind == ROW_INPUT_HI))
        counts["state"] += int(np.sum(self.in_kind == ROW_STATE_HI))
        lines.append("rows: " + " ".join(f"{k}={v}" for k, v in counts.items()))
        lines.append(f"sparsity: H_obj nnz={int(np.sum(self.H_obj != 0))} A_in nnz={int(np.sum(self.A_in != 0))}")
        lines.append("blocks:")
        for name in self.theta.LEARNABLE:
            val = np.asarray(getattr(self.theta, name), dtype=float)
            fro = float(np.sqrt(np.sum(np.where(np.isfinite(val), val, 0.0) ** 2)))
            shape = "scalar" if val.ndim == 0 else "x".join(str(d) for d in val.shape)
            lines.append(f"  {name} shape={shape} fro={fro:.10g}")
        return "\n".join(lines) + "\n"


def _box_mid(lo, hi, n):
    if lo is None or hi is None:
        return np.zeros(n)
    mid = np.zeros(n)
    both = np.isfinite(lo) & np.isfinite(hi)
    mid[both] = 0.5 * (lo[both] + hi[both])
    return np.clip(mid, lo, hi)


def _expand_weight(W, n):
    W = np.asarray(W, dtype=float)
    if W.ndim == 0:
        return float(W) * np.eye(n)
    if W.ndim == 1:
        return np.diag(np.broadcast_to(W, (n,)))
    if W.shape != (n, n):
        raise ValueError(f"slack weight matrix must be {n}x{n}")
    return W.copy()


def _expand_vec(w, n):
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return np.full(n, float(w))
    return np.broadcast_to(w, (n,)).astype(float).copy()


def _fill_objective(theta, N, gam, idx_x, idx_u, idx_s, n_z, W, w, n_sl):
    H = np.zeros((n_z, n_z))
    g = np.zeros(n_z)
    c = theta.c_lam + float(np.sum(gam[:N])) * theta.c_l + gam[N] * theta.c_Vf
    H[idx_x[0], idx_x[0]] += _sym(theta.H_lam)
    g[idx_x[0]] += theta.h_lam
    Hl = _sym(theta.H_l)
    for k in range(N):
        # x_k and u_k are adjacent in the layout, so one slice covers v_k
        vk = slice(idx_x[k].start, idx_u[k].stop)
        H[vk, vk] += gam[k] * Hl
        g[vk] += gam[k] * theta.h_l
    H[idx_x[N], idx_x[N]] += gam[N] * _sym(theta.H_Vf)
    g[idx_x[N]] += gam[N] * theta.h_Vf
    if n_sl:
        for k in range(N + 1):
            H[idx_s[k], idx_s[k]] += 2.0 * gam[k] * W
            g[idx_s[k]] += gam[k] * w
    return H, g, c


def refresh_instance(tpl, theta, s, a):
    """A new instance from a template built by ``build_q_problem``.

    Shares the static constraint arrays (A_in, index maps, the linear
    equality Jacobian) and refreshes everything that depends on theta, s, or
    a. The caller must keep the bound-finiteness pattern, the horizon, and
    the pinnedness unchanged; dimension or pattern changes need a fresh
    build. Returns None when the template does not match so callers can fall
    back to a full build.
    """
    if tpl.condensed or (a is not None) != tpl.pinned:
        return None
    if theta.n_x != tpl.n_x or theta.n_u != tpl.n_u:
        return None
    lo_idx = np.where(np.isfinite(theta.x_lo))[0]
    hi_idx = np.where(np.isfinite(theta.x_hi))[0]
    if not (np.array_equal(lo_idx, tpl.lo_idx) and np.array_equal(hi_idx, tpl.hi_idx)):
        return None
    both = np.intersect1d(lo_idx, hi_idx)
    if np.any(theta.x_lo[both] > theta.x_hi[both]):
        raise ValueError("x_lo exceeds x_hi on a finite component")
    s = np.asarray(s, dtype=float)
    if s.shape != (tpl.n_x,) or not np.all(np.isfinite(s)):
        raise ValueError("initial state must be a finite vector of state dimension")
    if a is not None:
        a = np.asarray(a, dtype=float)
        if a.shape != (tpl.n_u,) or not np.all(np.isfinite(a)):
            raise ValueError("pinned action must be a finite control vector")
        if np.any(a < tpl.u_lo - 1e-9) or np.any(a > tpl.u_hi + 1e-9):
            raise ValueError(f"pinned action {a} violates the control box [{tpl.u_lo}, {tpl.u_hi}]")
    N = tpl.N
    gam = tpl.gamma ** np.arange(N + 1)
    H, g, c = _fill_objective(theta, N, gam, tpl.idx_x, tpl.idx_u, tpl.idx_s,
                              tpl.n_z, tpl.W_s, tpl.w_s, tpl.n_sl)
    b_in = tpl.b_in.copy()
    lo_rows = tpl.in_kind == ROW_STATE_LO
    hi_rows = tpl.in_kind == ROW_STATE_HI
    b_in[lo_rows] = -theta.x_lo[tpl.in_comp[lo_rows]]
    b_in[hi_rows] = theta.x_hi[tpl.in_comp[hi_rows]]
    inst = OcpInstance(
        theta=theta.copy(), s=s, a=None if a is None else a.copy(), N=N, gamma=tpl.gamma,
        model=tpl.model, condensed=False, relax=tpl.relax, u_lo=tpl.u_lo, u_hi=tpl.u_hi,
        W_s=tpl.W_s, w_s=tpl.w_s, n_x=tpl.n_x, n_u=tpl.n_u, n_sl=tpl.n_sl, n_z=tpl.n_z,
        idx_x=tpl.idx_x, idx_u=tpl.idx_u, idx_s=tpl.idx_s, lo_idx=tpl.lo_idx, hi_idx=tpl.hi_idx,
        H_obj=H, g_obj=g, c_obj=float(c), A_in=tpl.A_in, b_in=b_in,
        in_kind=tpl.in_kind, in_stage=tpl.in_stage, in_comp=tpl.in_comp,
        eq_pin_x=tpl.eq_pin_x, eq_pin_u=tpl.eq_pin_u, eq_dyn=tpl.eq_dyn, n_eq=tpl.n_eq,
    )
    if tpl.A_eq is not None:
        b_eq = np.zeros(tpl.n_eq)
        b_eq[tpl.eq_pin_x] = s
        if tpl.eq_pin_u is not None:
            b_eq[tpl.eq_pin_u] = a
        for k in range(N):
            b_eq[tpl.eq_dyn[k]] = -theta.c_f
        inst.A_eq = tpl.A_eq
        inst.b_eq = b_eq
    return inst


def build_q_problem(theta, model, s, a, N, gamma, W_s=1.0, w_s=1.0, u_lo=None, u_hi=None, relax=True):
    """Assemble the pinned (action-value) structured problem.

    ``a=None`` gives the value-function variant; ``build_v_problem`` is the
    readable spelling of that. When the action is pinned, its box rows are
    dropped so a saturated action does not duplicate the pin constraint.
    """
    if not isinstance(theta, ThetaNonCondensed):
        raise ValueError("structured builder needs a ThetaNonCondensed")
    if N < 1:
        raise ValueError("horizon must be at least 1")
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    n_x, n_u = theta.n_x, theta.n_u
    if model.n_x != n_x or model.n_u != n_u:
        raise ValueError("model dimensions do not match theta")
    s = np.asarray(s, dtype=float)
    if s.shape != (n_x,) or not np.all(np.isfinite(s)):
        raise ValueError("initial state must be a finite vector of state dimension")
    u_lo = np.full(n_u, -np.inf) if u_lo is None else np.broadcast_to(np.asarray(u_lo, dtype=float), (n_u,)).copy()
    u_hi = np.full(n_u, np.inf) if u_hi is None else np.broadcast_to(np.asarray(u_hi, dtype=float), (n_u,)).copy()
    if np.any(u_lo >= u_hi):
        raise ValueError("u_lo must be strictly below u_hi")
    if a is not None:
        a = np.asarray(a, dtype=float)
        if a.shape != (n_u,) or not np.all(np.isfinite(a)):
            raise ValueError("pinned action must be a finite control vector")
        if np.any(a < u_lo - 1e-9) or np.any(a > u_hi + 1e-9):
            raise ValueError(f"pinned action {a} violates the control box [{u_lo}, {u_hi}]")

    lo_idx = np.where(np.isfinite(theta.x_lo))[0]
    hi_idx = np.where(np.isfinite(theta.x_hi))[0]
    both = np.intersect1d(lo_idx, hi_idx)
    if np.any(theta.x_lo[both] > theta.x_hi[both]):
        raise ValueError("x_lo exceeds x_hi on a finite component")
    n_bound = lo_idx.size + hi_idx.size
    n_sl = n_bound if (relax and n_bound) else 0

    # variable layout: [x_k u_k s_k]*N then [x_N s_N]
    idx_x, idx_u, idx_s = [], [], []
    pos = 0
    for k in range(N):
        idx_x.append(slice(pos, pos + n_x)); pos += n_x
        idx_u.append(slice(pos, pos + n_u)); pos += n_u
        idx_s.append(slice(pos, pos + n_sl)); pos += n_sl
    idx_x.append(slice(pos, pos + n_x)); pos += n_x
    idx_s.append(slice(pos, pos + n_sl)); pos += n_sl
    n_z = pos

    gam = gamma ** np.arange(N + 1)
    W = _expand_weight(W_s, n_sl) if n_sl else None
    w = _expand_vec(w_s, n_sl) if n_sl else None
    H, g, c = _fill_objective(theta, N, gam, idx_x, idx_u, idx_s, n_z, W, w, n_sl)

    # inequality rows: input boxes first, then state bounds, then slack signs
    rows, rhs, kinds, stages, comps = [], [], [], [], []
    u_stages = range(1, N) if a is not None else range(N)
    for k in u_stages:
        for j in range(n_u):
            if np.isfinite(u_lo[j]):
                row = np.zeros(n_z); row[idx_u[k].start + j] = -1.0
                rows.append(row); rhs.append(-u_lo[j]); kinds.append(ROW_INPUT_LO); stages.append(k); comps.append(j)
        for j in range(n_u):
            if np.isfinite(u_hi[j]):
                row = np.zeros(n_z); row[idx_u[k].start + j] = 1.0
                rows.append(row); rhs.append(u_hi[j]); kinds.append(ROW_INPUT_HI); stages.append(k); comps.append(j)
    for k in range(N + 1):
        for pos_sl, j in enumerate(lo_idx):
            row = np.zeros(n_z); row[idx_x[k].start + j] = -1.0
            if n_sl:
                row[idx_s[k].start + pos_sl] = -1.0
            rows.append(row); rhs.append(-theta.x_lo[j]); kinds.append(ROW_STATE_LO); stages.append(k); comps.append(j)
        for pos_sl, j in enumerate(hi_idx):
            row = np.zeros(n_z); row[idx_x[k].start + j] = 1.0
            if n_sl:
                row[idx_s[k].start + lo_idx.size + pos_sl] = -1.0
            rows.append(row); rhs.append(theta.x_hi[j]); kinds.append(ROW_STATE_HI); stages.append(k); comps.append(j)
    if n_sl:
        for k in range(N + 1):
            for j in range(n_sl):
                row = np.zeros(n_z); row[idx_s[k].start + j] = -1.0
                rows.append(row); rhs.append(0.0); kinds.append(ROW_SLACK); stages.append(k); comps.append(j)
    A_in = np.array(rows) if rows else np.zeros((0, n_z))
    b_in = np.array(rhs)

    # equality layout: x0 pin, optional u0 pin, then dynamics stages
    n_eq = n_x + (n_u if a is not None else 0) + N * n_x
    eq_pin_x = slice(0, n_x)
    off = n_x
    eq_pin_u = None
    if a is not None:
        eq_pin_u = slice(off, off + n_u)
        off += n_u
    eq_dyn = []
    for k in range(N):
        eq_dyn.append(slice(off, off + n_x))
        off += n_x

    inst = OcpInstance(
        theta=theta.copy(), s=s, a=None if a is None else a.copy(), N=N, gamma=gamma, model=model,
        condensed=False, relax=relax, u_lo=u_lo, u_hi=u_hi, W_s=W, w_s=w,
        n_x=n_x, n_u=n_u, n_sl=n_sl, n_z=n_z, idx_x=idx_x, idx_u=idx_u, idx_s=idx_s,
        lo_idx=lo_idx, hi_idx=hi_idx, H_obj=H, g_obj=g, c_obj=float(c),
        A_in=A_in, b_in=b_in, in_kind=np.array(kinds, dtype=int), in_stage=np.array(stages, dtype=int),
        in_comp=np.array(comps, dtype=int), eq_pin_x=eq_pin_x, eq_pin_u=eq_pin_u, eq_dyn=eq_dyn, n_eq=n_eq,
    )
    if getattr(model, "linear", False):
        A_eq = _linear_eq_jacobian(inst)
        b_eq = np.zeros(n_eq)
        b_eq[eq_pin_x] = s
        if eq_pin_u is not None:
            b_eq[eq_pin_u] = a
        for k in range(N):
            b_eq[eq_dyn[k]] = -theta.c_f
        inst.A_eq = A_eq
        inst.b_eq = b_eq
    return inst


def build_v_problem(theta, model, s, N, gamma, W_s=1.0, w_s=1.0, u_lo=None, u_hi=None, relax=True):
    return build_q_problem(theta, model, s, None, N, gamma, W_s=W_s, w_s=w_s, u_lo=u_lo, u_hi=u_hi, relax=relax)


def _condensed_instance(thetac, s, a):
    n_x, n_u, N = thetac.n_x, thetac.n_u, thetac.N
    s = np.asarray(s, dtype=float)
    if s.shape != (n_x,) or not np.all(np.isfinite(s)):
        raise ValueError("initial state must be a finite vector of state dimension")
    if a is not None:
        a = np.asarray(a, dtype=float)
        if a.shape != (n_u,) or not np.all(np.isfinite(a)):
            raise ValueError("pinned action must be a finite control vector")
    n_z = thetac.n_z
    idx_x = [slice(0, n_x)]
    idx_u = [slice(n_x + k * n_u, n_x + (k + 1) * n_u) for k in range(N)]
    H = 2.0 * _sym(thetac.M)
    g = thetac.m.copy()
    n_eq = n_x + (n_u if a is not None else 0)
    eq_pin_x = slice(0, n_x)
    eq_pin_u = slice(n_x, n_x + n_u) if a is not None else None
    A_eq = np.zeros((n_eq, n_z))
    A_eq[eq_pin_x, idx_x[0]] = np.eye(n_x)
    b_eq = np.zeros(n_eq)
    b_eq[eq_pin_x] = s
    if a is not None:
        A_eq[eq_pin_u, idx_u[0]] = np.eye(n_u)
        b_eq[eq_pin_u] = a
    m_in = thetac.C.shape[0]
    inst = OcpInstance(
        theta=thetac.copy(), s=s, a=None if a is None else a.copy(), N=N, gamma=1.0, model=None,
        condensed=True, relax=False, u_lo=None, u_hi=None, W_s=None, w_s=None,
        n_x=n_x, n_u=n_u, n_sl=0, n_z=n_z, idx_x=idx_x, idx_u=idx_u, idx_s=[],
        lo_idx=np.zeros(0, dtype=int), hi_idx=np.zeros(0, dtype=int),
        H_obj=H, g_obj=g, c_obj=float(thetac.c),
        A_in=thetac.C.copy(), b_in=thetac.d.copy(),
        in_kind=np.full(m_in, ROW_GENERIC, dtype=int), in_stage=np.zeros(m_in, dtype=int),
        in_comp=np.arange(m_in, dtype=int),
        eq_pin_x=eq_pin_x, eq_pin_u=eq_pin_u, eq_dyn=[], n_eq=n_eq, A_eq=A_eq, b_eq=b_eq,
    )
    return inst


def build_condensed_q(thetac, s, a):
    """Condensed action-value instance (x0 and u0 pinned)."""
    if a is None:
        raise ValueError("condensed Q problem needs a pinned action; use build_condensed_v")
    return _condensed_instance(thetac, s, a)


def build_condensed_v(thetac, s):
    """Condensed value instance (only x0 pinned)."""
    return _condensed_instance(thetac, s, None)


def condense_lti(theta, model, N, gamma, u_lo=None, u_hi=None):
    """Collapse structured blocks plus a linear model into condensed coefficients.

    Requires all state bounds infinite: soft state constraints have no
    counterpart in the condensed decision vector. Input boxes become rows of
    C z <= d.
    """
    if not isinstance(theta, ThetaNonCondensed):
        raise ValueError("condensation starts from a ThetaNonCondensed")
    if not getattr(model, "linear", False):
        raise ValueError("condensation needs a linear model")
    if np.any(np.isfinite(theta.x_lo)) or np.any(np.isfinite(theta.x_hi)):
        raise ValueError("condensation requires unbounded states (soft bounds cannot be condensed)")
    n_x, n_u = theta.n_x, theta.n_u
    A, B = model.A, model.B
    n_z = n_x + N * n_u
    gam = gamma ** np.arange(N + 1)

    # x_k = Phi_k z + phi_k with z = (x0, u0..u_{N-1})
    Phi = np.zeros((N + 1, n_x, n_z))
    phi = np.zeros((N + 1, n_x))
    Phi[0][:, :n_x] = np.eye(n_x)
    for k in range(N):
        Phi[k + 1] = A @ Phi[k]
        Phi[k + 1][:, n_x + k * n_u: n_x + (k + 1) * n_u] += B
        phi[k + 1] = A @ phi[k] + theta.c_f

    H = np.zeros((n_z, n_z))
    g = np.zeros(n_z)
    c = theta.c_lam + float(np.sum(gam[:N])) * theta.c_l + gam[N] * theta.c_Vf
    H_lam = _sym(theta.H_lam)
    H[:n_x, :n_x] += H_lam
    g[:n_x] += theta.h_lam
    Hl = _sym(theta.H_l)
    for k in range(N):
        Psi = np.vstack([Phi[k], np.zeros((n_u, n_z))])
        Psi[n_x:, n_x + k * n_u: n_x + (k + 1) * n_u] = np.eye(n_u)
        psi = np.concatenate([phi[k], np.zeros(n_u)])
        H += gam[k] * Psi.T @ Hl @ Psi
        g += Psi.T @ (gam[k] * (theta.h_l + Hl @ psi))
        c += gam[k] * (0.5 * psi @ Hl @ psi + theta.h_l @ psi)
    HV = _sym(theta.H_Vf)
    H += gam[N] * Phi[N].T @ HV @ Phi[N]
    g += Phi[N].T @ (gam[N] * (theta.h_Vf + HV @ phi[N]))
    c += gam[N] * (0.5 * phi[N] @ HV @ phi[N] + theta.h_Vf @ phi[N])

    rows, rhs = [], []
    if u_lo is not None or u_hi is not None:
        u_lo = np.full(n_u, -np.inf) if u_lo is None else np.broadcast_to(np.asarray(u_lo, dtype=float), (n_u,))
        u_hi = np.full(n_u, np.inf) if u_hi is None else np.broadcast_to(np.asarray(u_hi, dtype=float), (n_u,))
        for k in range(N):
            for j in range(n_u):
                if np.isfinite(u_lo[j]):
                    row = np.zeros(n_z); row[n_x + k * n_u + j] = -1.0
                    rows.append(row); rhs.append(-u_lo[j])
                if np.isfinite(u_hi[j]):
                    row = np.zeros(n_z); row[n_x + k * n_u + j] = 1.0
                    rows.append(row); rhs.append(u_hi[j])
    C = np.array(rows) if rows else np.zeros((0, n_z))
    d = np.array(rhs)
    return ThetaCondensed(M=0.5 * H, m=g, c=float(c), C=C, d=d, n_x=n_x, n_u=n_u, N=N)


def _linear_eq_jacobian(inst):
    J = np.zeros((inst.n_eq, inst.n_z))
    J[inst.eq_pin_x, inst.idx_x[0]] = np.eye(inst.n_x)
    if inst.eq_pin_u is not None:
        J[inst.eq_pin_u, inst.idx_u[0]] = np.eye(inst.n_u)
    A, B = inst.model.A, inst.model.B
    for k in range(inst.N):
        J[inst.eq_dyn[k], inst.idx_x[k]] = A
        J[inst.eq_dyn[k], inst.idx_u[k]] = B
        J[inst.eq_dyn[k], inst.idx_x[k + 1]] = -np.eye(inst.n_x)
    return J
