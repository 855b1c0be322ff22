"""Q-learning on top of the controller-shaped approximators.

The learner never looks inside the optimizer: it talks to a backend with a
tiny protocol (``theta``/``set_theta``, ``q(s, a)`` and ``v(s)`` returning a
value, an optional parameter gradient, and the solution). Two backends wrap
the structured and condensed problems; tests plug in toy backends through
the same protocol.

Two update rules are provided. The per-step rule moves the parameters along
the TD error times the value gradient. The windowed rule collects a tumbling
window of transitions, freezes the bootstrap targets once at the window end,
fits the parameters to those targets with a damped Gauss-Newton pass under a
positive-definiteness floor, and then blends the fit back into the running
parameters. Solver failures inside a fit drop the affected pairs; a window
with too many failures is skipped whole rather than half-trusted.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneracyError, QmpcError, SolverError
from .ocp import build_condensed_q, build_condensed_v, build_q_problem, refresh_instance
from .solver import grad_q_theta, grad_v_theta, solve


@dataclass
class LearnerConfig:
    """Knobs shared by the update rules.

    ``alpha`` is both the per-step gain and the blend factor after a window
    fit. ``mode`` picks the rule: "standard" (per step) or "batch" (tumbling
    window of ``n_upd`` transitions). ``mask`` restricts learning to a subset
    of the flattened parameters; None learns every finite entry.
    """

    alpha: float = 1e-2
    epsilon: float = 0.1
    explore_sigma: float = math.sqrt(10.0)
    mode: str = "batch"
    n_upd: int = 500
    pd_eps: float = 1e-6
    gn_tol: float = 1e-8
    gn_max_iter: int = 20
    max_fail_frac: float = 0.1
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("standard", "batch"):
            raise ValueError("mode must be 'standard' or 'batch'")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in [0, 1]")
        if self.n_upd < 1:
            raise ValueError("n_upd must be positive")


@dataclass
class TargetPair:
    """One regression sample for the windowed fit."""

    s: np.ndarray
    a: np.ndarray
    target: float


class MpcQFunction:
    """Structured-parametrization backend.

    Keeps per-key warm starts (primal point and active set) so repeated
    solves along a trajectory or within a fit reuse the previous path.
    Warm data never changes the returned solution, only the work to get it.
    """

    def __init__(self, theta, model, N, gamma, u_lo=None, u_hi=None, W_s=1.0, w_s=1.0,
                 relax=True, solver_opts=None):
        self.theta = theta.copy()
        self.model = model
        self.N = N
        self.gamma = gamma
        self.u_lo = u_lo
        self.u_hi = u_hi
        self.W_s = W_s
        self.w_s = w_s
        self.relax = relax
        self.solver_opts = dict(solver_opts or {})
        self._warm = {}
        self._tpl = {}

    def set_theta(self, theta):
        self.theta = theta.copy()

    def _solve(self, key, inst):
        warm = self._warm.get(key)
        try:
            sol = solve(inst, z0=None if warm is None else warm[0],
                        active0=None if warm is None else warm[1], **self.solver_opts)
        except SolverError:
            if warm is None:
                raise
            sol = solve(inst, **self.solver_opts)
        self._warm[key] = (sol.z.copy(), tuple(np.where(sol.active)[0]))
        return sol

    def _instance(self, s, a):
        pinned = a is not None
        tpl = self._tpl.get(pinned)
        if tpl is not None:
            inst = refresh_instance(tpl, self.theta, s, a)
            if inst is not None:
                return inst
        inst = build_q_problem(self.theta, self.model, s, a, self.N, self.gamma,
                               W_s=self.W_s, w_s=self.w_s, u_lo=self.u_lo, u_hi=self.u_hi,
                               relax=self.relax)
        self._tpl[pinned] = inst
        return inst

    def q(self, s, a, want_grad=False, warm_key=None):
        inst = self._instance(s, np.asarray(a, dtype=float))
        sol = self._solve(warm_key or "q", inst)
        grad = grad_q_theta(inst, sol) if want_grad else None
        return sol.objective, grad, sol

    def v(self, s, want_grad=False, warm_key=None):
        inst = self._instance(s, None)
        sol = self._solve(warm_key or "v", inst)
        grad = grad_v_theta(inst, sol) if want_grad else None
        return sol.objective, grad, sol

    def policy(self, s):
        return self.v(s)[2].u0


class CondensedQFunction:
    """Condensed-parametrization backend with the same protocol."""

    def __init__(self, theta, solver_opts=None):
        self.theta = theta.copy()
        self.solver_opts = dict(solver_opts or {})
        self._warm = {}

    def set_theta(self, theta):
        self.theta = theta.copy()

    def _solve(self, key, inst):
        warm = self._warm.get(key)
        try:
            sol = solve(inst, z0=None if warm is None else warm[0],
                        active0=None if warm is None else warm[1], **self.solver_opts)
        except SolverError:
            if warm is None:
                raise
            sol = solve(inst, **self.solver_opts)
        self._warm[key] = (sol.z.copy(), tuple(np.where(sol.active)[0]))
        return sol

    def q(self, s, a, want_grad=False, warm_key=None):
        inst = build_condensed_q(self.theta, s, a)
        sol = self._solve(warm_key or "q", inst)
        grad = grad_q_theta(inst, sol) if want_grad else None
        return sol.objective, grad, sol

    def v(self, s, want_grad=False, warm_key=None):
        inst = build_condensed_v(self.theta, s)
        sol = self._solve(warm_key or "v", inst)
        grad = grad_v_theta(inst, sol) if want_grad else None
        return sol.objective, grad, sol

    def policy(self, s):
        return self.v(s)[2].u0


def td_error(cost, gamma, q_sa, v_next):
    """Temporal-difference error cost + gamma * V(s') - Q(s, a)."""
    return float(cost) + float(gamma) * float(v_next) - float(q_sa)


def standard_update(theta, grad, delta, alpha):
    """Move theta along the value gradient scaled by the TD error."""
    return theta.unflatten(theta.flatten() + alpha * delta * grad.flatten())


def enforce_pd(theta, eps=1e-6):
    """Clip the constrained blocks' eigenvalues up to at least eps."""
    return theta.pd_project(eps)


def mix(theta, theta_star, alpha):
    """Blend theta toward theta_star, leaving identical entries untouched."""
    return theta.mixed_with(theta_star, alpha)


def explore(rng, a_greedy, epsilon, sigma, u_lo=None, u_hi=None):
    """Epsilon-greedy around the greedy action with saturated Gaussian noise."""
    a_greedy = np.asarray(a_greedy, dtype=float)
    if rng.uniform() < epsilon:
        a = a_greedy + sigma * rng.standard_normal(a_greedy.shape[0])
        if u_lo is not None:
            a = np.maximum(a, u_lo)
        if u_hi is not None:
            a = np.minimum(a, u_hi)
        return a, True
    return a_greedy.copy(), False


def batch_fit(qfun, pairs, config):
    """Fit theta to frozen targets by damped Gauss-Newton under a PD floor.

    Damping is adaptive: the undamped normal equations are used whenever they
    solve cleanly and reduce the squared residual, and a Levenberg shift
    (scaled to the Jacobian) kicks in only when they do not. Every candidate
    is eigenvalue-floored before evaluation, so the returned parameters
    always satisfy the PD constraint. The backend is restored to its entry
    parameters; callers decide how much of the fit to adopt.

    Returns (theta_star, info) where info counts iterations, dropped pairs,
    and the squared residual before and after. Raises SolverError when more
    than ``max_fail_frac`` of the pairs fail to solve.
    """
    theta0 = qfun.theta.copy()
    flat0 = theta0.flatten()
    mask = np.isfinite(flat0) if config.mask is None else np.asarray(config.mask, dtype=bool)
    if mask.shape != flat0.shape:
        raise ValueError("mask must match the flattened parameter length")
    n_pairs = len(pairs)
    if n_pairs == 0:
        raise ValueError("cannot fit an empty window")
    total_fail = 0

    def evaluate(flat, want_jac):
        nonlocal total_fail
        qfun.set_theta(theta0.unflatten(flat))
        res, rows, fails = [], [], 0
        for i, pair in enumerate(pairs):
            try:
                val, grad, _ = qfun.q(pair.s, pair.a, want_grad=want_jac, warm_key=("fit", i))
            except (SolverError, DegeneracyError):
                fails += 1
                continue
            res.append(pair.target - val)
            if want_jac:
                rows.append(grad.flatten()[mask])
        total_fail += fails
        if fails > config.max_fail_frac * n_pairs:
            raise SolverError("fit_failures", f"{fails} of {n_pairs} window pairs failed to solve")
        r = np.array(res)
        J = np.array(rows) if want_jac else None
        return r, J

    try:
        flat = flat0.copy()
        r, J = evaluate(flat, True)
        sse0 = float(r @ r)
        sse = sse0
        iters = 0
        for _ in range(config.gn_max_iter):
            iters += 1
            sse_prev = sse
            JtJ = J.T @ J
            Jtr = J.T @ r
            scale = max(1.0, float(np.trace(JtJ)) / max(1, JtJ.shape[0]))
            tau = 0.0
            accepted = False
            for _trial in range(14):
                A = JtJ if tau == 0.0 else JtJ + tau * scale * np.eye(JtJ.shape[0])
                try:
                    step = np.linalg.solve(A, Jtr)
                except np.linalg.LinAlgError:
                    step = None
                if step is not None and np.all(np.isfinite(step)):
                    cand = flat.copy()
                    cand[mask] = cand[mask] + step
                    theta_cand = enforce_pd(theta0.unflatten(cand), config.pd_eps)
                    cand = theta_cand.flatten()
                    try:
                        r_new, J_new = evaluate(cand, True)
                    except (SolverError, ValueError):
                        # infeasible-to-build candidates (crossed bounds) are
                        # rejected like any other bad step
                        r_new = None
                    if r_new is not None:
                        sse_new = float(r_new @ r_new)
                        if sse_new <= sse * (1.0 - 1e-12) or sse == 0.0:
                            flat, r, J, sse = cand, r_new, J_new, sse_new
                            accepted = True
                            break
                tau = 1e-8 if tau == 0.0 else 10.0 * tau
            if not accepted:
                break
            step_size = float(np.linalg.norm(step))
            if step_size <= config.gn_tol * (1.0 + float(np.linalg.norm(flat[mask]))) or sse == 0.0:
                break
            if sse_prev - sse <= 1e-9 * (1.0 + sse_prev):
                # residual is flat; further iterations only chase roundoff
                break
        theta_star = theta0.unflatten(flat)
        info = {"iterations": iters, "sse_before": sse0, "sse_after": sse, "dropped": total_fail}
        return theta_star, info
    finally:
        qfun.set_theta(theta0)


@dataclass
class History:
    """Per-step training record plus parameter snapshots.

    ``snapshots`` holds (step, flattened theta) pairs taken after each
    parameter change and once at the end. Failure counters separate dropped
    fit pairs from whole skipped windows.
    """

    names: list
    t: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    explored: list = field(default_factory=list)
    state: list = field(default_factory=list)
    action: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    fail_pairs: int = 0
    fail_updates: int = 0

    def record(self, t, delta, cost, explored, s, a):
        self.t.append(int(t))
        self.delta.append(float(delta))
        self.cost.append(float(cost))
        self.explored.append(bool(explored))
        self.state.append(np.asarray(s, dtype=float).copy())
        self.action.append(np.asarray(a, dtype=float).copy())

    def snapshot(self, t, theta):
        self.snapshots.append((int(t), theta.flatten().copy()))

    def rolling_abs_td(self, window=1000):
        """Mean of |delta| over a trailing window at every step."""
        arr = np.abs(np.asarray(self.delta, dtype=float))
        if arr.size == 0:
            return arr
        csum = np.concatenate([[0.0], np.cumsum(arr)])
        idx = np.arange(1, arr.size + 1)
        lo = np.maximum(idx - window, 0)
        return (csum[idx] - csum[lo]) / (idx - lo)

    def initial_abs_td(self, window=1000):
        arr = np.abs(np.asarray(self.delta, dtype=float))
        return float(arr[:window].mean()) if arr.size else float("nan")

    def final_abs_td(self, window=1000):
        arr = np.abs(np.asarray(self.delta, dtype=float))
        return float(arr[-window:].mean()) if arr.size else float("nan")

    def to_td_csv(self, path, window=1000):
        roll = self.rolling_abs_td(window)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "delta", "rolling_abs_td", "explored", "cost"])
            for i in range(len(self.t)):
                writer.writerow([self.t[i], f"{self.delta[i]:.17g}", f"{roll[i]:.17g}",
                                 int(self.explored[i]), f"{self.cost[i]:.17g}"])

    def to_theta_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + list(self.names))
            for t, flat in self.snapshots:
                writer.writerow([t] + [f"{v:.17g}" for v in flat])


def train(env, qfun, steps, config=None, rng=None, s0=None):
    """Run closed-loop learning for a number of environment steps.

    The greedy action at each state reuses the value solve from the previous
    step's bootstrap, so a non-exploring step costs two solves in standard
    mode and one in batch mode. Returns a History. If a solve or the
    environment fails irrecoverably mid-run, the partial History is attached
    to the raised exception as ``exc.history``.
    """
    config = LearnerConfig() if config is None else config
    rng = np.random.default_rng() if rng is None else rng
    standard = config.mode == "standard"
    s = np.asarray(env.init_state if s0 is None else s0, dtype=float).copy()
    hist = History(names=qfun.theta.names())
    hist.snapshot(0, qfun.theta)
    gamma = env.spec.gamma
    window = []
    try:
        v_s, grad_s, sol_s = qfun.v(s, want_grad=standard)
        for t in range(steps):
            if standard:
                # theta moved last step, so the cached value solve is stale
                v_s, grad_s, sol_s = qfun.v(s, want_grad=True)
            a, explored = explore(rng, sol_s.u0, config.epsilon, config.explore_sigma,
                                  env.spec.u_lo, env.spec.u_hi)
            if explored:
                q_sa, grad_q, _ = qfun.q(s, a, want_grad=standard)
            else:
                q_sa, grad_q = v_s, grad_s
            tr = env.step(s, a, rng)
            v_next, grad_next, sol_next = qfun.v(tr.s_next, want_grad=standard)
            delta = td_error(tr.cost, gamma, q_sa, v_next)
            hist.record(t, delta, tr.cost, explored, s, a)

            if standard:
                theta_new = standard_update(qfun.theta, grad_q, delta, config.alpha)
                theta_new = enforce_pd(theta_new, config.pd_eps)
                qfun.set_theta(theta_new)
                if (t + 1) % config.n_upd == 0:
                    hist.snapshot(t + 1, qfun.theta)
            else:
                window.append(TargetPair(s=s.copy(), a=np.asarray(a, dtype=float).copy(),
                                         target=tr.cost + gamma * v_next))
                if len(window) == config.n_upd:
                    try:
                        theta_star, info = batch_fit(qfun, window, config)
                        hist.fail_pairs += info["dropped"]
                        theta_new = enforce_pd(mix(qfun.theta, theta_star, config.alpha), config.pd_eps)
                        qfun.set_theta(theta_new)
                    except SolverError:
                        hist.fail_updates += 1
                    window = []
                    hist.snapshot(t + 1, qfun.theta)
                    v_next, grad_next, sol_next = qfun.v(tr.s_next, want_grad=standard)

            s = tr.s_next
            v_s, grad_s, sol_s = v_next, grad_next, sol_next
    except QmpcError as exc:
        if not hist.snapshots or hist.snapshots[-1][0] != len(hist.t):
            hist.snapshot(len(hist.t), qfun.theta)
        exc.history = hist
        raise
    if not hist.snapshots or hist.snapshots[-1][0] != steps:
        hist.snapshot(steps, qfun.theta)
    return hist
