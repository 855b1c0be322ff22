"""Simulation environments and their nominal prediction models.

Two families ship: a linear-quadratic testbed with additive Gaussian state
noise, and a two-state evaporation-like process with smooth nonlinear
dynamics, four exogenous stochastic inputs, and an economic stage cost. The
evaporation dynamics are a documented surrogate: they reproduce the shape of
the classic forced-circulation evaporator benchmark (concentration/pressure
states, steam/cooling-water controls, the same operating bounds and
disturbance scales) without being that model's equations.

Environments are passive: ``step`` consumes an explicit state, action, and
random generator, so trajectories are exactly reproducible from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import QmpcError
from .lqr import LqrCost, lqr_stage_cost

_DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class EnvSpec:
    """Dimensions, discount, bounds, and disturbance distribution of an env.

    ``x_lo``/``x_hi`` are the true state bounds used for violation reporting
    (None when the environment has none). ``w_mean``/``w_sigma`` describe the
    per-component Gaussian exogenous disturbance.
    """

    n_s: int
    n_a: int
    gamma: float
    u_lo: np.ndarray
    u_hi: np.ndarray
    x_lo: np.ndarray | None
    x_hi: np.ndarray | None
    w_mean: np.ndarray
    w_sigma: np.ndarray

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if np.any(np.asarray(self.u_lo) >= np.asarray(self.u_hi)):
            raise ValueError("u_lo must be strictly below u_hi")
        if np.any(np.asarray(self.w_sigma) < 0):
            raise ValueError("noise standard deviations must be nonnegative")


@dataclass(frozen=True)
class Transition:
    """One environment step: state, action, realized stage cost, successor."""

    s: np.ndarray
    a: np.ndarray
    cost: float
    s_next: np.ndarray


class LinearModel:
    """Linear prediction model x+ = A x + B u."""

    linear = True

    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.n_x = self.A.shape[0]
        self.n_u = self.B.shape[1]
        if self.A.shape != (self.n_x, self.n_x) or self.B.shape[0] != self.n_x:
            raise ValueError("A and B dimensions are inconsistent")

    def f(self, x, u):
        return self.A @ x + self.B @ u

    def jac(self, x, u):
        return self.A, self.B

    def hess(self, x, u, lam):
        nv = self.n_x + self.n_u
        return np.zeros((nv, nv))


def step(env, s, a, rng):
    """Advance ``env`` one step; returns the Transition.

    The action must be admissible (inside the control box up to roundoff) and
    the successor state must stay finite, otherwise this raises.
    """
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    spec = env.spec
    if s.shape != (spec.n_s,) or a.shape != (spec.n_a,):
        raise ValueError("state or action has the wrong dimension")
    if np.any(a < spec.u_lo - 1e-9) or np.any(a > spec.u_hi + 1e-9):
        raise ValueError(f"action {a} outside control bounds")
    w = env.draw_disturbance(rng)
    s_next = env.true_dynamics(s, a, w)
    cost = env.stage_cost(s, a)
    if not np.all(np.isfinite(s_next)) or np.abs(s_next).max() > _DIVERGENCE_LIMIT:
        raise QmpcError(f"environment diverged: successor state {s_next}")
    return Transition(s=s, a=a, cost=float(cost), s_next=s_next)


class _EnvBase:
    def draw_disturbance(self, rng):
        spec = self.spec
        z = rng.standard_normal(spec.w_mean.shape[0])
        return spec.w_mean + spec.w_sigma * z

    def step(self, s, a, rng):
        return step(self, s, a, rng)

    def violation(self, s):
        """Positive parts of the true state-bound violations (zeros if unbounded)."""
        spec = self.spec
        if spec.x_lo is None:
            return np.zeros(spec.n_s)
        lo = np.maximum(0.0, spec.x_lo - s)
        hi = np.maximum(0.0, s - spec.x_hi)
        return np.concatenate([lo, hi])


class LtiEnv(_EnvBase):
    """Linear dynamics with quadratic stage cost and additive state noise."""

    def __init__(self, A, B, cost: LqrCost, noise_sigma=None, u_lo=None, u_hi=None, init_state=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.cost = cost
        n, m = cost.n_s, cost.n_a
        if self.A.shape != (n, n) or self.B.shape != (n, m):
            raise ValueError("dynamics do not match the cost dimensions")
        sigma = np.zeros(n) if noise_sigma is None else np.broadcast_to(np.asarray(noise_sigma, dtype=float), (n,)).copy()
        u_lo = np.full(m, -1e3) if u_lo is None else np.asarray(u_lo, dtype=float)
        u_hi = np.full(m, 1e3) if u_hi is None else np.asarray(u_hi, dtype=float)
        self.spec = EnvSpec(
            n_s=n,
            n_a=m,
            gamma=cost.gamma,
            u_lo=u_lo,
            u_hi=u_hi,
            x_lo=None,
            x_hi=None,
            w_mean=np.zeros(n),
            w_sigma=sigma,
        )
        self.init_state = np.zeros(n) if init_state is None else np.asarray(init_state, dtype=float)

    def stage_cost(self, s, a):
        return lqr_stage_cost(self.cost, s, a)

    def true_dynamics(self, s, a, w):
        return self.A @ s + self.B @ a + w

    def model(self):
        return LinearModel(self.A, self.B)


def make_lti_env(A, B, T, S, R, gamma, noise_sigma=None, **kwargs):
    return LtiEnv(A, B, LqrCost(T=T, S=S, R=R, gamma=gamma), noise_sigma=noise_sigma, **kwargs)


# Evaporation-like surrogate. States are a product concentration X2 (%) and
# an operating pressure P2 (kPa); controls are a steam pressure P100 and a
# cooling-water flow F200, both in [100, 400]. Exogenous inputs w =
# (X1, F1, T1, T200) are feed concentration, feed flow, feed temperature,
# and cooling-water inlet temperature. Each state relaxes toward a smooth
# control- and disturbance-dependent target, so steady states and local
# time constants are easy to read off and the map stays contractive on the
# operating box.

_EV = {
    "rho": np.array([0.25, 0.30]),  # per-step relaxation rates for (X2, P2)
    "x2_base": 24.0,
    "x2_steam_gain": 70.0,
    "x2_p2_coupling": 0.05,
    "p2_base": 46.0,
    "p2_steam_gain": 30.0,
    "p2_cool_gain": 14.0,
    "w_gain_x2": np.array([0.5, -0.15, 0.022, 0.0]),  # (X1, F1, T1, T200) -> X2 target
    "w_gain_p2": np.array([0.0, 0.04, 0.0, 0.25]),
    "cost_steam": 4000.0,
    "cost_water": 800.0,
    "cost_pressure": 200.0,
    "premium": 6300.0,
    "offspec_scale": 350.0,
    "offspec_knee": 25.6,
    "offspec_beta": 2.0,
}

_EV_W_MEAN = np.array([5.0, 10.0, 40.0, 25.0])
_EV_W_SIGMA = np.array([1.0, 2.0, 8.0, 5.0])
_EV_X_LO = np.array([25.0, 40.0])
_EV_X_HI = np.array([100.0, 80.0])
_EV_U_LO = np.array([100.0, 100.0])
_EV_U_HI = np.array([400.0, 400.0])


def _steam_frac(u1):
    # Saturating steam effectiveness, zero at the lower control bound.
    return (u1 - 100.0) / (u1 + 150.0)


def _cool_frac(u2):
    return (u2 - 100.0) / (u2 + 200.0)


def _evap_targets(x, u, w, p=_EV):
    s1 = _steam_frac(u[0])
    s2 = _cool_frac(u[1])
    dw = w - _EV_W_MEAN
    x2_tgt = p["x2_base"] + p["x2_steam_gain"] * s1 + p["x2_p2_coupling"] * (x[1] - p["p2_base"]) + p["w_gain_x2"] @ dw
    p2_tgt = p["p2_base"] + p["p2_steam_gain"] * s1 - p["p2_cool_gain"] * s2 + p["w_gain_p2"] @ dw
    return np.array([x2_tgt, p2_tgt])


def evap_dynamics(x, u, w, p=_EV):
    """Surrogate evaporator map: relaxation toward control-dependent targets."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    tgt = _evap_targets(x, u, w, p)
    return x + p["rho"] * (tgt - x)


class EvapModel:
    """Nominal prediction model: surrogate dynamics at the mean disturbance.

    The solver evaluates f/jac/hess many times per step, so the parameter
    dict is folded into scalar attributes once here and the constant state
    Jacobian is prebuilt.
    """

    linear = False
    n_x = 2
    n_u = 2

    def __init__(self, params=_EV, w_nominal=_EV_W_MEAN):
        self.p = params
        self.w = np.asarray(w_nominal, dtype=float)
        rho = params["rho"]
        self._rho0, self._rho1 = float(rho[0]), float(rho[1])
        self._coupling = float(params["x2_p2_coupling"])
        self._x2_base = float(params["x2_base"])
        self._p2_base = float(params["p2_base"])
        self._gain_x2 = float(params["x2_steam_gain"])
        self._gain_p2 = float(params["p2_steam_gain"])
        self._gain_cool = float(params["p2_cool_gain"])
        dw = self.w - _EV_W_MEAN
        self._w_off_x2 = float(params["w_gain_x2"] @ dw)
        self._w_off_p2 = float(params["w_gain_p2"] @ dw)
        self._Fx = np.array(
            [
                [1.0 - self._rho0, self._rho0 * self._coupling],
                [0.0, 1.0 - self._rho1],
            ]
        )

    def f(self, x, u):
        s1 = (u[0] - 100.0) / (u[0] + 150.0)
        s2 = (u[1] - 100.0) / (u[1] + 200.0)
        x2_tgt = self._x2_base + self._gain_x2 * s1 + self._coupling * (x[1] - self._p2_base) + self._w_off_x2
        p2_tgt = self._p2_base + self._gain_p2 * s1 - self._gain_cool * s2 + self._w_off_p2
        return np.array([
            x[0] + self._rho0 * (x2_tgt - x[0]),
            x[1] + self._rho1 * (p2_tgt - x[1]),
        ])

    def f_all(self, X, U):
        """Stage-batched map: rows of X, U are (x_k, u_k); returns stacked f."""
        s1 = (U[:, 0] - 100.0) / (U[:, 0] + 150.0)
        s2 = (U[:, 1] - 100.0) / (U[:, 1] + 200.0)
        x2_tgt = self._x2_base + self._gain_x2 * s1 + self._coupling * (X[:, 1] - self._p2_base) + self._w_off_x2
        p2_tgt = self._p2_base + self._gain_p2 * s1 - self._gain_cool * s2 + self._w_off_p2
        out = np.empty_like(X)
        out[:, 0] = X[:, 0] + self._rho0 * (x2_tgt - X[:, 0])
        out[:, 1] = X[:, 1] + self._rho1 * (p2_tgt - X[:, 1])
        return out

    def jac(self, x, u):
        ds1 = 250.0 / (u[0] + 150.0) ** 2
        ds2 = 300.0 / (u[1] + 200.0) ** 2
        Fu = np.array(
            [
                [self._rho0 * self._gain_x2 * ds1, 0.0],
                [self._rho1 * self._gain_p2 * ds1, -self._rho1 * self._gain_cool * ds2],
            ]
        )
        return self._Fx.copy(), Fu

    def hess(self, x, u, lam):
        """Multiplier-weighted second derivative of the map over v = (x, u)."""
        d2s1 = -500.0 / (u[0] + 150.0) ** 3
        d2s2 = -600.0 / (u[1] + 200.0) ** 3
        H = np.zeros((4, 4))
        H[2, 2] = (lam[0] * self._rho0 * self._gain_x2 + lam[1] * self._rho1 * self._gain_p2) * d2s1
        H[3, 3] = -lam[1] * self._rho1 * self._gain_cool * d2s2
        return H


class EvaporationEnv(_EnvBase):
    """Evaporation-like process with economic stage cost.

    The stage cost charges steam quadratically and cooling water and pressure
    handling linearly, pays a saturating premium for concentrated product,
    and adds a smooth off-spec charge that ramps up as the concentration
    drops toward its lower quality bound. The Hessian is singular (linear
    directions) and the premium and off-spec terms are not polynomial, so
    the cost is neither positive definite nor quadratic. Under the nominal
    disturbance the cheapest sustainable operating point sits above the
    X2 >= 25 bound by a margin of a few noise standard deviations, while the
    reachable set extends well below it, which is what makes the bound
    matter without making every near-bound policy look equally good.
    """

    def __init__(self, gamma=0.95, noise_on=True, params=None, init_state=None):
        self.p = dict(_EV) if params is None else dict(params)
        sigma = _EV_W_SIGMA if noise_on else np.zeros(4)
        self.spec = EnvSpec(
            n_s=2,
            n_a=2,
            gamma=gamma,
            u_lo=_EV_U_LO.copy(),
            u_hi=_EV_U_HI.copy(),
            x_lo=_EV_X_LO.copy(),
            x_hi=_EV_X_HI.copy(),
            w_mean=_EV_W_MEAN.copy(),
            w_sigma=sigma,
        )
        self.init_state = np.array([27.0, 47.0]) if init_state is None else np.asarray(init_state, dtype=float)

    def stage_cost(self, s, a):
        p = self.p
        x2, p2 = s
        u1, u2 = a
        premium = (x2 - 22.0) / (x2 - 10.0)
        beta = p["offspec_beta"]
        offspec = p["offspec_scale"] * np.logaddexp(0.0, beta * (p["offspec_knee"] - x2)) / beta
        return (
            p["cost_steam"] * (u1 / 100.0) ** 2
            + p["cost_water"] * (u2 / 100.0)
            + p["cost_pressure"] * (p2 / 100.0)
            - p["premium"] * premium
            + offspec
        )

    def true_dynamics(self, s, a, w):
        return evap_dynamics(s, a, w, self.p)

    def model(self):
        return EvapModel(self.p, self.spec.w_mean)


def make_evaporation_like_env(gamma=0.95, noise_on=True, init_state=None):
    return EvaporationEnv(gamma=gamma, noise_on=noise_on, init_state=init_state)


def rollout(env, policy, s0, steps, rng):
    """Run ``policy`` (a callable s -> a) for ``steps`` steps from ``s0``."""
    transitions = []
    s = np.asarray(s0, dtype=float)
    for _ in range(steps):
        tr = step(env, s, policy(s), rng)
        transitions.append(tr)
        s = tr.s_next
    return transitions


def save_trajectory(path, transitions):
    """Write transitions as CSV with header t, s..., a..., cost."""
    if not transitions:
        raise ValueError("cannot serialize an empty trajectory")
    n_s = transitions[0].s.shape[0]
    n_a = transitions[0].a.shape[0]
    header = ["t"] + [f"s{i}" for i in range(n_s)] + [f"a{i}" for i in range(n_a)] + ["cost"]
    lines = [",".join(header)]
    for t, tr in enumerate(transitions):
        vals = [str(t)] + [f"{v:.17g}" for v in tr.s] + [f"{v:.17g}" for v in tr.a] + [f"{tr.cost:.17g}"]
        lines.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
