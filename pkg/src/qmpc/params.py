"""Parameter containers for the MPC function approximators.

Two parametrizations are supported: a structured one built from quadratic
cost pieces plus a model offset and soft state bounds, and a condensed one
that works directly on the coefficients of a dense QP in the sequence of
initial state and controls. Both expose the same small protocol used by the
learner: flatten/unflatten to a parameter vector, PD projection of the
blocks that must stay positive definite, and elementwise mixing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np


def _sym(A):
    return 0.5 * (A + A.T)


def _clip_eigmin(A, eps):
    """Symmetrize A and push its eigenvalues up to at least eps."""
    w, V = np.linalg.eigh(_sym(A))
    return (V * np.maximum(w, eps)) @ V.T


def _block_names(name, value):
    value = np.asarray(value)
    if value.ndim == 0:
        return [name]
    if value.ndim == 1:
        return [f"{name}[{i}]" for i in range(value.shape[0])]
    return [f"{name}[{i},{j}]" for i in range(value.shape[0]) for j in range(value.shape[1])]


class _FlatMixin:
    """Flatten/unflatten over the class's LEARNABLE field names."""

    LEARNABLE: tuple = ()
    PD_BLOCKS: tuple = ()

    def blocks(self):
        return {name: getattr(self, name) for name in self.LEARNABLE}

    def flatten(self):
        parts = [np.ravel(np.asarray(getattr(self, name), dtype=float)) for name in self.LEARNABLE]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, vec):
        """Rebuild a theta of this shape from a flat vector."""
        vec = np.asarray(vec, dtype=float)
        out = {}
        pos = 0
        for name in self.LEARNABLE:
            cur = np.asarray(getattr(self, name), dtype=float)
            size = cur.size
            chunk = vec[pos:pos + size].reshape(cur.shape)
            out[name] = float(chunk) if cur.ndim == 0 else chunk.copy()
            pos += size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
        return replace(self, **out)

    def names(self):
        cols = []
        for name in self.LEARNABLE:
            cols.extend(_block_names(name, getattr(self, name)))
        return cols

    def copy(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return replace(self, **out)

    def mixed_with(self, other, alpha):
        """self + alpha * (other - self), entry-wise and infinity-safe.

        Identical entries (including +-inf bounds) are carried over as is.
        A partial step between a finite entry and an infinite one lands on
        the infinite side, matching the limit of the convex combination,
        while alpha >= 1 adopts the other value outright.
        """
        a = self.flatten()
        b = other.flatten()
        if alpha <= 0.0:
            return self.unflatten(a)
        mixed = a.copy()
        moved = a != b
        if alpha >= 1.0:
            mixed[moved] = b[moved]
            return self.unflatten(mixed)
        soft = moved & np.isfinite(a) & np.isfinite(b)
        mixed[soft] = a[soft] + alpha * (b[soft] - a[soft])
        toward_inf = moved & ~soft & np.isfinite(a)
        mixed[toward_inf] = b[toward_inf]
        return self.unflatten(mixed)

    def pd_project(self, eps):
        theta = self.copy()
        for name in self.PD_BLOCKS:
            setattr(theta, name, _clip_eigmin(getattr(theta, name), eps))
        return theta

    def pd_min_eig(self):
        vals = [np.linalg.eigvalsh(_sym(getattr(self, name))).min() for name in self.PD_BLOCKS]
        return float(min(vals)) if vals else float("inf")


@dataclass
class ThetaNonCondensed(_FlatMixin):
    """Parameters of the structured N-step approximator.

    Quadratic pieces follow the Hessian/gradient/constant convention
    q(v) = 0.5 v'Hv + h'v + c. ``H_lam`` (arrival penalty on the pinned
    initial state) may be indefinite; ``H_Vf`` and ``H_l`` are the blocks the
    learner keeps positive definite. ``c_f`` is an additive offset on the
    prediction model and ``x_lo``/``x_hi`` are the soft state bounds
    (entries may be infinite, which drops the corresponding constraint rows).
    """

    H_lam: np.ndarray
    h_lam: np.ndarray
    c_lam: float
    H_Vf: np.ndarray
    h_Vf: np.ndarray
    c_Vf: float
    H_l: np.ndarray
    h_l: np.ndarray
    c_l: float
    c_f: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray

    LEARNABLE = ("H_lam", "h_lam", "c_lam", "H_Vf", "h_Vf", "c_Vf", "H_l", "h_l", "c_l", "c_f", "x_lo", "x_hi")
    PD_BLOCKS = ("H_Vf", "H_l")

    def __post_init__(self):
        self.H_lam = np.asarray(self.H_lam, dtype=float)
        self.h_lam = np.asarray(self.h_lam, dtype=float)
        self.H_Vf = np.asarray(self.H_Vf, dtype=float)
        self.h_Vf = np.asarray(self.h_Vf, dtype=float)
        self.H_l = np.asarray(self.H_l, dtype=float)
        self.h_l = np.asarray(self.h_l, dtype=float)
        self.c_f = np.asarray(self.c_f, dtype=float)
        self.x_lo = np.asarray(self.x_lo, dtype=float)
        self.x_hi = np.asarray(self.x_hi, dtype=float)
        self.c_lam = float(self.c_lam)
        self.c_Vf = float(self.c_Vf)
        self.c_l = float(self.c_l)
        n = self.h_lam.shape[0]
        nv = self.h_l.shape[0]
        if self.H_lam.shape != (n, n) or self.H_Vf.shape != (n, n) or self.h_Vf.shape != (n,):
            raise ValueError("inconsistent state-cost block shapes")
        if self.H_l.shape != (nv, nv) or nv <= n:
            raise ValueError("stage cost block must cover states and controls")
        if self.c_f.shape != (n,) or self.x_lo.shape != (n,) or self.x_hi.shape != (n,):
            raise ValueError("model offset and bound blocks must have state dimension")

    @property
    def n_x(self):
        return self.h_lam.shape[0]

    @property
    def n_u(self):
        return self.h_l.shape[0] - self.n_x

    @classmethod
    def zeros(cls, n_x, n_u):
        return cls(
            H_lam=np.zeros((n_x, n_x)),
            h_lam=np.zeros(n_x),
            c_lam=0.0,
            H_Vf=np.zeros((n_x, n_x)),
            h_Vf=np.zeros(n_x),
            c_Vf=0.0,
            H_l=np.zeros((n_x + n_u, n_x + n_u)),
            h_l=np.zeros(n_x + n_u),
            c_l=0.0,
            c_f=np.zeros(n_x),
            x_lo=np.full(n_x, -np.inf),
            x_hi=np.full(n_x, np.inf),
        )

    def symmetrized(self):
        theta = self.copy()
        theta.H_lam = _sym(theta.H_lam)
        theta.H_Vf = _sym(theta.H_Vf)
        theta.H_l = _sym(theta.H_l)
        return theta


@dataclass
class ThetaCondensed(_FlatMixin):
    """Coefficients of the condensed dense-QP approximator.

    The decision vector is z = (x0, u0, ..., u_{N-1}); the approximator value
    is the optimum of z'Mz + m'z + c subject to the pins and C z <= d. Only
    M, m and c are learnable; C and d encode known input constraints and stay
    fixed. Dimensions are carried so the pinned/free split is well defined.
    """

    M: np.ndarray
    m: np.ndarray
    c: float
    C: np.ndarray
    d: np.ndarray
    n_x: int
    n_u: int
    N: int

    LEARNABLE = ("M", "m", "c")

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.m = np.asarray(self.m, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        self.c = float(self.c)
        nz = self.n_x + self.N * self.n_u
        if self.M.shape != (nz, nz) or self.m.shape != (nz,):
            raise ValueError(f"M/m must match decision dimension {nz}")
        if self.C.ndim != 2 or self.C.shape[1] != nz or self.d.shape != (self.C.shape[0],):
            raise ValueError("constraint rows must act on the decision vector")

    @property
    def n_z(self):
        return self.n_x + self.N * self.n_u

    @classmethod
    def zeros(cls, n_x, n_u, N, C=None, d=None):
        nz = n_x + N * n_u
        if C is None:
            C = np.zeros((0, nz))
            d = np.zeros(0)
        return cls(M=np.zeros((nz, nz)), m=np.zeros(nz), c=0.0, C=C, d=d, n_x=n_x, n_u=n_u, N=N)

    def symmetrized(self):
        theta = self.copy()
        theta.M = _sym(theta.M)
        return theta

    def pd_project(self, eps):
        """Clip the control-block eigenvalues of M so the optimum stays bounded.

        The problem pins x0 (and u0 for the pinned variant), so boundedness
        only depends on M restricted to the control coordinates. The value is
        z'Mz, hence that submatrix's Hessian is 2 M_uu; the floor is applied
        to the Hessian scale.
        """
        theta = self.copy()
        theta.M = _sym(theta.M)
        i0 = self.n_x
        Muu = theta.M[i0:, i0:]
        theta.M[i0:, i0:] = _clip_eigmin(Muu, 0.5 * eps)
        return theta

    def pd_min_eig(self):
        i0 = self.n_x
        return float(2.0 * np.linalg.eigvalsh(_sym(self.M)[i0:, i0:]).min())

    def gain(self):
        """Linear feedback of the unconstrained minimizer: U* = -gain() x0 + const.

        Partitioning sym(M) into [[Qb, Sb], [Sb', Rb]] over (x0, controls),
        the stationarity condition gives U* = -Rb^{-1} (Sb' x0 + m_u / 2);
        the state-feedback part is Rb^{-1} Sb'. Rows 0..n_u-1 are the first
        control's gain.
        """
        i0 = self.n_x
        Ms = _sym(self.M)
        return np.linalg.solve(Ms[i0:, i0:], Ms[i0:, :i0])


@dataclass
class VectorTheta(_FlatMixin):
    """A bare parameter vector with no PD-constrained blocks.

    Used by linear-in-parameters test approximators and anywhere the learner
    machinery is exercised without the MPC structure.
    """

    w: np.ndarray
    LEARNABLE = ("w",)

    def __post_init__(self):
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))
