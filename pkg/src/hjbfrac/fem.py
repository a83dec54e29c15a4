"""Finite-element semi-discretization of the 1D fractional reaction-diffusion equation.

The domain is an interval (a, b) with homogeneous volume constraints (the
state vanishes on the complement).  Continuous piecewise-linear hat functions
on a uniform mesh give the semi-discrete system

    M y' = -alpha A y + F(y) + B(t) + sum_k u_k Q_k

whose mass matrix ``M`` and fractional stiffness matrix ``A`` are assembled
here, together with loads, a one-step flow map and the manufactured solution
used for verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la
from scipy.special import gamma

__all__ = [
    "NumericalBlowupError",
    "FeMesh",
    "FemSystem",
    "AnalyticPair",
    "DiscreteDynamics",
    "build_mesh",
    "fractional_constant",
    "assemble_mass",
    "assemble_fractional_stiffness",
    "assemble_load",
    "assemble_indicator_load",
    "assemble_target_mass",
    "build_fem_system",
    "analytic_pair",
    "interpolate",
    "l2_error",
    "flow_step",
    "discounted_l2_distance",
]


class NumericalBlowupError(ArithmeticError):
    """A time step produced non-finite values.

    ``where`` carries the time (or step index / trajectory indices) at which
    it happened.
    """

    def __init__(self, message: str, where=None):
        super().__init__(message)
        self.where = where


@dataclass(frozen=True)
class FeMesh:
    a: float
    b: float
    d: int

    @property
    def h(self) -> float:
        return (self.b - self.a) / (self.d + 1)

    @property
    def nodes(self) -> np.ndarray:
        """Interior nodes a + i*h, i = 1..d."""
        return self.a + self.h * np.arange(1, self.d + 1)

    @property
    def all_nodes(self) -> np.ndarray:
        return self.a + self.h * np.arange(self.d + 2)


def build_mesh(d: int, a: float = -1.0, b: float = 1.0) -> FeMesh:
    if int(d) != d or d < 1:
        raise ValueError(f"interior node count must be a positive integer, got {d}")
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    return FeMesh(float(a), float(b), int(d))


def fractional_constant(s: float) -> float:
    """C_{1,s}, the constant for which the Fourier symbol is |xi|^{2s}."""
    return 4.0**s * s * gamma(s + 0.5) / (np.sqrt(np.pi) * gamma(1.0 - s))


def _check_order(s: float) -> None:
    if not 0.0 < s < 1.0:
        raise ValueError(f"fractional order must lie in (0, 1), got {s}")


def assemble_mass(mesh: FeMesh) -> np.ndarray:
    h, d = mesh.h, mesh.d
    M = np.zeros((d, d))
    i = np.arange(d)
    M[i, i] = 2.0 * h / 3.0
    M[i[:-1], i[:-1] + 1] = h / 6.0
    M[i[:-1] + 1, i[:-1]] = h / 6.0
    return M


@lru_cache(maxsize=None)
def _gauss_legendre01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _adjacent_moments(s: float) -> tuple[float, float]:
    """Moments c20 = int a^2 (a+b)^(-1-2s), c11 = int ab (a+b)^(-1-2s) over [0,1]^2."""
    t, w = _gauss_legendre01(40)
    smooth = np.dot(w, t**2 * (1.0 + t) ** (-2.0 * s))
    c20 = (1.0 / (3.0 - 2.0 * s) - smooth) / (2.0 * s)
    total = (2.0 ** (3.0 - 2.0 * s) - 2.0) / ((2.0 - 2.0 * s) * (3.0 - 2.0 * s))
    c11 = 0.5 * (total - 2.0 * c20)
    return c20, c11


def _interaction_matrix(mesh: FeMesh, s: float, n_quad: int) -> np.ndarray:
    """C/2 * int_D int_D (u(x)-u(y))(v(x)-v(y)) |x-y|^(-1-2s), over all mesh nodes.

    Returns a (d+2)x(d+2) matrix including the two boundary nodes.  On a uniform
    mesh the element-pair contribution depends only on the element offset.
    """
    h, ne = mesh.h, mesh.d + 1
    C = fractional_constant(s)
    n_nodes = ne + 1
    K = np.zeros((n_nodes, n_nodes))
    scale = h ** (1.0 - 2.0 * s)  # h^(3-2s) / h^2

    # same element: (u'v') * int int |x-y|^(1-2s)
    same = C / 2.0 * scale * 2.0 / ((2.0 - 2.0 * s) * (3.0 - 2.0 * s))
    loc = same * np.array([[1.0, -1.0], [-1.0, 1.0]])
    e = np.arange(ne)
    for p in range(2):
        for q in range(2):
            np.add.at(K, (e + p, e + q), loc[p, q])

    # touching elements share a node; difference is linear in the distances
    # to that node, integrated in closed form (both orderings)
    if ne >= 2:
        c20, c11 = _adjacent_moments(s)
        al = np.array([1.0, -1.0, 0.0])
        be = np.array([0.0, 1.0, -1.0])
        loc = C * scale * (
            c20 * (np.outer(al, al) + np.outer(be, be))
            + c11 * (np.outer(al, be) + np.outer(be, al))
        )
        e = np.arange(ne - 1)
        for p in range(3):
            for q in range(3):
                np.add.at(K, (e + p, e + q), loc[p, q])

    # separated elements: smooth kernel, tensor Gauss-Legendre
    if ne >= 3:
        t, w = _gauss_legendre01(n_quad)
        xi, eta = np.meshgrid(t, t, indexing="ij")
        ww = np.outer(w, w)
        delta = np.stack([1.0 - xi, xi, -(1.0 - eta), -eta])  # (4, n, n)
        for k in range(2, ne):
            kern = ww * (k + eta - xi) ** (-1.0 - 2.0 * s)
            loc = C * h ** (1.0 - 2.0 * s) * np.einsum("pij,qij,ij->pq", delta, delta, kern)
            e = np.arange(ne - k)
            idx = (0, 1, k, k + 1)
            for p in range(4):
                for q in range(4):
                    np.add.at(K, (e + idx[p], e + idx[q]), loc[p, q])
    return K


def _tail_matrix(mesh: FeMesh, s: float, n_quad: int) -> np.ndarray:
    """C * int_D u v gamma(x), gamma(x) = int_{D^c} |x-y|^(-1-2s) dy.

    gamma(x) = ((x-a)^(-2s) + (b-x)^(-2s)) / (2s).  The left part is integrated
    per element in the distance t = x - a; the first element carries the
    algebraic singularity and is done in closed form.  The right part follows by
    mirror symmetry.
    """
    h, ne = mesh.h, mesh.d + 1
    C = fractional_constant(s)
    left = np.zeros((ne, 2, 2))

    # only the interior-node entry survives on the first element:
    # int_0^h (t/h)^2 t^(-2s) dt; the boundary-node entries are discarded
    left[0, 1, 1] = h ** (1.0 - 2.0 * s) / (3.0 - 2.0 * s)

    if ne >= 2:
        tl, wl = _gauss_legendre01(n_quad)
        psi = np.stack([1.0 - tl, tl])
        tt = h * (np.arange(1, ne)[:, None] + tl[None, :])
        wts = h * wl[None, :] * tt ** (-2.0 * s)
        left[1:] = np.einsum("pi,qi,ei->epq", psi, psi, wts)

    loc = left + left[::-1, ::-1, ::-1]
    loc *= C / (2.0 * s)
    T = np.zeros((ne + 1, ne + 1))
    e = np.arange(ne)
    for p in range(2):
        for q in range(2):
            np.add.at(T, (e + p, e + q), loc[:, p, q])
    return T


def assemble_fractional_stiffness(mesh: FeMesh, s: float, n_quad: int = 20) -> np.ndarray:
    """Dense stiffness matrix A_ij = a(phi_i, phi_j) of the integral fractional Laplacian."""
    _check_order(s)
    full = _interaction_matrix(mesh, s, n_quad) + _tail_matrix(mesh, s, n_quad)
    A = full[1:-1, 1:-1]
    return 0.5 * (A + A.T)


def assemble_load(
    mesh: FeMesh,
    g: Callable[[np.ndarray], np.ndarray],
    order: int = 5,
    breakpoints: Sequence[float] = (),
) -> np.ndarray:
    """Load vector int_D g phi_i by per-element Gauss-Legendre quadrature.

    Elements are split at ``breakpoints`` so that piecewise-smooth integrands
    (indicator functions) are integrated without crossing a discontinuity.
    """
    t, w = _gauss_legendre01(order)
    pts = mesh.all_nodes
    out = np.zeros(mesh.d + 2)
    cuts = np.sort(np.asarray(breakpoints, dtype=float))
    for e in range(mesh.d + 1):
        xl, xr = pts[e], pts[e + 1]
        inner = cuts[(cuts > xl) & (cuts < xr)]
        edges = np.concatenate([[xl], inner, [xr]])
        for lo, hi in zip(edges[:-1], edges[1:]):
            x = lo + (hi - lo) * t
            gx = np.asarray(g(x), dtype=float) * np.ones_like(x)
            wx = (hi - lo) * w * gx
            lam = (x - xl) / (xr - xl)
            out[e] += np.dot(wx, 1.0 - lam)
            out[e + 1] += np.dot(wx, lam)
    return out[1:-1]


def indicator(lo: float, hi: float) -> Callable[[np.ndarray], np.ndarray]:
    def chi(x):
        x = np.asarray(x, dtype=float)
        return ((x >= lo) & (x <= hi)).astype(float)

    return chi


def assemble_indicator_load(mesh: FeMesh, lo: float, hi: float) -> np.ndarray:
    """int_{[lo,hi]} phi_i, exact (sub-element integration)."""
    return assemble_load(mesh, indicator(lo, hi), order=2, breakpoints=(lo, hi))


def assemble_target_mass(mesh: FeMesh, t_lo: float, t_hi: float) -> np.ndarray:
    """Mass matrix restricted to the target interval [t_lo, t_hi]."""
    if not t_lo < t_hi:
        raise ValueError(f"empty target interval [{t_lo}, {t_hi}]")
    if t_lo < mesh.a or t_hi > mesh.b:
        raise ValueError("target interval must lie inside the domain")
    t, w = _gauss_legendre01(3)
    pts = mesh.all_nodes
    full = np.zeros((mesh.d + 2, mesh.d + 2))
    for e in range(mesh.d + 1):
        lo, hi = max(pts[e], t_lo), min(pts[e + 1], t_hi)
        if hi <= lo:
            continue
        x = lo + (hi - lo) * t
        lam = (x - pts[e]) / mesh.h
        psi = np.stack([1.0 - lam, lam])
        loc = np.einsum("pi,qi,i->pq", psi, psi, (hi - lo) * w)
        full[e : e + 2, e : e + 2] += loc
    return full[1:-1, 1:-1]


def interpolate(mesh: FeMesh, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Nodal interpolant at the interior nodes."""
    return np.asarray(f(mesh.nodes), dtype=float) * np.ones(mesh.d)


def l2_error(mesh: FeMesh, coeffs: np.ndarray, f: Callable, order: int = 20) -> float:
    """L2(D) norm of (finite-element function with nodal ``coeffs``) - f."""
    t, w = _gauss_legendre01(order)
    pts = mesh.all_nodes
    c = np.concatenate([[0.0], coeffs, [0.0]])
    x = pts[:-1, None] + mesh.h * t[None, :]
    uh = c[:-1, None] * (1.0 - t) + c[1:, None] * t
    err = (uh - f(x)) ** 2
    return float(np.sqrt(mesh.h * np.sum(err * w[None, :])))


@dataclass(frozen=True, eq=False)
class FemSystem:
    mesh: FeMesh
    s: float
    M: np.ndarray
    A: np.ndarray
    Q_list: tuple = ()
    M_target: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.mesh.d

    @property
    def Q(self) -> np.ndarray:
        """Control injections as columns of a d x m matrix."""
        if not self.Q_list:
            return np.zeros((self.d, 0))
        return np.column_stack(self.Q_list)


def build_fem_system(
    mesh: FeMesh,
    s: float,
    injections: Sequence[np.ndarray] = (),
    target: tuple[float, float] | None = None,
) -> FemSystem:
    M = assemble_mass(mesh)
    A = assemble_fractional_stiffness(mesh, s)
    Mt = assemble_target_mass(mesh, *target) if target is not None else None
    Q = tuple(np.asarray(q, dtype=float) for q in injections)
    for q in Q:
        if q.shape != (mesh.d,):
            raise ValueError("injection vectors must have one entry per interior node")
    return FemSystem(mesh, float(s), M, A, Q, Mt)


@dataclass(frozen=True)
class AnalyticPair:
    """Manufactured closed-loop test data on D = (-1, 1)."""

    s: float
    T0: float
    gamma: float
    lam: float
    U: tuple[float, float] = (0.0, 1.0)

    @property
    def q_scale(self) -> float:
        s = self.s
        return float(np.sqrt(gamma(2 * s + 1.5) / (gamma(2 * s + 1.0) * gamma(0.5))))

    @property
    def b_tilde_value(self) -> float:
        s = self.s
        return float(4.0**s * gamma(1.0 + s) * gamma(s + 0.5) / gamma(0.5) * self.q_scale)

    def q(self, xi):
        xi = np.asarray(xi, dtype=float)
        return self.q_scale * np.clip(1.0 - xi**2, 0.0, None) ** self.s

    def b_tilde(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.where(np.abs(xi) < 1.0, self.b_tilde_value, 0.0)

    @staticmethod
    def phi(t):
        return np.cos(t)

    @staticmethod
    def dphi(t):
        return -np.sin(t)

    def kappa(self, t):
        return np.where(t <= self.T0, (self.T0 - t) ** 2, 0.0)

    def dkappa(self, t):
        return np.where(t <= self.T0, -2.0 * (self.T0 - t), 0.0)

    def ddkappa(self, t):
        return np.where(t <= self.T0, 2.0, 0.0)

    def u_d(self, t):
        return np.clip(self.kappa(t), self.U[0], self.U[1])

    def y_d(self, xi, t):
        g, lam = self.gamma, self.lam
        k, dk = self.kappa(t), self.dkappa(t)
        return (self.phi(t) - g * dk + lam * g * k) * self.q(xi) + g * k * self.b_tilde(xi)

    def dy_d(self, xi, t):
        """Time derivative of y_d."""
        g, lam = self.gamma, self.lam
        dk, ddk = self.dkappa(t), self.ddkappa(t)
        return (self.dphi(t) - g * ddk + lam * g * dk) * self.q(xi) + g * dk * self.b_tilde(xi)

    def b(self, xi, t):
        return (self.dphi(t) - self.u_d(t)) * self.q(xi) + self.phi(t) * self.b_tilde(xi)

    def y_star(self, xi, t):
        return self.phi(t) * self.q(xi)


def analytic_pair(
    s: float, T0: float, gamma: float, lam: float, U: tuple[float, float] = (0.0, 1.0)
) -> AnalyticPair:
    _check_order(s)
    if T0 <= 0 or gamma <= 0 or lam <= 0:
        raise ValueError("T0, gamma and lambda must be positive")
    if not U[0] <= U[1]:
        raise ValueError(f"bad control interval {U}")
    return AnalyticPair(float(s), float(T0), float(gamma), float(lam), (float(U[0]), float(U[1])))


NONLINEARITIES = {
    "none": None,
    "cubic": lambda y: y * y - y * y * y,
}


@dataclass(eq=False)
class DiscreteDynamics:
    """One-step flow map of the semi-discrete system.

    ``scheme`` is ``"imex-euler"`` (implicit in -alpha A, explicit in the
    rest) or ``"explicit-euler"``.  The step is affine in the control:
    ``step(x, u, t) == drift(x, t) + gain @ u``.
    """

    system: FemSystem
    alpha: float = 1.0
    nonlinearity: str = "none"
    forcing: Callable[[float], np.ndarray] | None = None
    scheme: str = "imex-euler"
    dt: float = 0.01
    affine: bool = True
    _factor: tuple = field(init=False, repr=False)
    gain: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        M, A = self.system.M, self.system.A
        if self.scheme == "imex-euler":
            self._factor = la.cho_factor(M + self.dt * self.alpha * A)
        elif self.scheme == "explicit-euler":
            self._factor = la.cho_factor(M)
        else:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        self._F = NONLINEARITIES[self.nonlinearity]
        Q = self.system.Q
        self.gain = self.dt * la.cho_solve(self._factor, Q) if Q.size else Q

    @property
    def m(self) -> int:
        return self.system.Q.shape[1]

    def _rhs(self, x, t):
        """Right-hand side contributions that do not depend on the control."""
        r = np.zeros_like(x) if self.scheme == "imex-euler" else -self.alpha * (self.system.A @ x)
        if self._F is not None:
            r = r + self._F(x)
        if self.forcing is not None:
            r = r + self.forcing(t)
        return r

    def drift(self, x: np.ndarray, t: float) -> np.ndarray:
        """The step taken with zero control.  Accepts a batch of states (n x d)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            if self.forcing is not None or self._F is not None:
                return np.stack([self.drift(row, t) for row in x])
            X = x.T
            if self.scheme == "imex-euler":
                return la.cho_solve(self._factor, self.system.M @ X).T
            return (X + self.dt * la.cho_solve(self._factor, -self.alpha * (self.system.A @ X))).T
        r = self._rhs(x, t)
        if self.scheme == "imex-euler":
            return la.cho_solve(self._factor, self.system.M @ x + self.dt * r)
        return x + self.dt * la.cho_solve(self._factor, r)

    def step(self, x: np.ndarray, u, t: float) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        x = np.asarray(x, dtype=float)
        if self.affine:
            out = self.drift(x, t) + self.gain @ u
        else:
            r = self._rhs(x, t) + self.system.Q @ u
            if self.scheme == "imex-euler":
                out = la.cho_solve(self._factor, self.system.M @ x + self.dt * r)
            else:
                out = x + self.dt * la.cho_solve(self._factor, r)
        if not np.all(np.isfinite(out)):
            raise NumericalBlowupError(f"non-finite state after step at t={t}", where=t)
        return out

    __call__ = step


def flow_step(dyn: DiscreteDynamics, x: np.ndarray, u, t: float) -> np.ndarray:
    return dyn.step(x, u, t)


def discounted_l2_distance(traj1, traj2, M: np.ndarray, lam: float, dt: float) -> float:
    """sqrt(sum_k dt exp(-lam k dt) e_k^T M e_k), left-endpoint rule in time."""
    X1 = np.asarray(traj1, dtype=float)
    X2 = np.asarray(traj2, dtype=float)
    if X1.shape != X2.shape:
        raise ValueError(f"trajectory shapes differ: {X1.shape} vs {X2.shape}")
    E = X1 - X2
    sq = np.einsum("ki,ij,kj->k", E, M, E)
    w = dt * np.exp(-lam * dt * np.arange(len(E)))
    return float(np.sqrt(max(np.dot(w, sq), 0.0)))
