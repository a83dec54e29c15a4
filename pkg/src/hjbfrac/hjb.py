"""Semi-Lagrangian value iteration on scattered grids and feedback synthesis.

The discrete dynamic programming operator is

    W(V)_j = min_u { dt g(x_j, u) + (1 - dt lam) S[V](flow(x_j, u)) }

with S the Shepard approximant on the grid.  The foot points flow(x_j, u) do
not depend on V, so their Shepard weights are assembled once into a sparse
(n_controls * N) x N matrix and every sweep reduces to one sparse product and
a column-wise minimum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .fem import NumericalBlowupError
from .grid import ScatteredGrid
from .shepard import NeighborTable, ShepardInterpolant, WendlandKernel, find_neighbors, shepard_weights

logger = logging.getLogger(__name__)

__all__ = [
    "QuadraticCost",
    "HjbProblem",
    "ValueFunction",
    "FeedbackPolicy",
    "ShapeScan",
    "Rollout",
    "vi_operator",
    "vi_solve",
    "vi_residual",
    "select_shape",
    "theta_range",
    "synthesize_feedback",
    "simulate_closed_loop",
    "simulate_open_loop",
    "discounted_cost_path",
    "default_max_iter",
]


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """g(x, u) = 1/2 (x^T S x + u^T R u)."""

    S: np.ndarray
    R: np.ndarray

    def __call__(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return 0.5 * float(x @ self.S @ x + u @ self.R @ u)

    def table(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """g(X[j], U[k]) for all pairs, shape (len(X), len(U))."""
        X = np.atleast_2d(X)
        U = np.asarray(U, dtype=float).reshape(len(U), -1)
        gx = 0.5 * np.einsum("ji,ik,jk->j", X, self.S, X)
        gu = 0.5 * np.einsum("ki,il,kl->k", U, self.R, U)
        return gx[:, None] + gu[None, :]


def _cost_table(cost, X, U) -> np.ndarray:
    if hasattr(cost, "table"):
        return cost.table(X, U)
    return np.array([[cost(x, u) for u in U] for x in X])


def _as_controls(controls) -> np.ndarray:
    U = np.asarray(controls, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if U.ndim != 2 or U.shape[0] == 0:
        raise ValueError("control grid must be a non-empty list of m-vectors")
    return U


@dataclass(eq=False)
class HjbProblem:
    """Discounted infinite-horizon problem discretized with step ``dt``.

    ``flow(x, u, t)`` is the one-step map at step ``dt``.  ``flow_time``
    chooses the time argument used during value iteration: ``"node"`` uses
    the time at which each grid node was visited while the grid was traced,
    ``"zero"`` uses t = 0.  Autonomous flows are unaffected.
    """

    flow: Callable
    running_cost: Callable
    lam: float
    controls: np.ndarray
    dt: float
    flow_time: str = "node"
    use_affine: bool = True

    def __post_init__(self):
        self.controls = _as_controls(self.controls)
        if self.lam <= 0 or self.dt <= 0:
            raise ValueError("lambda and dt must be positive")
        if self.dt * self.lam > 1.0:
            raise ValueError(f"dt * lambda = {self.dt * self.lam} > 1: the scheme is not a contraction")
        flow_dt = getattr(self.flow, "dt", None)
        if flow_dt is not None and not math.isclose(flow_dt, self.dt, rel_tol=1e-12):
            raise ValueError(f"flow step {flow_dt} differs from dt={self.dt}")
        if self.flow_time not in ("node", "zero"):
            raise ValueError(f"unknown flow_time {self.flow_time!r}")

    @property
    def discount(self) -> float:
        return 1.0 - self.dt * self.lam


def _is_affine(flow, use_affine: bool) -> bool:
    return use_affine and hasattr(flow, "drift") and hasattr(flow, "gain")


def foot_points(flow, X: np.ndarray, U: np.ndarray, times, use_affine: bool = True) -> np.ndarray:
    """flow(X[j], U[k], times[j]) for all pairs, shape (len(U), len(X), d)."""
    X = np.atleast_2d(X)
    times = np.broadcast_to(np.asarray(times, dtype=float), (len(X),))
    if _is_affine(flow, use_affine):
        uniq = np.unique(times)
        if len(uniq) == 1:
            base = np.atleast_2d(flow.drift(X, float(uniq[0])))
        else:
            base = np.stack([flow.drift(x, float(t)) for x, t in zip(X, times)])
        feet = base[None, :, :] + (U @ flow.gain.T)[:, None, :]
        if not np.all(np.isfinite(feet)):
            raise NumericalBlowupError("non-finite foot point", where=float(times.max()))
        return feet
    return np.stack([np.stack([flow(x, u, float(t)) for x, t in zip(X, times)]) for u in U])


class SemiLagrangianOperator:
    """W_sigma for a fixed problem, grid and shape parameter."""

    def __init__(self, problem: HjbProblem, grid: ScatteredGrid, sigma: float, table: NeighborTable | None = None,
                 feet: np.ndarray | None = None):
        self.problem = problem
        self.grid = grid
        self.kernel = WendlandKernel.for_dimension(grid.dim, sigma)
        U = problem.controls
        if table is None:
            if feet is None:
                feet = self.feet(problem, grid)
            table = find_neighbors(grid.points, feet.reshape(-1, grid.dim), self.kernel.radius)
        self.P = shepard_weights(table, self.kernel)
        self.n_u = len(U)
        self.step_cost = problem.dt * _cost_table(problem.running_cost, grid.points, U).T  # (n_u, N)

    @staticmethod
    def feet(problem: HjbProblem, grid: ScatteredGrid) -> np.ndarray:
        times = grid.times if problem.flow_time == "node" else np.zeros(grid.n)
        return foot_points(problem.flow, grid.points, problem.controls, times, problem.use_affine)

    def candidates(self, V: np.ndarray) -> np.ndarray:
        """Objective of every (control, node) pair, shape (n_u, N)."""
        Y = (self.P @ V).reshape(self.n_u, -1)
        return self.step_cost + self.problem.discount * Y

    def __call__(self, V: np.ndarray) -> np.ndarray:
        return self.apply(V)[0]

    def apply(self, V: np.ndarray):
        obj = self.candidates(V)
        k = obj.argmin(axis=0)  # first minimum: lowest control index wins ties
        return obj[k, np.arange(obj.shape[1])], k


def vi_operator(problem: HjbProblem, grid: ScatteredGrid, sigma: float, V: np.ndarray) -> np.ndarray:
    return SemiLagrangianOperator(problem, grid, sigma)(np.asarray(V, dtype=float))


def default_max_iter(tol: float, dt: float, lam: float) -> int:
    return 10 * math.ceil(math.log(tol) / math.log(1.0 - dt * lam))


@dataclass(eq=False)
class ValueFunction:
    grid: ScatteredGrid
    values: np.ndarray
    sigma: float
    iterations: int
    final_update: float
    converged: bool = True
    updates: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def kernel(self) -> WendlandKernel:
        return WendlandKernel.for_dimension(self.grid.dim, self.sigma)

    def interpolant(self) -> ShepardInterpolant:
        return ShepardInterpolant(self.grid.points, self.values, self.kernel)


def _iterate(op: SemiLagrangianOperator, tol: float, max_iter: int, V0=None) -> ValueFunction:
    V = np.zeros(op.grid.n) if V0 is None else np.array(V0, dtype=float)
    updates = []
    delta = np.inf
    it = 0
    while it < max_iter:
        V_new = op(V)
        delta = float(np.max(np.abs(V_new - V)))
        updates.append(delta)
        V = V_new
        it += 1
        if delta < tol:
            break
    converged = delta < tol
    if not converged:
        logger.warning("value iteration stopped after %d sweeps with update %.3e >= tol %.1e", it, delta, tol)
    return ValueFunction(op.grid, V, op.kernel.sigma, it, delta, converged, np.array(updates))


def vi_solve(problem: HjbProblem, grid: ScatteredGrid, sigma: float, tol: float = 1e-6,
             max_iter: int | None = None, V0=None) -> ValueFunction:
    """Fixed-point iteration V <- W(V) from V = 0 until the sup-norm update drops below ``tol``.

    Non-convergence is reported through ``converged=False`` rather than raised.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter is None:
        max_iter = default_max_iter(tol, problem.dt, problem.lam)
    op = SemiLagrangianOperator(problem, grid, sigma)
    return _iterate(op, tol, max_iter, V0)


def vi_residual(problem: HjbProblem, grid: ScatteredGrid, sigma: float, V: np.ndarray,
                op: SemiLagrangianOperator | None = None) -> float:
    """||V - W_sigma(V)||_inf over the grid nodes."""
    if op is None:
        op = SemiLagrangianOperator(problem, grid, sigma)
    V = np.asarray(V, dtype=float)
    return float(np.max(np.abs(V - op(V))))


def theta_range(theta_min: float, theta_max: float, theta_step: float) -> np.ndarray:
    if theta_min <= 0 or theta_step <= 0 or theta_max < theta_min:
        raise ValueError("need 0 < theta_min <= theta_max and theta_step > 0")
    n = int(math.floor((theta_max - theta_min) / theta_step + 1e-9)) + 1
    return np.round(theta_min + theta_step * np.arange(n), 12)


@dataclass(eq=False)
class ShapeScan:
    theta_bar: float
    rows: list
    best: ValueFunction

    def __iter__(self):
        yield self.theta_bar
        yield self.rows


def select_shape(problem: HjbProblem, grid: ScatteredGrid, thetas: Sequence[float], tol: float = 1e-6,
                 max_iter: int | None = None, allow_nonconverged: bool = False) -> ShapeScan:
    """Scan sigma = theta / h_X over ``thetas`` and keep the smallest residual.

    Foot points and the neighbor table are computed once for the widest
    support and reused for every theta.  If no run converges a RuntimeError
    is raised, unless ``allow_nonconverged`` is set, in which case the
    smallest residual among all runs is returned.
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.size == 0 or np.any(thetas <= 0):
        raise ValueError("thetas must be positive")
    if max_iter is None:
        max_iter = default_max_iter(tol, problem.dt, problem.lam)
    feet = SemiLagrangianOperator.feet(problem, grid).reshape(-1, grid.dim)
    table = find_neighbors(grid.points, feet, grid.h / thetas.min())

    rows, results = [], []
    for theta in thetas:
        sigma = theta / grid.h
        op = SemiLagrangianOperator(problem, grid, sigma, table=table)
        vf = _iterate(op, tol, max_iter)
        res = vi_residual(problem, grid, sigma, vf.values, op=op)
        rows.append(dict(theta=float(theta), sigma=float(sigma), residual=res, iterations=vf.iterations,
                         final_update=vf.final_update, converged=vf.converged))
        results.append((vf, res))
        logger.info("theta=%.4f residual=%.3e iterations=%d", theta, res, vf.iterations)
    # converged runs take precedence; strict < keeps the smaller theta on ties
    pool = [r for r in results if r[0].converged]
    if not pool:
        if not allow_nonconverged:
            raise RuntimeError("value iteration did not converge for any theta")
        pool = results
    best, best_res = pool[0]
    for vf, res in pool[1:]:
        if res < best_res:
            best, best_res = vf, res
    return ShapeScan(float(thetas[[r[0] for r in results].index(best)]), rows, best)


@dataclass(eq=False)
class FeedbackPolicy:
    """Feedback law u*(x) built from a value function.

    ``controls`` is the synthesis control grid and ``flow`` the one-step map
    at the synthesis step ``dt``.
    """

    value_function: ValueFunction
    controls: np.ndarray
    dt: float
    flow: Callable
    running_cost: Callable
    lam: float
    use_affine: bool = True
    _interp: ShepardInterpolant = field(init=False, repr=False)

    def __post_init__(self):
        self.controls = _as_controls(self.controls)
        self._interp = self.value_function.interpolant()
        self._sqnorms = (self._interp.nodes**2).sum(axis=1)

    def objective(self, x: np.ndarray, t: float) -> np.ndarray:
        """dt g(x,u) + (1 - lam dt) S[V](flow(x,u,t)) for every control."""
        x = np.asarray(x, dtype=float)
        feet = foot_points(self.flow, x[None, :], self.controls, t, self.use_affine)[:, 0, :]
        table = find_neighbors(self._interp.nodes, feet, self._interp.kernel.radius, node_sqnorms=self._sqnorms)
        vals = shepard_weights(table, self._interp.kernel) @ self._interp.values
        g = _cost_table(self.running_cost, x[None, :], self.controls)[0]
        return self.dt * g + (1.0 - self.lam * self.dt) * vals

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.controls[int(np.argmin(self.objective(x, t)))]


def synthesize_feedback(policy: FeedbackPolicy, x: np.ndarray, t: float) -> np.ndarray:
    return policy(x, t)


def discounted_cost_path(stage_costs, lam: float, dt: float) -> np.ndarray:
    """Partial sums J_k = sum_{i<k} dt exp(-lam i dt) g_i, with J_0 = 0."""
    g = np.asarray(stage_costs, dtype=float)
    disc = dt * np.exp(-lam * dt * np.arange(len(g)))
    return np.concatenate([[0.0], np.cumsum(disc * g)])


@dataclass(eq=False)
class Rollout:
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, d)
    controls: np.ndarray  # (K, m)
    costs: np.ndarray  # (K+1,) accumulated discounted cost


def _rollout(flow, choose, x0, T, dt, cost, lam, noise_std, seed, t0=0.0) -> Rollout:
    if T <= 0:
        raise ValueError("T must be positive")
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    K = int(round(T / dt))
    rng = np.random.default_rng(seed)
    x = np.array(x0, dtype=float)
    states, controls, stage = [x.copy()], [], []
    for k in range(K):
        t = t0 + k * dt
        u = np.atleast_1d(np.asarray(choose(x, t), dtype=float))
        stage.append(cost(x, u))
        try:
            x = np.asarray(flow(x, u, t), dtype=float)
        except NumericalBlowupError as exc:
            raise NumericalBlowupError(str(exc), where=k) from exc
        if noise_std > 0:
            x = x + rng.normal(0.0, noise_std, size=x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericalBlowupError(f"non-finite state at step {k}", where=k)
        states.append(x.copy())
        controls.append(u)
    times = t0 + dt * np.arange(K + 1)
    m = controls[0].shape[0] if controls else 0
    return Rollout(times, np.array(states), np.array(controls).reshape(K, m),
                   discounted_cost_path(stage, lam, dt))


def simulate_closed_loop(policy: FeedbackPolicy, x0: np.ndarray, T: float, noise_std: float = 0.0,
                         seed: int = 0) -> Rollout:
    """Apply the feedback law, step the flow, optionally add N(0, noise_std^2) to the state."""
    return _rollout(policy.flow, policy, x0, T, policy.dt, policy.running_cost, policy.lam, noise_std, seed)


def simulate_open_loop(flow, control: Callable[[float], np.ndarray], x0: np.ndarray, T: float, dt: float,
                       running_cost: Callable, lam: float, noise_std: float = 0.0, seed: int = 0) -> Rollout:
    """Replay a time-dependent control (no state feedback)."""
    return _rollout(flow, lambda x, t: control(t), x0, T, dt, running_cost, lam, noise_std, seed)
