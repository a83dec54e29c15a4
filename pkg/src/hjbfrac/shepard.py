"""Shepard approximation with compactly supported Wendland weights.

The approximant is the convex combination

    S[f](x) = sum_i f(x_i) phi(|x - x_i|) / sum_j phi(|x - x_j|)

where only nodes within the support radius 1/sigma contribute.  Queries with
no node inside the support take the value of the nearest node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "WendlandKernel",
    "NeighborTable",
    "ShepardInterpolant",
    "wendland",
    "wendland_eval",
    "find_neighbors",
    "shepard_weights",
    "shepard_eval",
    "shepard_eval_batch",
]

# below this the accumulated weight is treated as an empty support
DENOM_FLOOR = 1e-300


def wendland(r, sigma: float, ell: int):
    """max{0, (1 - sigma r)^(ell+2) ((ell^2+4ell+3) sigma^2 r^2 + (3ell+6) sigma r + 3)}."""
    sr = sigma * np.asarray(r, dtype=float)
    base = np.clip(1.0 - sr, 0.0, None)
    poly = (ell * ell + 4 * ell + 3) * sr * sr + (3 * ell + 6) * sr + 3.0
    return np.where(sr < 1.0, base ** (ell + 2) * poly, 0.0)


@dataclass(frozen=True)
class WendlandKernel:
    ell: int
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("shape parameter must be positive")

    @classmethod
    def for_dimension(cls, d: int, sigma: float) -> "WendlandKernel":
        return cls(d // 2 + 3, float(sigma))

    @property
    def radius(self) -> float:
        return 1.0 / self.sigma

    def __call__(self, r):
        return wendland(r, self.sigma, self.ell)


def wendland_eval(kernel: WendlandKernel, r):
    return kernel(r)


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """Exact query-to-node distances for all pairs closer than ``radius``.

    Stored CSR-style: the neighbors of query q are
    ``indices[indptr[q]:indptr[q+1]]`` (ascending) with distances ``dist``.
    ``nearest`` holds the index of the closest node of every query.
    """

    n_nodes: int
    radius: float
    indptr: np.ndarray
    indices: np.ndarray
    dist: np.ndarray
    nearest: np.ndarray

    @property
    def n_queries(self) -> int:
        return len(self.indptr) - 1


def _exact_sqdist(queries, nodes, qi, ci):
    diff = queries[qi] - nodes[ci]
    return (diff * diff).sum(axis=1)


def find_neighbors(
    nodes: np.ndarray,
    queries: np.ndarray,
    radius: float,
    node_sqnorms: np.ndarray | None = None,
    chunk_entries: int = 2_000_000,
) -> NeighborTable:
    """Neighbor search by a matrix-product screen followed by exact distances.

    The screen uses |q|^2 + |x|^2 - 2 q.x with a rounding margin, so the
    candidate set is a superset of the true neighbors; every stored distance
    is recomputed from coordinate differences.
    """
    nodes = np.ascontiguousarray(nodes, dtype=float)
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=float)
    n, nq = nodes.shape[0], queries.shape[0]
    xn = (nodes * nodes).sum(axis=1) if node_sqnorms is None else node_sqnorms
    r2 = radius * radius
    step = max(1, chunk_entries // max(n, 1))

    counts = np.zeros(nq, dtype=np.int64)
    idx_parts, dist_parts = [], []
    nearest = np.empty(nq, dtype=np.int64)
    for q0 in range(0, nq, step):
        Q = queries[q0 : q0 + step]
        qn = (Q * Q).sum(axis=1)
        approx = qn[:, None] + xn[None, :] - 2.0 * (Q @ nodes.T)
        margin = 1e-10 * (qn[:, None] + xn[None, :]) + 1e-300

        rows, cols = np.nonzero(approx <= r2 + margin)
        if rows.size:
            sq = _exact_sqdist(Q, nodes, rows, cols)
            keep = sq < r2
            rows, cols, sq = rows[keep], cols[keep], sq[keep]
            counts[q0 : q0 + len(Q)] = np.bincount(rows, minlength=len(Q))
            idx_parts.append(cols)
            dist_parts.append(np.sqrt(sq))

        amin = approx.min(axis=1)
        nr, nc = np.nonzero(approx <= (amin + margin.max(axis=1))[:, None])
        nsq = _exact_sqdist(Q, nodes, nr, nc)
        order = np.lexsort((nc, nsq, nr))
        nr, nc = nr[order], nc[order]
        first = np.ones(len(nr), dtype=bool)
        first[1:] = nr[1:] != nr[:-1]
        nearest[q0 + nr[first]] = nc[first]

    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.concatenate(idx_parts) if idx_parts else np.zeros(0, dtype=np.int64)
    dist = np.concatenate(dist_parts) if dist_parts else np.zeros(0)
    return NeighborTable(n, float(radius), indptr, indices, dist, nearest)


def shepard_weights(table: NeighborTable, kernel: WendlandKernel) -> sp.csr_matrix:
    """Sparse (queries x nodes) matrix of Shepard weights psi_i(query)."""
    if kernel.radius > table.radius * (1.0 + 1e-12):
        raise ValueError("neighbor table radius is smaller than the kernel support")
    nq = table.n_queries
    row_of = np.repeat(np.arange(nq), np.diff(table.indptr))
    keep = table.dist < kernel.radius
    rows, cols = row_of[keep], table.indices[keep]
    phi = kernel(table.dist[keep])

    counts = np.bincount(rows, minlength=nq)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    denom = np.zeros(nq)
    nz = counts > 0
    denom[nz] = np.add.reduceat(phi, starts[nz]) if phi.size else 0.0

    empty = denom < DENOM_FLOOR
    ok = ~empty[rows]
    rows, cols, vals = rows[ok], cols[ok], phi[ok] / denom[rows[ok]]

    # nearest-node fallback outside the union of supports
    er = np.nonzero(empty)[0]
    rows = np.concatenate([rows, er])
    cols = np.concatenate([cols, table.nearest[er]])
    vals = np.concatenate([vals, np.ones(len(er))])
    order = np.lexsort((cols, rows))
    W = sp.csr_matrix((vals[order], (rows[order], cols[order])), shape=(nq, table.n_nodes))
    W.has_sorted_indices = True
    return W


@dataclass(frozen=True, eq=False)
class ShepardInterpolant:
    nodes: np.ndarray
    values: np.ndarray
    kernel: WendlandKernel

    def __post_init__(self):
        if self.nodes.ndim != 2 or self.nodes.shape[0] < 1:
            raise ValueError("need a non-empty (N, d) node array")
        if self.values.shape != (self.nodes.shape[0],):
            raise ValueError("one value per node required")

    def weights(self, queries: np.ndarray) -> sp.csr_matrix:
        table = find_neighbors(self.nodes, queries, self.kernel.radius)
        return shepard_weights(table, self.kernel)

    def evaluate(self, queries: np.ndarray) -> np.ndarray:
        return self.weights(queries) @ self.values

    def __call__(self, x: np.ndarray) -> float:
        return float(self.evaluate(np.asarray(x, dtype=float)[None, :])[0])


def shepard_eval(itp: ShepardInterpolant, x: np.ndarray) -> float:
    return itp(x)


def shepard_eval_batch(itp: ShepardInterpolant, queries: np.ndarray) -> np.ndarray:
    return itp.evaluate(queries)
