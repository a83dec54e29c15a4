"""Dynamics-generated scattered grids in state space."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .fem import NumericalBlowupError

__all__ = [
    "GridSpec",
    "ScatteredGrid",
    "generate_grid",
    "separation_distance",
    "save_grid",
    "load_grid",
]


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Initial states, constant control samples and the stepping used to trace trajectories."""

    initial_states: Sequence[np.ndarray]
    control_samples: Sequence[np.ndarray]
    dt_bar: float
    K_bar: int

    def __post_init__(self):
        if len(self.initial_states) < 1 or len(self.control_samples) < 1:
            raise ValueError("need at least one initial state and one control sample")
        if self.dt_bar <= 0:
            raise ValueError("dt_bar must be positive")
        if self.K_bar < 1:
            raise ValueError("K_bar must be at least 1")


@dataclass(frozen=True, eq=False)
class ScatteredGrid:
    points: np.ndarray
    h: float
    provenance: np.ndarray  # (N, 3) int: initial-state index, control index, step k
    dt_bar: float = 0.0

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def times(self) -> np.ndarray:
        """Time k*dt_bar at which each node was visited by its trajectory."""
        return self.provenance[:, 2] * self.dt_bar


def separation_distance(points: np.ndarray) -> float:
    """Minimum Euclidean distance between distinct points (exact, all pairs)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("separation distance needs at least two points")
    dist = pdist(pts)
    dist = dist[dist > 0.0]
    if dist.size == 0:
        raise ValueError("all points coincide")
    return float(dist.min())


def generate_grid(spec: GridSpec, flow: Callable[[np.ndarray, np.ndarray, float], np.ndarray]) -> ScatteredGrid:
    """Union of the discrete trajectories x_{k+1} = flow(x_k, u_j, k*dt_bar), k < K_bar - 1.

    Exact (bitwise) duplicates are dropped; the first occurrence in (i, j, k)
    order is kept together with its provenance.
    """
    seen: dict[bytes, int] = {}
    points: list[np.ndarray] = []
    prov: list[tuple[int, int, int]] = []

    def add(x, i, j, k):
        key = x.tobytes()
        if key not in seen:
            seen[key] = len(points)
            points.append(x)
            prov.append((i, j, k))

    for i, x0 in enumerate(spec.initial_states):
        x0 = np.array(x0, dtype=float)
        for j, u in enumerate(spec.control_samples):
            u = np.atleast_1d(np.asarray(u, dtype=float))
            x = x0.copy()
            add(x, i, j, 0)
            for k in range(spec.K_bar - 1):
                try:
                    x = np.asarray(flow(x, u, k * spec.dt_bar), dtype=float)
                except NumericalBlowupError as exc:
                    raise NumericalBlowupError(str(exc), where=(i, j, k)) from exc
                if not np.all(np.isfinite(x)):
                    raise NumericalBlowupError("non-finite grid point", where=(i, j, k))
                add(x, i, j, k + 1)

    pts = np.array(points)
    h = separation_distance(pts) if len(pts) > 1 else np.inf
    return ScatteredGrid(pts, h, np.array(prov, dtype=np.int64).reshape(-1, 3), float(spec.dt_bar))


def replay_node(spec: GridSpec, flow, provenance_row) -> np.ndarray:
    """Recompute a grid node from its (i, j, k) provenance."""
    i, j, k = (int(v) for v in provenance_row)
    x = np.array(spec.initial_states[i], dtype=float)
    u = np.atleast_1d(np.asarray(spec.control_samples[j], dtype=float))
    for step in range(k):
        x = np.asarray(flow(x, u, step * spec.dt_bar), dtype=float)
    return x


def save_grid(grid: ScatteredGrid, path: str | Path) -> tuple[Path, Path]:
    """Write nodes (one per row) and a parallel provenance CSV (``*_provenance.csv``)."""
    path = Path(path)
    prov_path = path.with_name(path.stem + "_provenance.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in grid.points:
            w.writerow([repr(float(v)) for v in row])
    with open(prov_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k", "t", "dt_bar"])
        for (i, j, k), t in zip(grid.provenance, grid.times):
            w.writerow([int(i), int(j), int(k), repr(float(t)), repr(grid.dt_bar)])
    return path, prov_path


def load_grid(path: str | Path) -> ScatteredGrid:
    path = Path(path)
    points = np.loadtxt(path, delimiter=",", ndmin=2)
    prov_path = path.with_name(path.stem + "_provenance.csv")
    dt_bar = 0.0
    if prov_path.exists():
        raw = np.loadtxt(prov_path, delimiter=",", skiprows=1, ndmin=2)
        prov = raw[:, :3].astype(np.int64)
        dt_bar = float(raw[0, 4])
    else:
        prov = np.zeros((points.shape[0], 3), dtype=np.int64)
    h = separation_distance(points) if points.shape[0] > 1 else np.inf
    return ScatteredGrid(points, h, prov, dt_bar)
