"""CSV and JSON artifacts.  Floats are written as shortest round-trip decimals."""

from __future__ import annotations

import csv
import json
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .grid import ScatteredGrid, load_grid
from .hjb import ValueFunction


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def write_dicts(path: Path, rows: list[dict]) -> Path:
    header = list(rows[0]) if rows else []
    return write_rows(path, header, ([r[k] for k in header] for r in rows))


def write_matrix(path: Path, arr: np.ndarray, header: Sequence[str] | None = None) -> Path:
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    if header is None:
        header = [f"c{j}" for j in range(arr.shape[1])]
    return write_rows(path, header, arr.tolist())


def read_matrix(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, command: str, config: dict, outputs: dict[str, Path], started: str,
                   **extra: Any) -> Path:
    from . import __version__

    path = Path(path)
    missing = [str(p) for p in outputs.values() if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"manifest refers to missing outputs: {missing}")
    payload = {
        "command": command,
        "version": f"hjbfrac {__version__} (python {platform.python_version()}, numpy {np.__version__})",
        "config": config,
        "started": started,
        "finished": utc_now(),
        "outputs": {k: str(Path(v).resolve()) for k, v in outputs.items()},
    }
    payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def save_value_function(vf: ValueFunction, path: Path, grid_path: Path) -> tuple[Path, Path]:
    """Nodal values as CSV plus a JSON sidecar holding sigma and the grid location."""
    path = Path(path)
    write_rows(path, ["node", "value"], enumerate(vf.values))
    meta = path.with_suffix(".json")
    meta.write_text(json.dumps({
        "grid": str(Path(grid_path).resolve()),
        "sigma": vf.sigma,
        "iterations": vf.iterations,
        "final_update": vf.final_update,
        "converged": vf.converged,
    }, indent=2, sort_keys=True) + "\n")
    return path, meta


def load_value_function(path: Path) -> ValueFunction:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    grid: ScatteredGrid = load_grid(meta["grid"])
    values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1]
    if values.shape != (grid.n,):
        raise ValueError(f"{path}: {values.size} values for a grid of {grid.n} nodes")
    return ValueFunction(grid, values, float(meta["sigma"]), int(meta["iterations"]), float(meta["final_update"]),
                         bool(meta["converged"]))
