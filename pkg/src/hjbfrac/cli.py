"""Command-line front end: assemble, gridgen, solve, simulate, table.

Every command reads a JSON config (see ``init-config``) and writes CSV data
plus a ``manifest.json`` into ``--out``.  Exit codes: 0 success (also when
value iteration is flagged as not converged), 2 usage or config error,
3 numerical blowup.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .fem import NumericalBlowupError, interpolate
from .grid import load_grid, save_grid
from .hjb import select_shape, simulate_closed_loop, simulate_open_loop
from .problems import STAMPS, TestCase, convergence_study, default_case, setup_problem

log = logging.getLogger("hjbfrac")

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP = 0, 2, 3


class ConfigError(Exception):
    pass


def _load_case(args) -> TestCase:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        case = TestCase.from_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        case = replace(case, seed=args.seed)
    return case


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_init_config(args) -> int:
    overrides = {"d": args.d} if args.d is not None else {}
    case = default_case(args.name, **overrides)
    text = case.to_json()
    if args.out == "-":
        print(text)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_assemble(args) -> int:
    started = io.utc_now()
    case = _load_case(args)
    setup = setup_problem(case)
    out = _out(args)
    sysm = setup.system
    outputs = {
        "mass": io.write_matrix(out / "mass.csv", sysm.M),
        "stiffness": io.write_matrix(out / "stiffness.csv", sysm.A),
        "injection": io.write_matrix(out / "injection.csv", sysm.Q, [f"q{k}" for k in range(sysm.Q.shape[1])]),
        "nodes": io.write_rows(out / "nodes.csv", ["xi"], ([x] for x in setup.mesh.nodes)),
        "initial_state": io.write_rows(out / "initial_state.csv", ["x0"], ([v] for v in setup.x0)),
    }
    if sysm.M_target is not None:
        outputs["target_mass"] = io.write_matrix(out / "target_mass.csv", sysm.M_target)
    if setup.pair is not None:
        pair = setup.pair
        qn = interpolate(setup.mesh, pair.q)
        outputs["analytic"] = io.write_rows(out / "analytic.csv", ["xi", "q", "b_tilde"],
                                            zip(setup.mesh.nodes, qn, np.full(len(qn), pair.b_tilde_value)))
    io.write_manifest(out / "manifest.json", "assemble", case.to_dict(), outputs, started,
                      mesh_width=setup.mesh.h)
    return EXIT_OK


def cmd_gridgen(args) -> int:
    started = io.utc_now()
    case = _load_case(args)
    setup = setup_problem(case)
    out = _out(args)
    grid = setup.generate_grid()
    pts, prov = save_grid(grid, out / "grid.csv")
    io.write_manifest(out / "manifest.json", "gridgen", case.to_dict(), {"grid": pts, "provenance": prov}, started,
                      n_nodes=grid.n, separation_distance=grid.h, seed=case.seed)
    print(f"grid: {grid.n} nodes, separation distance {grid.h!r}")
    return EXIT_OK


def cmd_solve(args) -> int:
    started = io.utc_now()
    case = _load_case(args)
    if args.theta:
        case = replace(case, theta_min=min(args.theta), theta_max=max(args.theta))
    setup = setup_problem(case)
    grid_path = Path(args.grid)
    if not grid_path.is_file():
        raise ConfigError(f"grid file not found: {grid_path}")
    grid = load_grid(grid_path)
    if grid.dim != setup.mesh.d:
        raise ConfigError(f"grid dimension {grid.dim} does not match d={setup.mesh.d}")
    out = _out(args)
    thetas = np.array(sorted(args.theta)) if args.theta else case.thetas
    scan = select_shape(setup.hjb_problem(), grid, thetas, tol=case.tol, allow_nonconverged=True)
    vf = scan.best
    non_converged = not all(r["converged"] for r in scan.rows)
    if non_converged:
        log.warning("value iteration did not converge for every theta; see residual_scan.csv")
    vpath, vmeta = io.save_value_function(vf, out / "value_function.csv", grid_path)
    spath = io.write_dicts(out / "residual_scan.csv", scan.rows)
    io.write_manifest(out / "manifest.json", "solve", case.to_dict(),
                      {"value_function": vpath, "value_function_meta": vmeta, "residual_scan": spath}, started,
                      grid=str(grid_path.resolve()), theta_bar=scan.theta_bar, sigma=vf.sigma,
                      iterations=vf.iterations, residuals=[r["residual"] for r in scan.rows],
                      non_converged=non_converged)
    print(f"theta_bar = {scan.theta_bar}, {vf.iterations} sweeps")
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = io.utc_now()
    case = _load_case(args)
    setup = setup_problem(case)
    dt = args.dt[0] if args.dt else case.dt_sim
    noise = case.noise_std if args.noise_std is None else args.noise_std
    x0 = setup.initial_state(args.x0_scale)
    if args.open_loop:
        dyn = setup.dynamics(dt)
        if setup.pair is not None:
            pair = setup.pair
            control = lambda t: np.atleast_1d(pair.u_d(t))
            mode = "open-loop (reference control)"
        else:
            zero = np.zeros(case.m)
            control = lambda t: zero
            mode = "open-loop (zero control)"
        run = simulate_open_loop(dyn, control, x0, case.T_sim, dt, setup.cost, case.lam, noise, case.seed)
    else:
        if not args.value_function:
            raise ConfigError("--value-function is required unless --open-loop is given")
        vf = io.load_value_function(args.value_function)
        run = simulate_closed_loop(setup.policy(vf, dt), x0, case.T_sim, noise, case.seed)
        mode = "closed-loop"
    out = _out(args)
    states = setup.untransform_path(run.states, run.times)
    d = states.shape[1]
    outputs = {
        "trajectory": io.write_rows(out / "trajectory.csv", ["t"] + [f"y{i}" for i in range(d)],
                                    (np.concatenate([[t], y]) for t, y in zip(run.times, states))),
        "controls": io.write_rows(out / "controls.csv", ["t"] + [f"u{k}" for k in range(case.m)],
                                  (np.concatenate([[t], u]) for t, u in zip(run.times[:-1], run.controls))),
        "cost": io.write_rows(out / "cost.csv", ["t", "cost"], zip(run.times, run.costs)),
    }
    io.write_manifest(out / "manifest.json", "simulate", case.to_dict(), outputs, started, mode=mode, seed=case.seed,
                      noise_std=noise, dt=dt, x0_scale=args.x0_scale, final_cost=float(run.costs[-1]),
                      value_function=str(Path(args.value_function).resolve()) if args.value_function else None)
    print(f"{mode}: cost {float(run.costs[-1])!r} at T={case.T_sim}")
    return EXIT_OK


def cmd_table(args) -> int:
    started = io.utc_now()
    case = _load_case(args)
    if case.name != "test1":
        raise ConfigError(f"{case.name} has no analytic solution; the convergence table needs test1")
    setup = setup_problem(case)
    vf = io.load_value_function(args.value_function) if args.value_function else None
    dts = args.dt or [0.05, 0.025, 0.0125]
    rows = convergence_study(setup, vf, dts, stamp=args.stamp)
    out = _out(args)
    path = io.write_dicts(out / "table.csv", rows)
    io.write_manifest(out / "manifest.json", "table", case.to_dict(), {"table": path}, started, stamp=args.stamp,
                      dt=dts, value_function=str(Path(args.value_function).resolve()) if args.value_function else None)
    for r in rows:
        print(", ".join(f"{k}={io.fmt(v)}" for k, v in r.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config written by init-config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="BLAS thread limit")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = argparse.ArgumentParser(prog="hjbfrac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write a default config")
    s.add_argument("--name", required=True, choices=["test1", "test2", "test3"])
    s.add_argument("--d", type=int, default=None)
    s.add_argument("--out", default="-", help="file path, '-' for stdout")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("assemble", parents=[common], help="mass, stiffness and injection matrices")
    s.set_defaults(func=cmd_assemble)

    s = sub.add_parser("gridgen", parents=[common], help="trace trajectories into a scattered grid")
    s.set_defaults(func=cmd_gridgen)

    s = sub.add_parser("solve", parents=[common], help="shape scan and value iteration")
    s.add_argument("--grid", required=True)
    s.add_argument("--theta", type=float, nargs="+", default=None, help="explicit theta values")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("simulate", parents=[common], help="closed- or open-loop trajectory")
    s.add_argument("--value-function", default=None)
    s.add_argument("--open-loop", action="store_true")
    s.add_argument("--noise-std", type=float, default=None)
    s.add_argument("--dt", type=float, nargs=1, default=None)
    s.add_argument("--x0-scale", type=float, default=1.0, help="scale the reference initial datum")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("table", parents=[common], help="convergence table against the exact solution")
    s.add_argument("--value-function", default=None, help="omit to use the exact-control replay")
    s.add_argument("--dt", type=float, nargs="+", default=None)
    s.add_argument("--stamp", choices=STAMPS, default="post-step")
    s.set_defaults(func=cmd_table)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except NumericalBlowupError as exc:
        print(f"error: numerical blowup ({exc}; at {exc.where})", file=sys.stderr)
        return EXIT_BLOWUP
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
