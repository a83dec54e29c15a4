import json

import numpy as np
import pytest

from hjbfrac.cli import main
from hjbfrac.problems import TestCase, default_case


def write_case(path, name, **overrides):
    default_case(name, **overrides).to_json(path)
    return str(path)


@pytest.fixture
def small1(tmp_path):
    return write_case(tmp_path / "t1.json", "test1", d=7, T_grid=0.25, T_sim=0.25, dt_vi=0.025, synth_controls=11,
                      theta_min=0.1, theta_max=0.3, theta_step=0.02)


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_init_config_round_trips(tmp_path, capsys):
    path = tmp_path / "c.json"
    assert main(["init-config", "--name", "test3", "--d", "31", "--out", str(path)]) == 0
    case = TestCase.from_json(path)
    assert case.d == 31 and case.nonlinearity == "cubic"
    assert main(["init-config", "--name", "test2"]) == 0
    assert json.loads(capsys.readouterr().out)["gamma"] == 1e-6


def test_missing_config_exits_2(tmp_path):
    assert main(["gridgen", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"name": "test1", "nonsense": 3}')
    assert main(["gridgen", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("{not json")
    assert main(["gridgen", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_assemble_writes_matrices(tmp_path, small1):
    out = tmp_path / "asm"
    assert main(["assemble", "--config", small1, "--out", str(out)]) == 0
    M = np.loadtxt(out / "mass.csv", delimiter=",", skiprows=1)
    assert M.shape == (7, 7) and np.allclose(M, M.T)
    assert set(manifest(out)["outputs"]) >= {"mass", "stiffness", "injection", "analytic"}


def test_gridgen_is_bitwise_reproducible(tmp_path, small1):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gridgen", "--config", small1, "--out", str(a)]) == 0
    assert main(["gridgen", "--config", small1, "--out", str(b), "--threads", "1"]) == 0
    assert (a / "grid.csv").read_bytes() == (b / "grid.csv").read_bytes()
    n = manifest(a)["n_nodes"]
    assert n == 7 * 20 + 1
    assert len((a / "grid.csv").read_text().splitlines()) == n  # one node per row, no header
    assert len((a / "grid_provenance.csv").read_text().splitlines()) == n + 1


@pytest.fixture
def solved(tmp_path, small1):
    g = tmp_path / "g"
    assert main(["gridgen", "--config", small1, "--out", str(g)]) == 0
    s = tmp_path / "s"
    assert main(["solve", "--config", small1, "--out", str(s), "--grid", str(g / "grid.csv")]) == 0
    return small1, s


def test_solve_default_scan(solved):
    _, s = solved
    rows = (s / "residual_scan.csv").read_text().splitlines()
    assert len(rows) == 1 + 11
    m = manifest(s)
    assert len(m["residuals"]) == 11 and "theta_bar" in m and isinstance(m["non_converged"], bool)


def test_solve_single_theta(tmp_path, solved):
    cfg, s = solved
    out = tmp_path / "one"
    grid = manifest(s)["grid"]
    assert main(["solve", "--config", cfg, "--out", str(out), "--grid", grid, "--theta", "0.2"]) == 0
    assert len((out / "residual_scan.csv").read_text().splitlines()) == 2
    assert manifest(out)["theta_bar"] == 0.2


def test_solve_missing_grid_exits_2(tmp_path, small1):
    assert main(["solve", "--config", small1, "--out", str(tmp_path), "--grid", str(tmp_path / "x.csv")]) == 2


def test_simulate_is_deterministic_and_records_seed(tmp_path, solved):
    cfg, s = solved
    vf = str(s / "value_function.csv")
    a, b = tmp_path / "ra", tmp_path / "rb"
    for out in (a, b):
        assert main(["simulate", "--config", cfg, "--out", str(out), "--value-function", vf, "--seed", "7"]) == 0
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    m = manifest(a)
    assert m["seed"] == 7 and m["mode"] == "closed-loop"
    traj = np.loadtxt(a / "trajectory.csv", delimiter=",", skiprows=1)
    assert traj.shape == (21, 8)


def test_simulate_open_loop_without_value_function(tmp_path, small1):
    out = tmp_path / "ol"
    assert main(["simulate", "--config", small1, "--out", str(out), "--open-loop", "--noise-std", "0"]) == 0
    assert manifest(out)["mode"].startswith("open-loop")
    assert main(["simulate", "--config", small1, "--out", str(tmp_path / "x")]) == 2


def test_table_single_dt_has_empty_rates(tmp_path, small1):
    out = tmp_path / "tab"
    assert main(["table", "--config", small1, "--out", str(out), "--dt", "0.05"]) == 0
    lines = (out / "table.csv").read_text().splitlines()
    header, row = lines[0].split(","), lines[1].split(",")
    assert len(lines) == 2
    for k, v in zip(header, row):
        assert (v == "") == k.startswith("rate_")


def test_table_requires_test1(tmp_path):
    cfg = write_case(tmp_path / "t3.json", "test3", d=7)
    assert main(["table", "--config", cfg, "--out", str(tmp_path / "t")]) == 2
