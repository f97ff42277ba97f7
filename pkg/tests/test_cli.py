import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from funcproc.cli import EXIT_CHECK_FAILED, EXIT_NUMERIC, EXIT_OK, EXIT_PARSE, main, moment_discrepancy, run_config
from funcproc.config import ConfigError, load_config, parse_complex, parse_config
from funcproc.grid import make_grid
from funcproc.io import to_jsonable, write_matrix, write_table
from funcproc.process import exponential_kernel, write_kernel_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = """\
grid: {t_i: 0.0, t_f: 1.0, n_steps: 6}
model:
  m: 1.0
  omega0: 1.0
  kernel: {type: exp, eta: 0.1, gamma: 1.0}
state: {type: coherent, x0: 0.5, p0: 0.1}
measurement: {tau_m: 1.0}
tasks:
%s
output: {dir: out}
"""


def write_config(tmp_path, tasks, name="cfg.yaml", template=MINIMAL):
    body = "\n".join(f"  - {t}" for t in tasks)
    path = tmp_path / name
    path.write_text(template % body)
    return path


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_law_direct_writes_artifacts(tmp_path):
    cfg = write_config(tmp_path, ["law-direct"])
    assert run_config(cfg) == EXIT_OK
    out = tmp_path / "out"
    with (out / "R.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["row_node", "col_node", "value"]
    assert len(rows) == 49
    R = np.zeros((7, 7))
    for row in rows:
        R[int(row["row_node"]), int(row["col_node"])] = float(row["value"])
    assert np.allclose(R, R.T)
    assert (out / "b.csv").read_text().startswith("node,value\n")
    m = manifest(out)
    assert m["exit_status"] == 0 and m["all_checks_pass"]
    assert m["artifacts"] == ["R.csv", "b.csv", "law_direct.json"]
    assert "law-direct" in m["residuals"]
    assert len(m["config_sha256"]) == 64
    assert {"numpy", "scipy", "funcproc", "python"} <= set(m["versions"])


def test_route_equality_is_recorded(tmp_path):
    cfg = write_config(tmp_path, ["law-direct", "law-saddle"])
    assert run_config(cfg) == EXIT_OK
    m = manifest(tmp_path / "out")
    res = m["residuals"]["route-equality"]
    assert res["R_rel"] < 1e-8 and res["b_rel"] < 1e-8 and res["logZ_abs"] < 1e-8
    gh = (tmp_path / "out" / "saddle_gh.csv").read_text().splitlines()
    assert gh[0] == "node,g,h" and len(gh) == 8


def test_outputs_are_deterministic(tmp_path):
    tasks = ["law-direct", "covariance", "{sample: {n: 50, seed: 5}}", "{conditional: {n: 2}}"]
    cfg = write_config(tmp_path, tasks)
    run_config(cfg, tmp_path / "a")
    run_config(cfg, tmp_path / "b")
    for name in ("R.csv", "covariance.csv", "samples.csv", "conditional.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seeds_are_recorded(tmp_path):
    cfg = write_config(tmp_path, ["{sample: {n: 10, seed: 12}}", "conditional", "{check: {kind: positivity, samples: 8}}"])
    text = cfg.read_text()
    cfg.write_text("seed: 41\n" + text)
    assert run_config(cfg) == EXIT_OK
    assert manifest(tmp_path / "out")["seeds"] == {"sample": 12, "conditional": 41, "check-positivity": 41}


def test_all_checks_pass_on_reference(tmp_path):
    tasks = [
        "{check: {kind: causality}}",
        "{check: {kind: trace}}",
        "{check: {kind: normalization}}",
        "{check: {kind: kraus}}",
        "{recover: {partition: [0, 2, 4, 6]}}",
    ]
    assert run_config(write_config(tmp_path, tasks)) == EXIT_OK
    m = manifest(tmp_path / "out")
    assert all(m["checks"].values())
    report = json.loads((tmp_path / "out" / "check-causality.json").read_text())
    assert len(report) == 5 and all(r["pass"] for r in report)
    assert (tmp_path / "out" / "discrete_process.json").is_file()


def test_divisibility_expectation(tmp_path):
    cfg = write_config(tmp_path, ["{check: {kind: divisibility, expect: indivisible, threshold: 1.0e-6}}"])
    assert run_config(cfg) == EXIT_OK
    cfg = write_config(tmp_path, ["{check: {kind: divisibility, params: {threshold: 1.0e-6}}}"])
    assert run_config(cfg) == EXIT_CHECK_FAILED
    m = manifest(tmp_path / "out")
    assert m["all_checks_pass"] is False and m["exit_status"] == EXIT_CHECK_FAILED


def test_missing_kernel_file_is_a_parse_error(tmp_path, capsys):
    template = MINIMAL.replace("{type: exp, eta: 0.1, gamma: 1.0}", "{type: file, path: nowhere.csv}")
    cfg = write_config(tmp_path, ["law-direct"], template=template)
    assert main(["run", str(cfg)]) == EXIT_PARSE
    assert "not found" in capsys.readouterr().err


def test_kernel_file_roundtrip(tmp_path):
    grid = make_grid(0.0, 1.0, 6)
    write_kernel_csv(exponential_kernel(grid, 0.1, 1.0), tmp_path / "kernel.csv")
    template = MINIMAL.replace("{type: exp, eta: 0.1, gamma: 1.0}", "{type: file, path: kernel.csv}")
    run_config(write_config(tmp_path, ["law-direct"], "file.yaml", template), tmp_path / "f")
    run_config(write_config(tmp_path, ["law-direct"]), tmp_path / "e")
    a = np.loadtxt(tmp_path / "f" / "R.csv", delimiter=",", skiprows=1)
    b = np.loadtxt(tmp_path / "e" / "R.csv", delimiter=",", skiprows=1)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


def test_validate_only(tmp_path, capsys):
    cfg = write_config(tmp_path, ["law-direct", "covariance"])
    assert main(["run", str(cfg), "--validate"]) == EXIT_OK
    assert "2 task(s)" in capsys.readouterr().out
    assert not (tmp_path / "out").exists()


def test_missing_config_and_bad_arguments(tmp_path):
    assert main(["run", str(tmp_path / "absent.yaml")]) == EXIT_PARSE
    assert main(["frobnicate"]) == EXIT_PARSE


def test_numeric_failure_exits_three(tmp_path):
    template = MINIMAL.replace("{type: exp, eta: 0.1, gamma: 1.0}", "{type: exp, eta: 20.0, gamma: 0.1, structure: ['-1j', 0, 0, '1j']}")
    cfg = write_config(tmp_path, ["law-direct", "covariance"], template=template)
    assert run_config(cfg) == EXIT_NUMERIC
    m = manifest(tmp_path / "out")
    assert m["failed_task"] == "law-direct" and m["exit_status"] == EXIT_NUMERIC


def test_task_needing_measurement_without_tau(tmp_path):
    template = MINIMAL.replace("measurement: {tau_m: 1.0}\n", "")
    assert run_config(write_config(tmp_path, ["law-direct"], template=template)) == EXIT_PARSE


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path, ["law-direct"])
    proc = subprocess.run([sys.executable, "-m", "funcproc.cli", "run", str(cfg)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "PASS law-direct:law_normalization" in proc.stdout


@pytest.mark.parametrize("name", ["reference.yaml", "projective.yaml"])
def test_shipped_configs_pass(tmp_path, name):
    assert run_config(CONFIGS / name, tmp_path) == EXIT_OK


# ---- config parsing


def base_config(**overrides):
    data = {
        "grid": {"t_i": 0.0, "t_f": 1.0, "n_steps": 4},
        "model": {"kernel": {"type": "exp", "eta": 0.1, "gamma": 1.0}},
        "measurement": {"tau_m": 1.0},
        "tasks": ["law-direct"],
    }
    data.update(overrides)
    return data


@pytest.mark.parametrize(
    "overrides",
    [
        {"grid": {"t_i": 0.0, "t_f": 1.0}},
        {"grid": {"t_i": 1.0, "t_f": 0.0, "n_steps": 4}},
        {"grid": {"t_i": 0.0, "t_f": 1.0, "n_steps": 0}},
        {"model": {"m": -1.0}},
        {"model": {"kernel": {"type": "exp", "eta": 0.1}}},
        {"model": {"kernel": {"type": "spline"}}},
        {"model": {"kernel": {"type": "exp", "eta": 0.1, "gamma": 1.0, "structure": [1, 0, 0]}}},
        {"state": {"type": "squeezed"}},
        {"state": {"xi": [-1, 0, 0, -1]}},
        {"measurement": {"tau_m": 0.0}},
        {"tasks": []},
        {"tasks": ["plot"]},
        {"tasks": [{"check": {"kind": "vibes"}}]},
        {"tasks": [{"sample": {"n": 0}}]},
        {"tasks": [{"recover": {"partition": [0, "a"]}}]},
        {"tasks": [{"oracle": {"cutoffs": [8, 8]}}]},
        {"seed": "seven"},
        {"output": {"format": "xlsx"}},
        {"plots": True},
    ],
)
def test_invalid_configs_raise(overrides):
    with pytest.raises(ConfigError):
        parse_config(base_config(**overrides))


def test_task_forms_and_names():
    cfg = parse_config(base_config(tasks=[
        "law-direct",
        {"task": "sample", "n": 5},
        {"sample": {"n": 6, "seed": 2}},
        {"check": {"kind": "causality"}},
        {"check": {"kind": "causality", "nodes": [1, 2]}},
        {"check": {"kind": "trace"}},
    ], seed=9))
    assert [t.name for t in cfg.tasks] == ["law-direct", "sample", "sample-2", "check-causality", "check-causality-2", "check-trace"]
    assert cfg.tasks[1].params == {"n": 5, "seed": 9}
    assert cfg.tasks[2].params["seed"] == 2
    assert cfg.tasks[4].params == {"kind": "causality", "params": {"nodes": [1, 2]}}


def test_state_forms():
    ground = parse_config(base_config(state={"type": "ground"})).build_state()
    explicit = parse_config(base_config(state={"xi": [1, 0, 0, 1], "c": [0, 0]})).build_state()
    assert np.allclose(ground.xi, explicit.xi)
    coh = parse_config(base_config(state={"type": "coherent", "x0": 1.0, "p0": 0.5})).build_state()
    assert coh.moments()["x"] == pytest.approx(1.0)
    assert coh.moments()["p"] == pytest.approx(0.5)


@pytest.mark.parametrize("raw, value", [(1.5, 1.5), ("1-0.5j", 1 - 0.5j), ([0.2, -3], 0.2 - 3j), ("2j", 2j)])
def test_parse_complex(raw, value):
    assert parse_complex(raw, "x") == value


@pytest.mark.parametrize("raw", ["abc", [1, 2, 3], True, None, float("nan")])
def test_parse_complex_rejects(raw):
    with pytest.raises(ConfigError):
        parse_complex(raw, "x")


def test_load_config_digest(tmp_path):
    path = write_config(tmp_path, ["law-direct"])
    import hashlib

    assert load_config(path).digest == hashlib.sha256(path.read_bytes()).hexdigest()
    (tmp_path / "broken.yaml").write_text("grid: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.yaml")


# ---- writers


def test_complex_columns_split(tmp_path):
    write_table(tmp_path / "t.csv", {"k": np.arange(2), "z": np.array([1 + 2j, -0.5j])})
    assert (tmp_path / "t.csv").read_text() == "k,z_re,z_im\n0,1.0,2.0\n1,-0.0,-0.5\n"


def test_matrix_long_format(tmp_path):
    write_matrix(tmp_path / "m.csv", np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert (tmp_path / "m.csv").read_text().splitlines() == ["row,col,value", "0,0,1.0", "0,1,2.0", "1,0,3.0", "1,1,4.0"]


def test_to_jsonable():
    assert to_jsonable({"a": np.array([1.0, np.inf]), "b": 1j, 3: np.bool_(True)}) == {"a": [1.0, "inf"], "b": {"re": 0.0, "im": 1.0}, "3": True}


def test_moment_discrepancy_scales_first_moments():
    ref = {"x": 0.0, "p": 0.0, "x2": 0.5, "p2": 0.5, "xp_sym": 0.0}
    other = dict(ref, x=0.01 * np.sqrt(0.5))
    assert moment_discrepancy(ref, other) == pytest.approx(0.01)
