import csv
import json

import numpy as np
import pytest

from confeig import shapes
from confeig.cli import diagnose_verdict, main
from confeig.mesh import write_off
from confeig.serialize import config_hash, loads


@pytest.fixture(scope="module")
def sphere_off(tmp_path_factory):
    path = tmp_path_factory.mktemp("mesh") / "sphere.off"
    write_off(shapes.icosphere(3), path)
    return str(path)


def report(out, command):
    return loads((out / f"{command}.json").read_text())


def test_eigs_on_sphere_file(sphere_off, tmp_path, capsys):
    assert main(["eigs", "--mesh", sphere_off, "--measure", "uniform", "--k", "5",
                 "--out", str(tmp_path)]) == 0
    r = report(tmp_path, "eigs")
    assert len(r["result"]["eigenvalues"]) == 6
    assert r["result"]["lambda1_mass"] == pytest.approx(8 * np.pi, rel=0.02)
    assert r["result"]["multiplicities"][:2] == [1, 3]
    assert r["seed"] == 0 and r["exit_status"] == 0
    assert r["config_hash"] == config_hash(r["config"])
    assert capsys.readouterr().out.count("\n") == 1


def test_eigenfunction_dump(tmp_path):
    assert main(["eigs", "--mesh", "gen:icosphere:2", "--k", "3", "--save-eigenfunctions",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eigenfunctions.eigf").read_bytes()[:4] == b"EIGF"


def test_extremality_on_sphere_file(sphere_off, tmp_path):
    assert main(["extremality", "--mesh", sphere_off, "--measure", "uniform", "--k", "1",
                 "--out", str(tmp_path)]) == 0
    res = report(tmp_path, "extremality")["result"]
    assert res["verdict"] == "extremal"
    np.testing.assert_allclose(res["coefficients"], [1, 1, 1], atol=0.05)


def test_maximize_on_torus_writes_monotone_trace(tmp_path):
    off = tmp_path / "torus.off"
    write_off(shapes.torus(16, 8), off)
    assert main(["maximize", "--mesh", str(off), "--caps", "10,100", "--seed", "7",
                 "--budget", "4", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "maximize_trace.csv") as f:
        lam = [float(row["lambda1"]) for row in csv.DictReader(f)]
    assert lam and all(b >= a - 1e-10 for a, b in zip(lam, lam[1:]))
    assert report(tmp_path, "maximize")["seed"] == 7


def test_reports_are_deterministic(tmp_path):
    argv = ["bounds", "--mesh", "gen:icosphere:2", "--k-list", "1,2"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(argv + ["--out", str(a)]) == 0
    assert main(argv + ["--out", str(b)]) == 0
    ra, rb = report(a, "bounds"), report(b, "bounds")
    ra.pop("timestamp"), rb.pop("timestamp")
    ra["config"].pop("out", None), rb["config"].pop("out", None)
    assert json.dumps(ra, sort_keys=True) == json.dumps(rb, sort_keys=True)
    assert ra["result"]["hersch"]["pass"]


def test_capacity_of_disk_annulus(tmp_path):
    assert main(["capacity", "--mesh", "gen:disk:30", "--inner", "disk:0,0:0.1",
                 "--outer", "odisk:0,0:0.5", "--out", str(tmp_path)]) == 0
    val = report(tmp_path, "capacity")["result"]["cap_value"]
    assert val == pytest.approx(2 * np.pi / np.log(5), rel=0.05)


@pytest.mark.parametrize("argv", [
    ["eigs", "--mesh", "missing.off"],
    ["eigs", "--mesh", "gen:icosphere:1", "--k", "many"],
    ["eigs", "--mesh", "gen:nosuchshape"],
    ["eigs", "--mesh", "gen:icosphere:1", "--measure", '{"kind": "density", "density": [-1]}'],
    ["capacity", "--mesh", "gen:disk:5", "--inner", "ball:0:9", "--outer", "ball:0:1"],
])
def test_input_errors_exit_1(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == 1


def test_input_error_report_is_written(tmp_path):
    assert main(["eigs", "--mesh", "missing.off", "--out", str(tmp_path)]) == 1
    r = report(tmp_path, "eigs")
    assert r["exit_status"] == 1 and "not found" in r["result"]["error"]


def test_numerical_failure_exits_2(tmp_path):
    # one vertex holds more than half the mass: no balancing dilation exists
    n = shapes.icosphere(2).n_vertices
    w = [1.0] * n
    w[0] = 10.0 * n
    desc = json.dumps({"kind": "density", "weights": w})
    assert main(["bounds", "--mesh", "gen:icosphere:2", "--measure", desc,
                 "--out", str(tmp_path)]) == 2
    assert report(tmp_path, "bounds")["exit_status"] == 2


@pytest.mark.parametrize("measure, verdict", [
    ("uniform", "compact-like"),
    ('{"kind": "atomic", "atoms": [[0, 0.5], [40, 0.5]]}', "degenerate"),
])
def test_diagnose_sphere(measure, verdict, tmp_path):
    assert main(["diagnose", "--mesh", "gen:icosphere:3", "--measure", measure,
                 "--out", str(tmp_path)]) == 0
    res = report(tmp_path, "diagnose")["result"]
    assert res["verdict"] == verdict and res["label"] == "heuristic"


def test_diagnose_lp_density(tmp_path):
    m = shapes.icosphere(3)
    r = np.linalg.norm(m.vertices - [0, 0, 1], axis=1)
    dens = list(np.maximum(r, 1e-3) ** -0.5)
    desc = tmp_path / "lp.json"
    desc.write_text(json.dumps({"kind": "density", "density": dens}))
    assert main(["diagnose", "--mesh", "gen:icosphere:3", "--measure", str(desc),
                 "--out", str(tmp_path)]) == 0
    assert report(tmp_path, "diagnose")["result"]["verdict"] == "compact-like"


def test_diagnose_disk_boundary(tmp_path):
    assert main(["diagnose", "--mesh", "gen:disk:20", "--measure", "boundary",
                 "--out", str(tmp_path)]) == 0
    assert report(tmp_path, "diagnose")["result"]["verdict"] == "compact-like"


def test_verdict_rule_on_synthetic_profiles():
    class P:
        def __init__(self, radii, profile, trend):
            self.radii, self.profile, self.trend = np.array(radii), np.array(profile), trend

    r = [0.5, 0.25, 0.125]
    assert diagnose_verdict(P(r, [1, 1, 1], "flat"), P(r, [1, 0.5, 0.2], "decaying")) == "compact-like"
    assert diagnose_verdict(P(r, [1, 2, 4], "growing"), P(r, [1, 3, 9], "growing")) == "degenerate"
    assert diagnose_verdict(P(r, [1, 1.1, 1], "flat"), P(r, [1, 2, 3], "growing")) == "positive-lambda1-like"


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "confeig", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "confeig" in out.stdout
