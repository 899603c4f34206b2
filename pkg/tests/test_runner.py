from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from swimctl.config import parse_config
from swimctl.errors import ConfigError, MeshFileError
from swimctl.mesh import read_mesh
from swimctl.runner import EXIT_CHECK, EXIT_OK, SCHEMA_VERSION, execute


def _cfg(out, text):
    """Parse ``text`` with artifacts directed to ``out``."""
    line = f"output_dir = {out}"
    text = text.replace("[run]", f"[run]\n{line}") if "[run]" in text else f"{text}\n[run]\n{line}\n"
    return parse_config(text, base_dir=str(out))


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_projection_zero_amplitude_writes_zeros(tmp_path):
    res = execute("run", _cfg(tmp_path, "[run]\nscenario = projection-only\namplitude = 0"))
    assert res.status == EXIT_OK
    rows = _rows(tmp_path / "constraints.csv")
    assert rows[0] == ["t", "momentum_x", "momentum_y", "angular", "flux", "boundary_mismatch"]
    assert all(float(x) == 0.0 for r in rows[1:] for x in r[1:])
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema_version"] == SCHEMA_VERSION
    assert summary["checks"]["max_constraint"]["passed"]


def test_linear_run_is_byte_identical(tmp_path):
    text = "[run]\nscenario = linear-closed-loop\n[control]\nlam = 1.0\n[discretization]\nhorizon = 5"
    a, b = tmp_path / "a", tmp_path / "b"
    r1 = execute("run", _cfg(a, text))
    r2 = execute("run", _cfg(b, text))
    assert r1.status == r2.status == EXIT_OK
    assert sorted(r1.artifacts) == sorted(r2.artifacts)
    for name in r1.artifacts:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    header = _rows(a / "trajectory.csv")[0]
    assert header[0] == "t" and "riccati_energy" in header


def test_linear_run_gain_and_spectrum(tmp_path):
    res = execute("run", _cfg(tmp_path, "[run]\nscenario = linear-closed-loop\n[control]\nlam = 1.0\n[discretization]\nhorizon = 5"))
    K = np.loadtxt(tmp_path / "gain.txt")
    assert K.shape == (res.summary["n_control"], res.summary["n_state"])
    spec = np.loadtxt(tmp_path / "spectrum.csv", delimiter=",", skiprows=1)
    assert spec[:, 2].max() < 0


def test_nonlinear_run_reports_decay(tmp_path):
    res = execute("run", _cfg(tmp_path, "[run]\nscenario = nonlinear-stabilization"))
    assert res.status == EXIT_OK
    fit = json.loads((tmp_path / "decay_fit.json").read_text())
    assert fit["slope"] <= fit["required_slope"]
    it = json.loads((tmp_path / "iteration.json").read_text())
    assert it["converged"] and it["sweeps"] <= 10


def test_nonlinear_overload_is_check_failure(tmp_path):
    res = execute("run", _cfg(tmp_path, "[run]\nscenario = nonlinear-stabilization\n[discretization]\ndata_fraction = 30\nmax_sweeps = 5"))
    assert res.status == EXIT_CHECK
    it = json.loads((tmp_path / "iteration.json").read_text())
    assert not it["converged"]


def test_mesh_command_round_trips(tmp_path):
    res = execute("mesh", _cfg(tmp_path, ""))
    assert res.status == EXIT_OK
    mesh = read_mesh(tmp_path / "mesh.txt")
    assert len(mesh.vertices) == res.summary["vertices"]


def test_corrupted_mesh_file_names_path(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("radii 0.5 1.5\nvertices 3\n0 0\n")
    cfg = _cfg(tmp_path, f"[geometry]\nmesh_file = {bad.name}")
    with pytest.raises(MeshFileError) as exc:
        execute("run", cfg)
    assert str(bad) in str(exc.value)


def test_config_error_propagates(tmp_path):
    with pytest.raises(ConfigError):
        execute("run", _cfg(tmp_path, "[control]\nlam = 1\n[discretization]\ndt = 100"))
