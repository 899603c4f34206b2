from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from swimctl.service import app


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200 and r.json()["status"] == "ok"


def test_mesh_endpoint(client, tmp_path):
    r = client.post("/mesh", json={"config_text": "[run]\noutput_dir = out", "base_dir": str(tmp_path)})
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == 0 and "mesh.txt" in body["artifacts"]
    assert (tmp_path / "out" / "mesh.txt").exists()


def test_projection_run_endpoint(client, tmp_path):
    text = "[run]\nscenario = projection-only\namplitude = 0\noutput_dir = out"
    r = client.post("/run", json={"config_text": text, "base_dir": str(tmp_path)})
    assert r.status_code == 200 and r.json()["status"] == 0


def test_verify_endpoint_rejects_bad_config(client, tmp_path):
    # a mesh coarser than the annulus allows is a config error, not a crash
    r = client.post("/verify", json={"config_text": "[geometry]\nh_target = 9", "base_dir": str(tmp_path)})
    assert r.status_code == 400
    body = r.json()
    assert body["status"] == 2 and body["field"] == "geometry.h_target"


def test_config_error_is_400(client):
    r = client.post("/run", json={"config_text": "[physics]\nnu = -3"})
    assert r.status_code == 400
    assert r.json()["error"] == "ConfigError"


def test_missing_mesh_file_reports_path(client, tmp_path):
    r = client.post("/mesh", json={"config_text": "[geometry]\nmesh_file = gone.txt", "base_dir": str(tmp_path)})
    assert r.status_code == 400
    assert "gone.txt" in (r.json()["path"] or r.json()["message"])


def test_request_validation(client):
    r = client.post("/run", json={"config_text": 5})
    assert r.status_code == 422
