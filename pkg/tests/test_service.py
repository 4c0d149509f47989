import json
import shlex
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from helpers import write_stub_oracle
from subsel import __version__
from subsel.harness import RunReport, SweepReport
from subsel.service import create_app


@pytest.fixture
def client():
    return TestClient(create_app())


def run_doc(tmp_path, **overrides):
    doc = {
        "k": 6, "delta": 0.5, "agent": "random", "seeds": [0],
        "embedding_dim": 4, "points_per_cluster": 3,
        "out_dir": str(tmp_path / "runs"),
    }
    doc.update(overrides)
    return doc


def test_health(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    assert resp.json() == {"status": "ok", "version": __version__}


def test_run_returns_full_report(client, tmp_path):
    resp = client.post("/run", json=run_doc(tmp_path, seeds=[0, 1]))
    assert resp.status_code == 200
    report = RunReport.model_validate(resp.json())
    assert report.k == 6 and report.budget == 3
    assert [r.seed for r in report.results] == [0, 1]
    assert Path(report.run_dir, "report.json").exists()


def test_run_rejects_invalid_config(client, tmp_path):
    resp = client.post("/run", json=run_doc(tmp_path, delta=0.0))
    assert resp.status_code == 422
    body = resp.json()
    assert body["kind"] == "config-invalid"
    assert "delta" in json.dumps(body["detail"])


def test_run_maps_semantic_config_errors(client, tmp_path):
    # Valid shape, but the explicit landscape does not fit k — this only
    # surfaces once the world is built.
    doc = run_doc(tmp_path, landscape={"quality": [1.0, 2.0]})
    resp = client.post("/run", json=doc)
    assert resp.status_code == 422
    assert resp.json()["kind"] == "config-invalid"


def test_run_maps_oracle_failures(client, tmp_path):
    cmd = write_stub_oracle(tmp_path, "bad-protocol")
    doc = run_doc(tmp_path, oracle_cmd=shlex.join(cmd))
    resp = client.post("/run", json=doc)
    assert resp.status_code == 502
    body = resp.json()
    assert body["kind"] == "oracle-failure"
    assert "protocol" in body["detail"]


def test_brute_overrides_configured_agent(client, tmp_path):
    resp = client.post("/brute", json=run_doc(tmp_path, agent="random"))
    assert resp.status_code == 200
    report = RunReport.model_validate(resp.json())
    assert report.agent == "brute_force"
    assert report.results[0].method == "brute_force"


def test_sweep_endpoint(client, tmp_path):
    body = {"config": run_doc(tmp_path, k=8),
            "axis": "delta", "values": [0.25, 0.0]}
    resp = client.post("/sweep", json=body)
    assert resp.status_code == 200
    report = SweepReport.model_validate(resp.json())
    assert [c.status for c in report.cells] == ["ok", "error"]
    assert Path(report.summary_csv).exists()


def test_sweep_rejects_unknown_axis(client, tmp_path):
    body = {"config": run_doc(tmp_path), "axis": "reward", "values": ["acc"]}
    resp = client.post("/sweep", json=body)
    assert resp.status_code == 422
    assert resp.json()["kind"] == "config-invalid"


def test_export_endpoint(client, tmp_path):
    run = client.post("/run", json=run_doc(tmp_path)).json()
    report_path = str(Path(run["run_dir"]) / "report.json")
    resp = client.post("/export", json={"report_path": report_path})
    assert resp.status_code == 200
    body = resp.json()
    assert body["n_points"] == 3 * 3
    ids = [int(line) for line in Path(body["path"]).read_text().splitlines()]
    assert len(ids) == body["n_points"]


def test_export_missing_report(client, tmp_path):
    resp = client.post("/export",
                       json={"report_path": str(tmp_path / "nope.json")})
    assert resp.status_code == 422
    assert resp.json()["kind"] == "config-invalid"
