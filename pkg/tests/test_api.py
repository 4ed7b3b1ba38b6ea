import numpy as np
import pytest
from fastapi.testclient import TestClient

from semlink.core.config import load_experiment_config, settings
from semlink.main import app
from semlink.routers import knowledge_map
from semlink.services.cekm import ChannelEstimator, EstimatorEntry, KnowledgeMap
from semlink.services.experiments import link_setup


@pytest.fixture
def client(artifact_dir, smoke_config, monkeypatch):
    monkeypatch.setattr(settings, "EXPERIMENT_CONFIG", smoke_config)
    monkeypatch.setattr(settings, "CEKM_KIND", "pv")
    knowledge_map._load_map.cache_clear()
    yield TestClient(app)
    knowledge_map._load_map.cache_clear()


@pytest.fixture
def saved_map(artifact_dir, smoke_config):
    setup = link_setup(load_experiment_config(smoke_config), artifact_dir)

    def est():
        return ChannelEstimator(setup.layout, setup.numerology, width=4, blocks=1)

    kmap = KnowledgeMap("pv", setup.regions, EstimatorEntry((0, -1), est(), {"kind": "fallback"}))
    kmap.add(EstimatorEntry((1, 2), est(), {"scenario": "region1-extrapolation"}))
    kmap.save(setup.store.knowledge_map("pv"))
    return setup


def test_healthz_echoes_request_id(client):
    r = client.get("/healthz", headers={"X-Request-ID": "abc123"})
    assert r.status_code == 200
    assert r.json()["ok"] is True
    assert r.headers["X-Request-ID"] == "abc123"


def test_request_id_is_generated(client):
    assert len(client.get("/healthz").headers["X-Request-ID"]) == 12


def test_no_map_is_service_unavailable(client):
    r = client.get("/cekm/entries")
    assert r.status_code == 503
    assert "no knowledge map" in r.json()["detail"]


def test_entries_list_the_saved_map(client, saved_map):
    body = client.get("/cekm/entries").json()
    assert body["kind"] == "pv"
    assert body["fallback"] is True
    assert [e["key"] for e in body["entries"]] == ["region1_bin2"]
    assert body["entries"][0]["file"] == "region1_bin2.slnn"


@pytest.mark.parametrize("x, y, speed, key", [
    (100.0, 100.0, 40.0, "region1_bin2"),
    (100.0, 100.0, 100.0, "fallback"),
    (500.0, 500.0, 30.0, "fallback"),
])
def test_select(client, saved_map, x, y, speed, key):
    r = client.get("/cekm/select", params={"x": x, "y": y, "speed": speed})
    assert r.status_code == 200
    assert r.json()["key"] == key


def test_select_rejects_negative_speed(client, saved_map):
    assert client.get("/cekm/select", params={"x": 0, "y": 0, "speed": -1}).status_code == 422


def test_estimate_returns_a_full_grid(client, saved_map, rng):
    layout, numerology = saved_map.layout, saved_map.numerology
    shape = (layout.n_pilot_subcarriers, layout.n_pilot_symbols, numerology.n_rx, numerology.n_tx)
    ls = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    r = client.post("/cekm/estimate", json={"user": {"x": 100.0, "y": 100.0, "speed": 40.0},
                                            "real": ls.real.tolist(), "imag": ls.imag.tolist()})
    assert r.status_code == 200
    body = r.json()
    assert body["key"] == "region1_bin2"
    assert np.asarray(body["real"]).shape == numerology.grid_shape


def test_estimate_rejects_a_wrong_grid(client, saved_map):
    grid = np.zeros((1, 1, 2, 4)).tolist()
    r = client.post("/cekm/estimate", json={"user": {"x": 0.0, "y": 0.0, "speed": 0.0},
                                            "real": grid, "imag": grid})
    assert r.status_code == 422


def test_readiness_follows_the_map_on_disk(client, artifact_dir, smoke_config):
    r = client.get("/readyz")
    assert r.status_code == 503
    assert r.json() == {"ok": False, "kind": "pv"}


def test_ready_once_a_map_is_saved(client, saved_map):
    r = client.get("/readyz")
    assert r.status_code == 200
    assert r.json()["ok"] is True
