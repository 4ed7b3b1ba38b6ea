import csv
import json

import pytest
from click.testing import CliRunner

from semlink.cli import cli
from semlink.core.config import load_experiment_config
from semlink.services.cekm import ChannelEstimator, EstimatorEntry, KnowledgeMap
from semlink.services.experiments import BETA_SWEEP_COLUMNS, CHANNEL_BENCH_COLUMNS, E2E_COLUMNS, link_setup


@pytest.fixture
def runner():
    return CliRunner()


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_help_lists_every_command(runner):
    result = runner.invoke(cli, ["--help"])
    assert result.exit_code == 0
    for name in ("build-cekm", "train-codecs", "train-recon", "train-precode", "bench-channel", "bench-e2e",
                 "sweep-beta", "inspect", "query", "reconstruct", "serve"):
        assert name in result.output


def test_missing_artifacts_name_the_command_to_run(runner, artifact_dir, smoke_config, tmp_path):
    result = runner.invoke(cli, ["bench-channel", "--config", smoke_config, "--out", str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "not found" in result.output
    assert "semlink build-cekm" in result.output

    result = runner.invoke(cli, ["train-recon", "--config", smoke_config])
    assert result.exit_code == 1
    assert "semlink train-codecs" in result.output


def test_invalid_config_is_reported(runner, artifact_dir, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("snr_db: []\n")
    result = runner.invoke(cli, ["bench-channel", "--config", str(bad)])
    assert result.exit_code == 1
    assert "invalid config" in result.output


def test_inspect_of_an_empty_store(runner, artifact_dir, smoke_config):
    result = runner.invoke(cli, ["inspect", "--config", smoke_config])
    assert result.exit_code == 0
    assert json.loads(result.stdout) == {"root": str(artifact_dir), "files": [], "maps": {}}


@pytest.fixture
def pv_map(artifact_dir, smoke_config):
    setup = link_setup(load_experiment_config(smoke_config), artifact_dir)

    def est():
        return ChannelEstimator(setup.layout, setup.numerology, width=4, blocks=1)

    kmap = KnowledgeMap("pv", setup.regions, EstimatorEntry((0, -1), est(), {"type": "mixed", "n": 4}))
    kmap.add(EstimatorEntry((1, 2), est(), {"type": "pv", "scenario": "region1", "x": 100.0, "y": 100.0, "v": 42.0}))
    kmap.save(setup.store.knowledge_map("pv"))
    return kmap


@pytest.mark.parametrize("x,y,speed,expected", [
    (100, 100, 40, {"entry": "region1_bin2", "region": 1, "velocity_bin": 2, "located_in": 1, "condition": "pv"}),
    (100, 100, 100, {"entry": "fallback", "region": None, "velocity_bin": None, "located_in": 1,
                     "condition": "mixed"}),
    (100, 100, 5, {"entry": "fallback", "region": None, "velocity_bin": None, "located_in": 1,
                   "condition": "mixed"}),
    (900, 900, 40, {"entry": "fallback", "region": None, "velocity_bin": None, "located_in": None,
                    "condition": "mixed"}),
])
def test_query_reports_the_selected_entry(runner, pv_map, smoke_config, x, y, speed, expected):
    result = runner.invoke(cli, ["query", "--config", smoke_config, "--kind", "pv",
                                 "--x", str(x), "--y", str(y), "--speed-kmh", str(speed)])
    assert result.exit_code == 0, result.output
    body = json.loads(result.stdout)
    assert body["kind"] == "pv"
    assert {k: body[k] for k in expected} == expected


def test_query_without_a_map_names_the_build_command(runner, artifact_dir, smoke_config):
    result = runner.invoke(cli, ["query", "--config", smoke_config, "--kind", "ls",
                                 "--x", "100", "--y", "100", "--speed-kmh", "40"])
    assert result.exit_code == 1
    assert "semlink build-cekm" in result.output


def test_query_rejects_negative_speed(runner, smoke_config):
    result = runner.invoke(cli, ["query", "--config", smoke_config, "--x", "0", "--y", "0", "--speed-kmh", "-1"])
    assert result.exit_code == 2


def test_smoke_flow(runner, artifact_dir, smoke_config, tmp_path):
    def invoke(*args):
        result = runner.invoke(cli, list(args) + ["--config", smoke_config])
        assert result.exit_code == 0, result.output
        return result

    for command in ("train-codecs", "build-cekm", "train-recon", "train-precode"):
        invoke(command)
    assert (artifact_dir / "manifests" / "build-cekm.json").exists()
    assert (artifact_dir / "cekm" / "pv" / "index.json").exists()
    assert (artifact_dir / "precode_beta0.1.slnn").exists()

    first = tmp_path / "bench1"
    second = tmp_path / "bench2"
    invoke("bench-channel", "--out", str(first), "--threads", "1")
    invoke("bench-channel", "--out", str(second), "--threads", "2")
    csv1, csv2 = first / "channel_bench.csv", second / "channel_bench.csv"
    assert csv1.read_bytes() == csv2.read_bytes()
    assert csv1.read_text().splitlines()[0] == ",".join(CHANNEL_BENCH_COLUMNS)
    rows = _rows(csv1)
    assert {r["policy"] for r in rows} == {"cekm-pv", "cekm-ls", "mixed", "true-channel", "ls-interp"}
    assert len(rows) == 5 * 2

    manifest = first / "bench-channel.manifest.json"
    replay = runner.invoke(cli, ["bench-channel", "--config", str(manifest), "--out", str(tmp_path / "replay")])
    assert replay.exit_code == 0, replay.output
    assert (tmp_path / "replay" / "channel_bench.csv").read_bytes() == csv1.read_bytes()

    out = tmp_path / "e2e"
    invoke("bench-e2e", "--out", str(out))
    rows = _rows(out / "e2e.csv")
    assert list(rows[0]) == E2E_COLUMNS
    assert len(rows) == 4 * 2
    assert all(0.0 <= float(r["iou"]) <= 1.0 for r in rows)

    invoke("sweep-beta", "--out", str(out))
    rows = _rows(out / "beta_sweep.csv")
    assert list(rows[0]) == BETA_SWEEP_COLUMNS
    assert sorted({float(r["beta"]) for r in rows}) == [0.1, 10.0]

    result = invoke("reconstruct", "--out", str(out), "--scene-seed", "3", "--snr", "10")
    paths = json.loads(result.stdout)
    assert set(paths) == {"original", "received"}
    assert (out / "scene3_original.ppm").read_bytes().startswith(b"P6\n")

    listing = json.loads(invoke("inspect").stdout)
    assert set(listing["maps"]) == {"pv", "ls", "true"}
    assert "codecs.slnn" in listing["files"]
