from types import SimpleNamespace

import pytest

from semlink.core.config import load_experiment_config
from semlink.services import experiments
from semlink.storage.artifacts import ArtifactStore


class _Drawn(Exception):
    pass


def test_recon_training_draws_its_own_channel_count(artifact_dir, smoke_config, monkeypatch):
    cfg = load_experiment_config(smoke_config)
    cfg = cfg.model_copy(update={"recon": cfg.recon.model_copy(update={"n_channels": 3}),
                                 "precode": cfg.precode.model_copy(update={"n_channels": 7})})
    codecs = ArtifactStore(artifact_dir).codecs()
    codecs.parent.mkdir(parents=True, exist_ok=True)
    codecs.write_bytes(b"")

    drawn = []

    def fake_channels(setup, cfg, n, *labels):
        drawn.append((n, labels))
        raise _Drawn

    monkeypatch.setattr(experiments, "SemanticCodec", SimpleNamespace(load=lambda path: None))
    monkeypatch.setattr(experiments, "_load_scenes", lambda setup, cfg, n: [])
    monkeypatch.setattr(experiments, "SceneReconstructor", lambda *args: None)
    monkeypatch.setattr(experiments, "train_base", lambda *args: None)
    monkeypatch.setattr(experiments, "scenario_channels", fake_channels)

    with pytest.raises(_Drawn):
        experiments.run_train_recon(cfg, artifact_dir)
    assert drawn == [(3, ("recon",))]
