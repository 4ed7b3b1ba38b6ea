import os
import tempfile

# logs from imported modules must not land in the working tree
os.environ.setdefault("LOG_DIR", tempfile.mkdtemp(prefix="semlink-logs-"))

from pathlib import Path

import numpy as np
import pytest

from semlink.core.config import settings
from semlink.services.channel import Numerology, RegionSpec, UserState, generate
from semlink.services.ofdm_link import PilotLayout

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_numerology():
    return Numerology(n_subcarriers=8, n_symbols=4)


@pytest.fixture
def small_layout(small_numerology):
    return PilotLayout.for_numerology(small_numerology, (0, 3))


@pytest.fixture
def region():
    return RegionSpec(1, (100.0, 100.0), 100.0, False, 5, (50.0, 100.0))


@pytest.fixture
def small_channel(region, small_numerology):
    return generate(region, UserState((110.0, 95.0), 60.0, 0.5), seed=3, numerology=small_numerology)


@pytest.fixture
def artifact_dir(tmp_path, monkeypatch):
    root = tmp_path / "artifacts"
    monkeypatch.setattr(settings, "ARTIFACT_DIR", str(root))
    return root


@pytest.fixture
def smoke_config():
    return str(CONFIGS / "smoke.yaml")
