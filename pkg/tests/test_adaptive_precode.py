import itertools

import numpy as np
import pytest

from semlink.core.config import PrecodeConfig
from semlink.services import adaptive_precode
from semlink.services.adaptive_precode import (
    PrecodeModel,
    decode_forward,
    encode_payload,
    evaluate_mse,
    identity_model,
    mean_symbol_power,
    parameter_count,
    precode_forward,
    train_joint,
)
from semlink.services.channel import TABLE_REGIONS, UserState, generate
from semlink.services.nn_core import ShapeError, TrainingDiverged
from semlink.services.ofdm_link import propagate, svd_decompose
from semlink.services.semantic_codec import CONSTELLATION


def _qam(rng, *shape):
    return CONSTELLATION[rng.integers(0, 16, size=shape)]


@pytest.fixture
def channels(small_numerology):
    region = TABLE_REGIONS[1]
    return [generate(region, UserState((100.0, -100.0), 30.0), seed=s, numerology=small_numerology)
            for s in range(4)]


def test_parameter_count_of_a_full_frame_block():
    assert parameter_count(2016) == 32_518_080
    assert PrecodeModel(8).store.num_parameters() == parameter_count(8)


def test_beta_must_be_positive():
    with pytest.raises(ValueError):
        PrecodeModel(8, beta=0.0)


def test_encoded_payload_has_unit_symbol_power(rng):
    model = PrecodeModel(24, block_symbols=8, rng=rng)
    x = encode_payload(model, _qam(rng, 10), _qam(rng, 14))
    assert x.shape == (24,)
    for block in x.reshape(3, 8):
        assert mean_symbol_power(block) == pytest.approx(1.0)


def test_identity_model_is_the_plain_svd_path(rng, small_channel, small_numerology):
    model = identity_model(32)
    f_se = np.exp(2j * np.pi * rng.uniform(size=16))
    f_co = np.exp(2j * np.pi * rng.uniform(size=16))
    svd = svd_decompose(small_channel)
    tx = precode_forward(f_se, f_co, model, svd, small_numerology)
    y = propagate(tx, small_channel, 0.0)
    r_se, r_co = decode_forward(y, svd, model, 0.0, 16, 16)
    np.testing.assert_allclose(r_se, f_se, atol=1e-9)
    np.testing.assert_allclose(r_co, f_co, atol=1e-9)


def test_oversized_payload_is_rejected(rng):
    with pytest.raises(ShapeError):
        encode_payload(PrecodeModel(8), _qam(rng, 6), _qam(rng, 6))


def test_model_file_keeps_beta_and_weights(tmp_path, rng):
    model = PrecodeModel(16, beta=0.1, block_symbols=8, rng=rng)
    back = PrecodeModel.load(model.save(tmp_path / "beta0.1.slnn"))
    assert back.beta == pytest.approx(0.1)
    assert back.block == 8
    np.testing.assert_array_equal(back.w.data, model.w.data)


def test_beta_trades_semantic_against_compressed_error(rng, channels, small_numerology):
    features = (_qam(rng, 128, 16), _qam(rng, 128, 16))
    cfg = PrecodeConfig(epochs=30, batch_size=32, lr=1e-2, snr_db=(-5.0, 0.0))
    results = {}
    for beta in (0.1, 10.0):
        model = PrecodeModel(32, beta=beta, rng=np.random.default_rng(0))
        history = train_joint(model, features, channels, cfg, seed=1, numerology=small_numerology)
        assert model.trained
        assert len(history["total"]) == 30
        results[beta] = evaluate_mse(model, features, channels, 0.0, seed=2, numerology=small_numerology)
    assert results[0.1][0] < results[10.0][0]
    assert results[10.0][1] < results[0.1][1]


def test_train_joint_checks_payload_size(rng, channels, small_numerology):
    with pytest.raises(ShapeError):
        train_joint(PrecodeModel(16), (_qam(rng, 4, 8), _qam(rng, 4, 4)), channels, PrecodeConfig(epochs=1), 0,
                    small_numerology)


def test_rising_loss_is_reported_as_divergence(rng, channels, small_numerology, monkeypatch):
    losses = itertools.count(1.0)
    monkeypatch.setattr(adaptive_precode, "check_finite_loss", lambda loss, where: next(losses))
    model = PrecodeModel(32, beta=1.0, rng=np.random.default_rng(0))
    with pytest.raises(TrainingDiverged, match="precode-beta1"):
        train_joint(model, (_qam(rng, 8, 16), _qam(rng, 8, 16)), channels,
                    PrecodeConfig(epochs=3, batch_size=8, lr=1e-3), seed=0, numerology=small_numerology)
    assert not model.trained
