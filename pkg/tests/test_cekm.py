import json

import numpy as np
import pytest

from semlink.core.config import CdmConfig, EstimatorConfig
from semlink.services.cekm import (
    NMSE_FLOOR_DB,
    ChannelEstimator,
    EstimationError,
    EstimatorEntry,
    KnowledgeMap,
    KnowledgeMapError,
    LSCondition,
    PVCondition,
    build_knowledge_map,
    condition_dim,
    estimate,
    from_real_layout,
    nmse,
    synthesize_dataset,
    to_real_layout,
    train_cdm,
    train_estimator,
    velocity_bin,
)
from semlink.services.channel import TABLE_REGIONS, UserState, make_scenario
from semlink.services.nn_core import ShapeError, UntrainedModel
from semlink.services.ofdm_link import interpolate_ls, ls_estimate, transmit_pilots


@pytest.fixture
def tiny_estimator(small_layout, small_numerology):
    return lambda: ChannelEstimator(small_layout, small_numerology, width=4, blocks=1)


@pytest.fixture
def kmap(tiny_estimator):
    m = KnowledgeMap("pv", list(TABLE_REGIONS), EstimatorEntry((0, -1), tiny_estimator(), {"type": "mixed"}))
    m.add(EstimatorEntry((1, 15), tiny_estimator(), {"scenario": "fast"}))
    m.add(EstimatorEntry((3, 0), tiny_estimator(), {"scenario": "slow"}))
    return m


@pytest.mark.parametrize("speed,expected", [
    (0.0, None), (5.0, None), (11.9, None), (12.0, 0), (23.9, 0), (24.0, 1), (72.0, 5), (198.0, 15),
    (204.0, 15), (204.1, None), (500.0, None),
])
def test_velocity_bins(speed, expected):
    assert velocity_bin(speed) == expected


def test_real_layout_round_trip(rng):
    h = rng.normal(size=(3, 8, 4, 2, 4)) + 1j * rng.normal(size=(3, 8, 4, 2, 4))
    real = to_real_layout(h)
    assert real.shape == (3, 16, 8, 4)
    np.testing.assert_array_equal(from_real_layout(real, 2, 4), h)
    with pytest.raises(ShapeError):
        from_real_layout(real, 2, 2)


def test_select_follows_region_and_velocity(kmap):
    assert kmap.select(UserState((60.0, 60.0), 200.0)).key == (1, 15)
    assert kmap.select(UserState((-150.0, -150.0), 15.0)).key == (3, 0)
    # right region, missing bin
    assert kmap.select(UserState((60.0, 60.0), 30.0)).key == (0, -1)
    # inside no region
    assert kmap.select(UserState((400.0, 400.0), 200.0)).key == (0, -1)
    # below and above the binned speeds
    assert kmap.select(UserState((-150.0, -150.0), 5.0)).key == (0, -1)
    assert kmap.select(UserState((60.0, 60.0), 250.0)).key == (0, -1)


def test_select_tie_goes_to_lower_region_id(kmap, tiny_estimator):
    kmap.add(EstimatorEntry((2, 15), tiny_estimator(), {}))
    assert kmap.region_of((100.0, 0.0)).id == 1
    assert kmap.select(UserState((100.0, 0.0), 200.0)).key == (1, 15)


def test_duplicate_keys_are_rejected(kmap, tiny_estimator):
    with pytest.raises(KnowledgeMapError):
        kmap.add(EstimatorEntry((1, 15), tiny_estimator(), {}))


def test_map_persists_entries_and_provenance(tmp_path, kmap, small_layout, small_numerology):
    directory = kmap.save(tmp_path / "pv")
    index = json.loads((directory / "index.json").read_text())
    assert [e["file"] for e in index["entries"]] == ["region1_bin15.slnn", "region3_bin0.slnn"]

    back = KnowledgeMap.load(directory, small_layout, small_numerology)
    assert back.kind == "pv"
    assert set(back.entries) == {(1, 15), (3, 0)}
    assert back.entries[(3, 0)].provenance == {"scenario": "slow"}
    assert back.fallback.provenance == {"type": "mixed"}
    assert back.select(UserState((60.0, 60.0), 200.0)).key == (1, 15)


def test_missing_map_directory_is_reported(tmp_path, small_layout):
    with pytest.raises(KnowledgeMapError):
        KnowledgeMap.load(tmp_path / "nothing", small_layout)


def test_untrained_estimator_equals_ls_interpolation(small_channel, small_layout, tiny_estimator):
    ls = ls_estimate(transmit_pilots(small_channel, small_layout, 1.0, 10.0, seed=0), small_layout, 1.0)
    np.testing.assert_allclose(estimate(tiny_estimator(), ls).h, interpolate_ls(ls, small_layout), atol=1e-12)


def test_estimator_checks_grid_shape(tiny_estimator):
    with pytest.raises(ShapeError):
        estimate(tiny_estimator(), np.zeros((3, 2, 2, 4), dtype=complex))


def test_trained_estimator_is_frozen_and_marked(small_channel, small_layout, small_numerology, rng):
    h = np.stack([small_channel.h * rng.uniform(0.5, 1.5) for _ in range(6)])
    cfg = EstimatorConfig(width=4, blocks=1, epochs=1, batch_size=3)
    est = train_estimator(h, small_layout, cfg, seed=0, numerology=small_numerology)
    assert est.trained
    assert est.store.frozen
    ls = ls_estimate(transmit_pilots(h[0], small_layout, 1.0, 10.0, seed=1), small_layout, 1.0)
    out = estimate(est, ls)
    assert out.shape == small_numerology.grid_shape
    assert np.all(np.isfinite(out.h))


def test_train_estimator_rejects_empty_data(small_layout, small_numerology):
    with pytest.raises(EstimationError):
        train_estimator(np.empty((0, 8, 4, 2, 4)), small_layout, EstimatorConfig(), 0, numerology=small_numerology)


def test_nmse_reference_points(small_channel):
    assert nmse(small_channel, small_channel) == NMSE_FLOOR_DB
    assert nmse(small_channel, np.zeros(small_channel.shape)) == pytest.approx(0.0)
    assert nmse(small_channel, 0.9 * small_channel.h) == pytest.approx(-20.0)
    with pytest.raises(EstimationError):
        nmse(np.zeros(small_channel.shape), small_channel)


def test_condition_vectors(small_layout, small_numerology, rng):
    assert PVCondition(100.0, -50.0, 60.0).vector().shape == (3,)
    samples = rng.normal(size=(3, 2, 2, 2, 4)) + 1j * rng.normal(size=(3, 2, 2, 2, 4))
    v = LSCondition(samples, 10.0).vector()
    assert v.shape == (condition_dim("ls", small_layout, small_numerology),)
    assert np.mean(v ** 2) == pytest.approx(1.0)
    with pytest.raises(KnowledgeMapError):
        condition_dim("true", small_layout)


def test_tiny_cdm_trains_and_synthesizes(small_layout, small_numerology):
    cfg = CdmConfig(width=4, timesteps=10, epochs=1, batch_size=8, samples_per_subregion=1, sample_steps=2)
    cdm = train_cdm("pv", TABLE_REGIONS, cfg, small_layout, 1.0, seed=0, numerology=small_numerology)
    assert cdm.trained
    ds = synthesize_dataset(cdm, PVCondition(50.0, 50.0, 198.0), 3, seed=1)
    assert ds.h.shape == (3, 8, 4, 2, 4)
    assert np.mean(np.abs(ds.h) ** 2) == pytest.approx(1.0)


def test_synthesis_needs_a_trained_cdm(small_layout, small_numerology):
    from semlink.services.cekm import ChannelDiffusion

    cdm = ChannelDiffusion("pv", CdmConfig(width=4, timesteps=10), small_layout, small_numerology)
    with pytest.raises(UntrainedModel):
        synthesize_dataset(cdm, PVCondition(0.0, 0.0, 10.0), 2, seed=0)


def test_oracle_map_keys_scenarios_by_region_and_mid_speed(small_layout, small_numerology, tiny_estimator):
    scenarios = [make_scenario("fast", TABLE_REGIONS, (50.0, 50.0), 10.0, (192.0, 204.0)),
                 make_scenario("slow", TABLE_REGIONS, (-150.0, -150.0), 10.0, (12.0, 24.0))]
    cfg = EstimatorConfig(width=4, blocks=1, epochs=1, batch_size=4)
    fallback = EstimatorEntry((0, -1), tiny_estimator(), {})
    m = build_knowledge_map("true", scenarios, TABLE_REGIONS, None, fallback, 4, cfg, small_layout, 1.0, 10.0,
                            seed=0, threads=2, numerology=small_numerology)
    assert set(m.entries) == {(1, 15), (3, 0)}
    assert m.entries[(1, 15)].provenance["scenario"] == "fast"
    assert all(e.estimator.trained for e in m.entries.values())


def test_generated_maps_need_their_cdm(small_layout, small_numerology, tiny_estimator):
    scenarios = [make_scenario("fast", TABLE_REGIONS, (50.0, 50.0), 10.0, (192.0, 204.0))]
    with pytest.raises(KnowledgeMapError):
        build_knowledge_map("pv", scenarios, TABLE_REGIONS, None, EstimatorEntry((0, -1), tiny_estimator(), {}),
                            4, EstimatorConfig(width=4, blocks=1, epochs=1), small_layout, 1.0, 10.0, seed=0,
                            numerology=small_numerology)
