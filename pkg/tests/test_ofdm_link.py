import numpy as np
import pytest

from semlink.services.channel import ChannelTensor, Numerology, TABLE_REGIONS, UserState, generate
from semlink.services.ofdm_link import (
    LinkError,
    PilotError,
    PilotLayout,
    combine,
    demap_streams,
    equalize,
    interpolate_ls,
    ls_estimate,
    map_streams,
    pilot_frame,
    stream_slots,
    svd_decompose,
    transmit,
    transmit_pilots,
    true_pilot_grid,
)


def _random_channel(rng, K=8, L=4, nr=2, nt=4):
    return ChannelTensor((rng.normal(size=(K, L, nr, nt)) + 1j * rng.normal(size=(K, L, nr, nt))) / np.sqrt(2))


def test_svd_diagonalizes_every_resource_element(rng):
    for _ in range(50):
        h = _random_channel(rng)
        svd = svd_decompose(h)
        eye_r, eye_t = np.eye(2), np.eye(4)
        np.testing.assert_allclose(np.conj(np.swapaxes(svd.u, -1, -2)) @ svd.u, np.broadcast_to(eye_r, svd.u.shape),
                                   atol=1e-10)
        np.testing.assert_allclose(np.conj(np.swapaxes(svd.v, -1, -2)) @ svd.v, np.broadcast_to(eye_t, svd.v.shape),
                                   atol=1e-10)
        lam = np.conj(np.swapaxes(svd.u, -1, -2)) @ h.h @ svd.v
        expected = np.zeros_like(lam)
        expected[..., 0, 0], expected[..., 1, 1] = svd.s[..., 0], svd.s[..., 1]
        np.testing.assert_allclose(lam, expected, atol=1e-10)
        assert np.all(svd.s[..., 0] >= svd.s[..., 1])


def test_noiseless_link_returns_the_frame(rng):
    h = _random_channel(rng)
    svd = svd_decompose(h)
    x = rng.normal(size=(8, 4, 2)) + 1j * rng.normal(size=(8, 4, 2))
    y = transmit(x, h, svd, None)
    np.testing.assert_allclose(combine(y, svd), svd.s * x, atol=1e-10)
    np.testing.assert_allclose(equalize(combine(y, svd), svd, 0.0), x, atol=1e-10)


def test_transmit_rejects_mismatched_frames(rng):
    h = _random_channel(rng)
    with pytest.raises(LinkError):
        transmit(np.zeros((8, 4, 3)), h, svd_decompose(h), None)


def test_ls_error_variance_matches_pilot_snr():
    layout = PilotLayout()
    region = TABLE_REGIONS[1]
    snr_db = 10.0
    rng = np.random.default_rng(0)
    errs = []
    for i in range(200):
        h = generate(region, UserState((100.0, -100.0), 60.0), seed=i)
        ls = ls_estimate(transmit_pilots(h, layout, 1.0, snr_db, rng=rng), layout, 1.0)
        errs.append(np.abs(ls - true_pilot_grid(h, layout)) ** 2)
    assert np.mean(errs) * 10.0 ** (snr_db / 10.0) == pytest.approx(1.0, rel=0.05)


def test_noiseless_ls_is_exact_at_pilots(small_channel, small_layout):
    ls = ls_estimate(transmit_pilots(small_channel, small_layout, 0.5 + 0.5j, None), small_layout, 0.5 + 0.5j)
    np.testing.assert_allclose(ls, true_pilot_grid(small_channel, small_layout), atol=1e-12)


def test_pilot_frame_is_orthogonal_across_antennas():
    layout = PilotLayout()
    frame = pilot_frame(layout)
    assert np.all(np.count_nonzero(frame, axis=-1) == 1)
    assert frame.shape == (72, 4, 4)


def test_interpolation_is_exact_on_a_flat_channel(small_layout, rng):
    g = rng.normal(size=(2, 4)) + 1j * rng.normal(size=(2, 4))
    h = np.broadcast_to(g, (8, 4, 2, 4)).copy()
    ls = ls_estimate(transmit_pilots(h, small_layout, 1.0, None), small_layout, 1.0)
    np.testing.assert_allclose(interpolate_ls(ls, small_layout), h, atol=1e-12)


def test_bad_pilot_layouts_are_rejected():
    with pytest.raises(PilotError):
        PilotLayout(n_subcarriers=70)
    with pytest.raises(PilotError):
        PilotLayout(symbol_indices=(0, 14))
    with pytest.raises(PilotError):
        ls_estimate(np.zeros((72, 4, 2)), PilotLayout(), 0.0)


def test_feature_pair_fits_one_frame_with_semantics_on_the_strong_stream():
    n_frames, slots = stream_slots(1024, 72, 14, 2)
    assert n_frames == 1
    assert np.all(slots[:512, 3] == 0)
    assert np.all(slots[512:, 3] == 1)

    f_se = np.arange(512) + 1j
    f_co = -np.arange(512) - 1j
    frames = map_streams(f_se, f_co)
    assert frames.shape == (1, 72, 14, 2)
    on_stream0 = frames[0, :, :, 0].reshape(-1)[:512]
    np.testing.assert_array_equal(on_stream0, f_se)


def test_compress_priority_puts_compressed_features_first():
    f_se = np.ones(512, dtype=complex)
    f_co = 2 * np.ones(512, dtype=complex)
    frames = map_streams(f_se, f_co, "compress")
    assert np.all(frames[0, :, :, 0].reshape(-1)[:512] == 2)
    se, co = demap_streams(frames, 512, 512, "compress")
    np.testing.assert_array_equal(se, f_se)
    np.testing.assert_array_equal(co, f_co)


@pytest.mark.parametrize("priority", ["semantics", "", "co"])
def test_unknown_priority_is_rejected_both_ways(priority):
    frames = map_streams(np.ones(4, dtype=complex), np.ones(4, dtype=complex))
    with pytest.raises(ValueError, match="priority"):
        map_streams(np.ones(4, dtype=complex), np.ones(4, dtype=complex), priority)
    with pytest.raises(ValueError, match="priority"):
        demap_streams(frames, 4, 4, priority)


def test_multi_frame_mapping_is_balanced_and_lossless(rng):
    numerology = Numerology(n_subcarriers=8, n_symbols=4)
    f_se = rng.normal(size=100) + 1j * rng.normal(size=100)
    f_co = rng.normal(size=60) + 1j * rng.normal(size=60)
    frames = map_streams(f_se, f_co, "semantic", numerology)
    assert frames.shape[0] == 3
    used = np.count_nonzero(frames, axis=(1, 2))
    # every stream of every frame carries the same quota, save the tail
    assert used.max() == 27
    assert used.min() == 25
    se, co = demap_streams(frames, 100, 60)
    np.testing.assert_array_equal(se, f_se)
    np.testing.assert_array_equal(co, f_co)
    # head of the semantic feature goes to stream 0 of each frame first
    n_frames, slots = stream_slots(160, 8, 4, 2)
    assert np.all(slots[:n_frames * 27, 3] == 0)
