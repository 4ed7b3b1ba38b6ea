import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semlink.core.config import CodecConfig
from semlink.services.nn_core import ShapeError, Tensor
from semlink.services.semantic_codec import (
    CONSTELLATION,
    LEVELS,
    N_CLASSES,
    PROTOTYPES,
    JsccCodec,
    SemanticCodec,
    c2r,
    generate_scene,
    generate_scenes,
    load_scenes,
    quantize,
    r2c,
    resample_labels,
    save_scenes,
    seg_accuracy,
    segment_by_color,
    train_codecs,
    train_jscc,
)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@given(arrays(np.float64, st.integers(1, 64), elements=finite))
def test_quantizer_lands_on_qam_levels(x):
    q = quantize(x).data
    assert np.all(np.isin(q, LEVELS))


def test_quantizer_passes_gradient_straight_through(rng):
    x = Tensor(rng.normal(size=6), requires_grad=True)
    w = rng.normal(size=6)
    (quantize(x) * w).sum().backward()
    np.testing.assert_array_equal(x.grad, w)


def test_constellation_has_unit_mean_energy():
    assert len(CONSTELLATION) == 16
    assert np.mean(np.abs(CONSTELLATION) ** 2) == pytest.approx(1.0, abs=1e-12)


@given(arrays(np.float64, st.integers(1, 32).map(lambda n: 2 * n), elements=finite))
def test_real_complex_packing_is_lossless(v):
    np.testing.assert_array_equal(c2r(r2c(v)), v)


def test_r2c_needs_even_length():
    with pytest.raises(ShapeError):
        r2c(np.zeros(3))


def test_scene_generation_is_seeded_and_well_formed():
    a, b = generate_scene(5), generate_scene(5)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.image.shape == (3, 64, 64)
    assert a.seg.shape == (16, 16)
    assert a.low_res().shape == (3, 8, 8)
    assert 0.0 <= a.image.min() and a.image.max() <= 1.0
    assert set(np.unique(a.seg)) <= set(range(N_CLASSES))
    assert 2 <= len(a.objects) <= 5


def test_label_resampling_takes_the_majority():
    labels = np.zeros((4, 4), dtype=int)
    labels[:2, :2] = [[1, 1], [1, 0]]
    labels[2:, 2:] = [[2, 3], [3, 2]]
    np.testing.assert_array_equal(resample_labels(labels, 2), [[1, 0], [0, 2]])


def test_colour_segmenter_labels_flat_prototype_regions():
    image = np.empty((3, 8, 8))
    image[:] = 0.45
    image[:, :4, :4] = PROTOTYPES[0][:, None, None]
    image[:, 4:, 4:] = PROTOTYPES[2][:, None, None]
    np.testing.assert_array_equal(segment_by_color(image, 2), [[1, 0], [0, 3]])


def test_scene_file_keeps_pixels_and_labels(tmp_path):
    scenes = generate_scenes(3, seed=1, size=16)
    back = load_scenes(save_scenes(tmp_path / "s.slsc", scenes))
    assert len(back) == 3
    np.testing.assert_array_equal(back[2].seg, scenes[2].seg)
    np.testing.assert_allclose(back[0].image, scenes[0].image, atol=1e-6)
    assert back[1].objects[0][0] == scenes[1].objects[0][0]


def test_codec_feature_sizes_at_full_resolution():
    codec = SemanticCodec()
    scene = generate_scene(0)
    f_se = codec.encode_se(scene.seg)
    f_co = codec.encode_co(scene.low_res())
    assert f_se.shape == (512,) and f_co.shape == (512,)
    assert codec.n_symbols == 512
    assert np.min(np.abs(f_se[:, None] - CONSTELLATION[None, :]), axis=1).max() < 1e-12
    assert codec.decode_se(f_se).shape == (N_CLASSES, 16, 16)
    low = codec.decode_co(f_co)
    assert low.shape == (3, 8, 8)
    assert low.min() >= 0.0 and low.max() <= 1.0


def test_codec_rejects_wrong_shapes():
    codec = SemanticCodec(16)
    with pytest.raises(ShapeError):
        codec.encode_se(np.zeros((8, 8), dtype=int))
    with pytest.raises(ShapeError):
        codec.decode_co(np.zeros(7, dtype=complex))


def test_train_codecs_needs_enough_scenes():
    with pytest.raises(ValueError):
        train_codecs(generate_scenes(2, 0, 16), CodecConfig(image_size=16, min_scenes=4), seed=0)


def test_small_codec_training_freezes_and_round_trips(tmp_path):
    cfg = CodecConfig(image_size=16, n_scenes=4, min_scenes=4, epochs=2, batch_size=2, jscc_epochs=1)
    scenes = generate_scenes(4, 0, 16)
    codec, history = train_codecs(scenes, cfg, seed=0)
    assert codec.trained and codec.store.frozen
    assert len(history["ce"]) == 2 and len(history["mse"]) == 2
    assert 0.0 <= seg_accuracy(codec, scenes) <= 1.0

    path = codec.save(tmp_path / "codecs.slnn")
    back = SemanticCodec.load(path)
    np.testing.assert_array_equal(back.encode_se(scenes[0].seg), codec.encode_se(scenes[0].seg))

    jscc, losses = train_jscc(scenes, cfg, seed=0)
    assert jscc.trained and len(losses) == 1
    symbols = jscc.encode(scenes[0].image)
    assert symbols.shape == (jscc.n_symbols,)
    assert np.mean(np.abs(symbols) ** 2) == pytest.approx(1.0)
    assert jscc.decode(symbols).shape == (3, 16, 16)


def test_jscc_rejects_wrong_symbol_count():
    with pytest.raises(ShapeError):
        JsccCodec(16).decode(np.zeros(5, dtype=complex))
