import numpy as np
import pytest

from semlink.services import nn_core as nn


def test_gradcheck_elementwise_ops(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0  # keep away from zero for div
    for fn in (nn.add, nn.sub, nn.mul, nn.div):
        assert nn.gradcheck(lambda x, y: fn(x, y).sum(), [a, b]) < 1e-4
    assert nn.gradcheck(lambda x: nn.sigmoid(x).sum(), [a]) < 1e-4
    assert nn.gradcheck(lambda x: nn.neg(x).sum(), [a]) < 1e-4


def test_gradcheck_relu_off_the_kink(rng):
    x = rng.normal(size=(5, 5))
    x[np.abs(x) < 0.1] = 0.5
    assert nn.gradcheck(lambda v: nn.relu(v).sum(), [x]) < 1e-4


def test_gradcheck_dense_and_conv(rng):
    x = rng.normal(size=(2, 5))
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    assert nn.gradcheck(lambda x_, w_, b_: nn.loss_mse(nn.dense(x_, w_, b_), np.ones((2, 3))), [x, w, b]) < 1e-4

    img = rng.normal(size=(2, 3, 6, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    for stride in (1, 2):
        target = nn.conv2d(img, k, stride=stride).data * 0.5
        assert nn.gradcheck(lambda x_, w_: nn.loss_mse(nn.conv2d(x_, w_, stride=stride), target), [img, k]) < 1e-4


def test_gradcheck_shape_ops(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    up_target = rng.normal(size=(1, 2, 6, 6))
    assert nn.gradcheck(lambda v: nn.loss_mse(nn.upsample_nearest(v, 2), up_target), [x]) < 1e-4

    rows = np.array([[0, 0, 1, 2], [2, 1, 1, 0]])
    cols = np.array([0, 2, 2])
    g = nn.gather_grid(x, rows, cols).data
    assert nn.gradcheck(lambda v: nn.loss_mse(nn.gather_grid(v, rows, cols), g * 0.3), [x]) < 1e-4

    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    assert nn.gradcheck(lambda p, q: (nn.concat([p, q], axis=1) * nn.concat([p, q], axis=1)).sum(), [a, b]) < 1e-4


def test_normalize_power_hits_target_and_has_exact_gradient(rng):
    x = rng.normal(size=(4, 10))
    out = nn.normalize_power(x, 0.5).data
    np.testing.assert_allclose(np.mean(out ** 2, axis=-1), 0.5, rtol=1e-12)
    w = rng.normal(size=(4, 10))
    assert nn.gradcheck(lambda v: (nn.normalize_power(v, 0.5) * w).sum(), [x]) < 1e-4


def test_cross_entropy_gradient_and_label_checks(rng):
    logits = rng.normal(size=(2, 4, 3, 3))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    assert nn.gradcheck(lambda z: nn.loss_ce(z, labels), [logits]) < 1e-4
    with pytest.raises(nn.LabelError):
        nn.loss_ce(logits, np.full((2, 3, 3), 4))
    with pytest.raises(nn.LabelError):
        nn.loss_ce(logits, labels + 0.5)


def test_backward_accumulates_through_shared_inputs():
    store = nn.ParamStore()
    p = store.add("p", np.array([2.0]))
    loss = (p * p + p).sum()
    loss.backward()
    np.testing.assert_allclose(store.grads()["p"], [5.0])


def test_no_grad_builds_no_graph():
    store = nn.ParamStore()
    p = store.add("p", np.ones(3))
    with nn.no_grad():
        assert not nn.grad_enabled()
        y = (p * 2.0).sum()
    assert nn.grad_enabled()
    y.backward()
    assert np.all(store.grads()["p"] == 0)


def test_adam_rejects_non_finite_gradient_and_leaves_params():
    store = nn.ParamStore()
    store.add("p", np.ones(2))
    before = store.arrays()["p"].copy()
    with pytest.raises(nn.NonFiniteGradient):
        nn.adam_step(store, {"p": np.array([np.nan, 1.0])}, 1e-3)
    np.testing.assert_array_equal(store.arrays()["p"], before)


def test_adam_refuses_frozen_store():
    store = nn.ParamStore()
    store.add("p", np.ones(2))
    store.freeze()
    with pytest.raises(RuntimeError):
        nn.adam_step(store, {"p": np.ones(2)}, 1e-3)


def test_adam_moves_against_gradient():
    store = nn.ParamStore()
    store.add("p", np.zeros(3))
    nn.adam_step(store, {"p": np.array([1.0, -1.0, 0.0])}, 0.1)
    p = store.arrays()["p"]
    assert p[0] < 0 < p[1]
    assert p[2] == 0


def test_param_store_save_load_keeps_values_and_meta(tmp_path, rng):
    store = nn.ParamStore()
    nn.Dense(store, "fc", 3, 2, rng=rng)
    store.meta["beta"] = 0.25
    path = store.save(tmp_path / "w.slnn")

    other = nn.ParamStore()
    nn.Dense(other, "fc", 3, 2, rng=np.random.default_rng(99))
    other.load(path)
    for name, value in store.arrays().items():
        np.testing.assert_array_equal(other.arrays()[name], value)
    assert other.meta["beta"] == 0.25


def test_strict_load_rejects_mismatched_shapes(tmp_path, rng):
    store = nn.ParamStore()
    nn.Dense(store, "fc", 3, 2, rng=rng)
    path = store.save(tmp_path / "w.slnn")
    other = nn.ParamStore()
    nn.Dense(other, "fc", 4, 2, rng=rng)
    with pytest.raises(nn.ShapeError):
        other.load(path)


def test_check_finite_loss_raises_on_nan():
    with pytest.raises(nn.NonFiniteLoss):
        nn.check_finite_loss(nn.as_tensor(np.array(np.nan)), "unit")


def test_divergence_compares_last_epoch_with_first():
    nn.check_not_diverged([], "unit")
    nn.check_not_diverged([2.0, 3.0, 1.5], "unit")
    nn.check_not_diverged([1.0, 1.0], "unit")
    with pytest.raises(nn.TrainingDiverged, match="unit: final loss 1.5 above initial 1"):
        nn.check_not_diverged([1.0, 0.5, 1.5], "unit")


def test_minibatches_cover_every_index_once(rng):
    seen = np.concatenate(list(nn.minibatches(10, 3, rng)))
    assert sorted(seen.tolist()) == list(range(10))
