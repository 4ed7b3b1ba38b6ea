import math

import numpy as np
import pytest

from semlink.services.diffusion import (
    Denoiser,
    ScheduleError,
    cosine_schedule,
    forward_sample,
    sample,
    sampling_steps,
    train_denoiser,
)
from semlink.services.nn_core import ShapeError, UntrainedModel


class OracleEps:
    """Predicts the exact noise for a known clean sample."""

    def __init__(self, x0, schedule):
        self.x0, self.schedule = x0, schedule
        self.sample_shape = x0.shape

    def predict_eps(self, x_t, t, cond=None, injection=None):
        ab = self.schedule.alpha_bar[t].reshape((-1,) + (1,) * len(self.sample_shape))
        return (x_t - np.sqrt(ab) * self.x0) / np.sqrt(1.0 - ab)


def test_cosine_schedule_shape():
    s = cosine_schedule(100)
    assert s.T == 100
    assert s.alpha_bar[0] == pytest.approx(1.0, abs=1e-3)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta > 0) & (s.beta <= 0.999))
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1.0 - s.beta))


def test_schedule_needs_two_steps():
    with pytest.raises(ScheduleError):
        cosine_schedule(1)


def test_forward_variance_identity():
    schedule = cosine_schedule(100)
    rng = np.random.default_rng(0)
    x0 = 2.0 * rng.standard_normal((100_000, 1, 1, 1))
    for t in (5, 50, 95):
        x_t, _ = forward_sample(x0, np.full(len(x0), t), schedule, rng=rng)
        ab = schedule.alpha_bar[t]
        assert np.var(x_t) == pytest.approx(ab * 4.0 + (1.0 - ab), rel=0.02)


def test_forward_sample_at_step_zero_is_nearly_clean(rng):
    schedule = cosine_schedule(100)
    x0 = rng.standard_normal((4, 1, 2, 2))
    x_t, _ = forward_sample(x0, np.zeros(4, dtype=int), schedule, seed=1)
    assert np.max(np.abs(x_t - x0)) < 0.2


def test_forward_sample_is_reproducible(rng):
    schedule = cosine_schedule(50)
    x0 = rng.standard_normal((3, 1, 2, 2))
    a, _ = forward_sample(x0, np.array([1, 10, 40]), schedule, seed=9)
    b, _ = forward_sample(x0, np.array([1, 10, 40]), schedule, seed=9)
    np.testing.assert_array_equal(a, b)


def test_sampling_steps_stride_down_to_zero():
    steps = sampling_steps(100, 10)
    assert steps[0] == 99
    assert steps[-1] == 0
    assert len(steps) == 10
    assert np.all(np.diff(steps) < 0)
    with pytest.raises(ScheduleError):
        sampling_steps(100, 0)


@pytest.mark.parametrize("steps", [10, 20])
def test_oracle_predictor_recovers_the_clean_sample(steps, rng):
    schedule = cosine_schedule(20)
    x0 = rng.uniform(-1, 1, size=(1, 3, 3))
    out = sample(OracleEps(x0, schedule), None, schedule, steps, seed=0, n=2)
    np.testing.assert_allclose(out, np.broadcast_to(x0, out.shape), atol=1e-6)


def test_sampling_an_untrained_denoiser_is_refused():
    d = Denoiser((1, 4, 4), width=4, T=10)
    with pytest.raises(UntrainedModel):
        sample(d, None, cosine_schedule(10), 2, seed=0)


def test_untrained_denoiser_predicts_zero_noise(rng):
    d = Denoiser((2, 4, 4), cond_dim=3, width=4, T=10)
    eps = d.predict_eps(rng.standard_normal((2, 2, 4, 4)), np.array([0, 9]), rng.standard_normal((2, 3)))
    assert np.all(eps == 0)


def test_denoiser_rejects_flat_sample_shapes():
    with pytest.raises(ShapeError):
        Denoiser((16,), width=4)


def test_training_marks_trained_and_round_trips(tmp_path, rng):
    schedule = cosine_schedule(10)
    d = Denoiser((1, 4, 4), cond_dim=2, width=4, T=10, rng=rng)
    data = rng.standard_normal((16, 1, 4, 4))
    conds = rng.standard_normal((16, 2))
    history = train_denoiser(d, data, conds, schedule, 2, 8, 1e-3, seed=3)
    assert len(history) == 2
    assert all(math.isfinite(h) for h in history)
    assert d.trained

    back = Denoiser.load(d.save(tmp_path / "d.slnn"), (1, 4, 4))
    assert back.trained
    x = rng.standard_normal((1, 1, 4, 4))
    np.testing.assert_allclose(back.predict_eps(x, np.array([3]), conds[:1]),
                               d.predict_eps(x, np.array([3]), conds[:1]))
    out = sample(back, conds[0], schedule, 4, seed=0, n=3)
    assert out.shape == (3, 1, 4, 4)
