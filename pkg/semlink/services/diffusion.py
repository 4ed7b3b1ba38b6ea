"""Denoising diffusion: cosine schedule, closed-form corruption, eps-prediction training, sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from semlink.core.logging import log_epoch
from semlink.services.nn_core import (
    Conv2d,
    Dense,
    ParamStore,
    ShapeError,
    Tensor,
    UntrainedModel,
    adam_step,
    check_finite_loss,
    loss_mse,
    minibatches,
    no_grad,
    relu,
)

log = logging.getLogger(__name__)

TIME_FEATURES = 16


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    def check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ScheduleError(f"timestep outside [0, {self.T}): {t.min()}..{t.max()}")
        return t.astype(np.int64)


def cosine_schedule(T: int = 100, s: float = 0.008) -> NoiseSchedule:
    """Index i maps to continuous time i/(T-1); betas are clipped to [1e-8, 0.999]."""
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    u = np.arange(T) / (T - 1)
    f = np.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2
    ab_raw = f / f[0]
    prev = np.concatenate([[1.0], ab_raw[:-1]])
    beta = np.clip(1.0 - ab_raw / prev, 1e-8, 0.999)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def forward_sample(x0: np.ndarray, t, schedule: NoiseSchedule, seed: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps. ``t`` is a scalar or one step per batch row."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = schedule.check_step(t)
    rng = rng if rng is not None else np.random.default_rng(seed)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def time_features(t: np.ndarray, T: int, dim: int = TIME_FEATURES) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = (np.asarray(t, dtype=np.float64).reshape(-1, 1) / T * 1000.0) * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class EpsPredictor(Protocol):
    sample_shape: Tuple[int, ...]

    def predict_eps(self, x_t: np.ndarray, t: np.ndarray, cond: Optional[np.ndarray] = None,
                    injection: Optional[np.ndarray] = None) -> np.ndarray:
        ...


class Denoiser:
    """Conditional eps-predictor: conv in, two residual convs, zero-init conv out.

    Time and condition embeddings are added per channel after the input conv;
    an optional spatial ``injection`` of shape [N][width][H][W] is added after
    the input conv and after the first residual block.
    """

    def __init__(self, sample_shape: Sequence[int], cond_dim: int = 0, width: int = 32,
                 T: int = 100, rng: Optional[np.random.Generator] = None, store: Optional[ParamStore] = None):
        if len(sample_shape) != 3:
            raise ShapeError(f"sample_shape must be [C][H][W], got {tuple(sample_shape)}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sample_shape = tuple(int(s) for s in sample_shape)
        self.cond_dim, self.width, self.T = int(cond_dim), int(width), int(T)
        self.store = store if store is not None else ParamStore()
        c = self.sample_shape[0]
        self.conv_in = Conv2d(self.store, "conv_in", c, width, 3, rng=rng)
        self.time = Dense(self.store, "time", TIME_FEATURES, width, rng=rng)
        self.cond = Dense(self.store, "cond", cond_dim, width, rng=rng) if cond_dim else None
        self.block1 = Conv2d(self.store, "block1", width, width, 3, rng=rng)
        self.block2 = Conv2d(self.store, "block2", width, width, 3, rng=rng)
        self.conv_out = Conv2d(self.store, "conv_out", width, c, 3, init="zero")
        self.store.meta.update({"trained": 0.0, "cond_dim": float(cond_dim), "width": float(width), "T": float(T)})

    @property
    def trained(self) -> bool:
        return bool(self.store.meta.get("trained", 0.0))

    def mark_trained(self) -> None:
        self.store.meta["trained"] = 1.0

    def _check(self, x: Tensor, cond: Optional[np.ndarray]) -> None:
        if tuple(x.shape[1:]) != self.sample_shape:
            raise ShapeError(f"denoiser expects samples {self.sample_shape}, got {tuple(x.shape[1:])}")
        if self.cond is not None:
            if cond is None or np.shape(cond) != (x.shape[0], self.cond_dim):
                raise ShapeError(f"denoiser expects condition [{x.shape[0]}][{self.cond_dim}], "
                                 f"got {None if cond is None else np.shape(cond)}")

    def __call__(self, x_t, t: np.ndarray, cond: Optional[np.ndarray] = None, injection=None,
                 cond_mask: Optional[np.ndarray] = None) -> Tensor:
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        self._check(x, cond)
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        emb = self.time(time_features(t, self.T))
        if self.cond is not None:
            c = self.cond(np.asarray(cond, dtype=np.float64))
            if cond_mask is not None:
                c = c * np.asarray(cond_mask, dtype=np.float64).reshape(n, 1)
            emb = emb + c
        h = self.conv_in(x) + emb.reshape(n, self.width, 1, 1)
        if injection is not None:
            h = h + injection
        h = relu(h)
        h = h + relu(self.block1(h))
        if injection is not None:
            h = h + injection
        h = h + relu(self.block2(h))
        return self.conv_out(h)

    @no_grad()
    def predict_eps(self, x_t: np.ndarray, t: np.ndarray, cond: Optional[np.ndarray] = None,
                    injection: Optional[np.ndarray] = None) -> np.ndarray:
        return self(x_t, t, cond, injection).data

    def save(self, path: Path) -> Path:
        return self.store.save(path)

    @classmethod
    def load(cls, path: Path, sample_shape: Sequence[int]) -> "Denoiser":
        store = ParamStore().load(path, strict=False)
        meta = dict(store.meta)
        model = cls(sample_shape, int(meta.get("cond_dim", 0)), int(meta.get("width", 32)), int(meta.get("T", 100)))
        model.store.load(path)
        return model


def train_step(denoiser: Denoiser, x0: np.ndarray, cond: Optional[np.ndarray], schedule: NoiseSchedule,
               seed: Optional[int] = None, lr: float = 1e-4, rng: Optional[np.random.Generator] = None,
               store: Optional[ParamStore] = None, injection_fn=None) -> float:
    """One Adam step on E||eps - eps_theta(x_t, t; cond)||^2; returns the batch loss.

    ``store`` selects which parameters move (the denoiser's own by default);
    ``injection_fn`` maps the batch to a spatial injection tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    t = rng.integers(0, schedule.T, size=len(x0))
    x_t, eps = forward_sample(x0, t, schedule, rng=rng)
    store = store if store is not None else denoiser.store
    store.zero_grad()
    injection = injection_fn() if injection_fn is not None else None
    loss = loss_mse(denoiser(x_t, t, cond, injection), eps)
    value = check_finite_loss(loss, "diffusion.train_step")
    loss.backward()
    adam_step(store, store.grads(), lr)
    return value


def train_denoiser(denoiser: Denoiser, data: np.ndarray, conds: Optional[np.ndarray], schedule: NoiseSchedule,
                   epochs: int, batch_size: int, lr: float, seed: int, component: str = "denoiser") -> List[float]:
    """Epoch loop over ``data``; marks the denoiser trained and returns mean loss per epoch."""
    if len(data) == 0:
        raise ValueError(f"{component}: empty training set")
    rng = np.random.default_rng(seed)
    history: List[float] = []
    for epoch in range(epochs):
        losses = []
        for idx in minibatches(len(data), batch_size, rng):
            c = conds[idx] if conds is not None else None
            losses.append(train_step(denoiser, data[idx], c, schedule, lr=lr, rng=rng))
        history.append(float(np.mean(losses)))
        log_epoch(log, component, epoch, loss=history[-1])
    denoiser.mark_trained()
    return history


def sampling_steps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps must lie in [1, {T}], got {steps}")
    return np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(np.int64))[::-1]


def _x0_from_eps(x: np.ndarray, eps: np.ndarray, ab: float) -> np.ndarray:
    return (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def sample(denoiser: EpsPredictor, condition: Optional[np.ndarray], schedule: NoiseSchedule, steps: int,
           seed: Optional[int] = None, n: int = 1, injection: Optional[np.ndarray] = None,
           clip_x0: Optional[Tuple[float, float]] = None, x_T: Optional[np.ndarray] = None,
           require_trained: bool = True) -> np.ndarray:
    """Reverse process from pure noise.

    ``steps == T`` runs ancestral DDPM; fewer steps run deterministic DDIM
    over evenly strided timesteps. ``clip_x0`` bounds the predicted clean
    sample at each step and re-derives eps from it.
    """
    if require_trained and isinstance(denoiser, Denoiser) and not denoiser.trained:
        raise UntrainedModel("sampling from an untrained denoiser")
    rng = np.random.default_rng(seed)
    x = np.asarray(x_T, dtype=np.float64) if x_T is not None else rng.standard_normal((n,) + denoiser.sample_shape)
    n = len(x)
    cond = None
    if condition is not None:
        cond = np.asarray(condition, dtype=np.float64)
        cond = np.broadcast_to(cond, (n, cond.shape[-1])) if cond.ndim == 1 else cond
    ts = sampling_steps(schedule.T, steps)
    ab = schedule.alpha_bar
    ancestral = steps == schedule.T

    for i, t in enumerate(ts):
        eps = denoiser.predict_eps(x, np.full(n, t), cond, injection)
        x0 = _x0_from_eps(x, eps, ab[t])
        if clip_x0 is not None:
            x0 = np.clip(x0, *clip_x0)
            eps = (x - math.sqrt(ab[t]) * x0) / math.sqrt(1.0 - ab[t])
        if i == len(ts) - 1:
            return x0
        t_next = ts[i + 1]
        if ancestral:
            ab_prev = ab[t_next]
            beta = schedule.beta[t]
            mean = (math.sqrt(ab_prev) * beta / (1.0 - ab[t])) * x0 \
                + (math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab[t])) * x
            var = beta * (1.0 - ab_prev) / (1.0 - ab[t])
            x = mean + math.sqrt(var) * rng.standard_normal(x.shape)
        else:
            x = math.sqrt(ab[t_next]) * x0 + math.sqrt(1.0 - ab[t_next]) * eps
    return x
