"""Synthetic scenes and the semantic/compressed feature codecs.

A scene is an S x S RGB image with 2-5 coloured shapes and an exact class
map. The segmentation branch encodes the S/4 class map, the compression
branch the S/8 image; both emit 16-QAM symbols through a straight-through
quantizer. ``JsccCodec`` is the end-to-end image baseline.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from semlink.core.config import CodecConfig
from semlink.core.logging import log_epoch
from semlink.services.nn_core import (
    Conv2d,
    Function,
    ParamStore,
    ShapeError,
    Tensor,
    adam_step,
    check_finite_loss,
    loss_ce,
    loss_mse,
    minibatches,
    no_grad,
    normalize_power,
    relu,
    sigmoid,
    upsample_nearest,
)
from semlink.storage.containers import SceneRecord, read_scene_dataset, write_scene_dataset

log = logging.getLogger(__name__)

N_CLASSES = 4  # background, rectangle, disc, triangle
LATENT_CHANNELS = 16
LEVELS = np.array([-3.0, -1.0, 1.0, 3.0]) / math.sqrt(10.0)
THRESHOLDS = np.array([0.25, 0.5, 0.75])
CONSTELLATION = (LEVELS[:, None] + 1j * LEVELS[None, :]).reshape(-1)

PROTOTYPES = np.array([
    [0.85, 0.20, 0.20],  # rectangle
    [0.20, 0.80, 0.30],  # disc
    [0.20, 0.35, 0.90],  # triangle
])
BACKGROUND = np.array([0.45, 0.45, 0.42])
COLOR_JITTER = 0.08
SEGMENT_RADIUS = 0.25


# ---- scenes ------------------------------------------------------------------

@dataclass
class Scene:
    image: np.ndarray  # [3][S][S] in [0, 1]
    seg: np.ndarray  # [S/4][S/4] class ids
    objects: List[Tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.image.shape[-1]

    def low_res(self) -> np.ndarray:
        return resample_image(self.image, self.size // 8)


def resample_image(image: np.ndarray, size: int) -> np.ndarray:
    """Area-mean downsampling of [..., H, W] to [..., size, size]; H must be a multiple of size."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if h % size or w % size:
        raise ShapeError(f"cannot area-resample {h}x{w} to {size}x{size}")
    fh, fw = h // size, w // size
    return image.reshape(image.shape[:-2] + (size, fh, size, fw)).mean(axis=(-3, -1))


def one_hot(labels: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """[..., H, W] class ids to [..., C, H, W]."""
    labels = np.asarray(labels, dtype=np.int64)
    return np.moveaxis(np.eye(n_classes)[labels], -1, -3)


def resample_labels(labels: np.ndarray, size: int, n_classes: int = N_CLASSES) -> np.ndarray:
    """Majority class per block; ties go to the lower class id."""
    return np.argmax(resample_image(one_hot(labels, n_classes), size), axis=-3)


def _draw_mask(kind: int, size: int, cx: float, cy: float, r: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if kind == 0:
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= 0.7 * r)
    if kind == 1:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    # upright triangle with apex at (cx, cy - r)
    top, bottom = cy - r, cy + r
    frac = np.clip((yy - top) / (bottom - top), 0.0, 1.0)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * r)


def generate_scene(seed: int, size: int = 64) -> Scene:
    if size % 8:
        raise ShapeError(f"scene size must be a multiple of 8, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    texture = gaussian_filter(rng.normal(size=(3, size, size)), sigma=(0, 2, 2)) * 0.15
    image = BACKGROUND[:, None, None] + texture
    labels = np.zeros((size, size), dtype=np.int64)
    objects = []
    scale = size / 64.0
    for _ in range(int(rng.integers(2, 6))):
        kind = int(rng.integers(0, 3))
        cx, cy = rng.uniform(8 * scale, size - 8 * scale, size=2)
        r = rng.uniform(6 * scale, 14 * scale)
        mask = _draw_mask(kind, size, cx, cy, r, yy, xx)
        color = np.clip(PROTOTYPES[kind] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3), 0.0, 1.0)
        image[:, mask] = color[:, None] + 0.3 * texture[:, mask]
        labels[mask] = kind + 1
        objects.append((kind, kind + 1, float(cx), float(cy), float(r)))
    return Scene(np.clip(image, 0.0, 1.0), resample_labels(labels, size // 4), objects)


def generate_scenes(n: int, seed: int, size: int = 64) -> List[Scene]:
    seeds = np.random.default_rng(seed).integers(0, 2 ** 63 - 1, size=n)
    return [generate_scene(int(s), size) for s in seeds]


def segment_by_color(image: np.ndarray, seg_size: Optional[int] = None) -> np.ndarray:
    """Nearest shape prototype within SEGMENT_RADIUS, else background; resampled to ``seg_size``."""
    image = np.asarray(image, dtype=np.float64)
    dist = np.linalg.norm(image[None, :, :, :] - PROTOTYPES[:, :, None, None], axis=1)
    nearest = np.argmin(dist, axis=0)
    labels = np.where(np.min(dist, axis=0) <= SEGMENT_RADIUS, nearest + 1, 0)
    seg_size = seg_size or image.shape[-1] // 4
    return resample_labels(labels, seg_size)


def save_scenes(path: Path, scenes: Sequence[Scene]) -> Path:
    records = [SceneRecord(s.image, s.seg, list(s.objects)) for s in scenes]
    return write_scene_dataset(path, records, N_CLASSES)


def load_scenes(path: Path) -> List[Scene]:
    records, _ = read_scene_dataset(path)
    return [Scene(r.image, r.seg, [tuple(o) for o in r.objects]) for r in records]


# ---- quantizer and real/complex packing -------------------------------------

class Quantize(Function):
    """sigmoid + hard decision onto the 16-QAM amplitudes; straight-through backward."""

    def forward(self, x):
        return LEVELS[np.digitize(expit(x), THRESHOLDS)]

    def backward(self, grad):
        return grad


def quantize(x) -> Tensor:
    return Quantize()(x)


def r2c(v: np.ndarray) -> np.ndarray:
    """Interleaved pairs (v[2i], v[2i+1]) -> v[2i] + j v[2i+1] along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] % 2:
        raise ShapeError(f"r2c needs an even length, got {v.shape[-1]}")
    return v[..., 0::2] + 1j * v[..., 1::2]


def c2r(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c)
    out = np.empty(c.shape[:-1] + (2 * c.shape[-1],))
    out[..., 0::2] = c.real
    out[..., 1::2] = c.imag
    return out


def awgn_real(x: np.ndarray, snr_db: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Adds per-row noise to real-packed unit-power symbols at the given SNR (per complex symbol)."""
    snr = 10.0 ** (np.asarray(snr_db, dtype=np.float64).reshape((-1,) + (1,) * (x.ndim - 1)) / 10.0)
    return x + np.sqrt(0.5 / snr) * rng.standard_normal(x.shape)


# ---- codecs ------------------------------------------------------------------

class SemanticCodec:
    """Segmentation and compressed-image encoder/decoder pairs sharing one parameter store."""

    def __init__(self, image_size: int = 64, rng: Optional[np.random.Generator] = None,
                 store: Optional[ParamStore] = None):
        if image_size % 8:
            raise ShapeError(f"image size must be a multiple of 8, got {image_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.image_size = image_size
        self.seg_size = image_size // 4
        self.co_size = image_size // 8
        self.latent_side = image_size // 8
        self.store = store if store is not None else ParamStore()
        s = self.store
        self.se_enc = [Conv2d(s, "se_enc.0", N_CLASSES, 32, 5, stride=2, rng=rng),
                       Conv2d(s, "se_enc.1", 32, 64, 5, rng=rng),
                       Conv2d(s, "se_enc.2", 64, LATENT_CHANNELS, 5, rng=rng)]
        self.co_enc = [Conv2d(s, "co_enc.0", 3, 32, 5, rng=rng),
                       Conv2d(s, "co_enc.1", 32, 64, 5, rng=rng),
                       Conv2d(s, "co_enc.2", 64, LATENT_CHANNELS, 5, rng=rng)]
        self.se_dec = [Conv2d(s, "se_dec.0", LATENT_CHANNELS, 64, 3, rng=rng),
                       Conv2d(s, "se_dec.1", 64, 32, 3, rng=rng),
                       Conv2d(s, "se_dec.2", 32, N_CLASSES, 3, rng=rng)]
        self.co_dec = [Conv2d(s, "co_dec.0", LATENT_CHANNELS, 64, 3, rng=rng),
                       Conv2d(s, "co_dec.1", 64, 32, 3, rng=rng),
                       Conv2d(s, "co_dec.2", 32, 3, 3, rng=rng)]
        s.meta.update({"image_size": float(image_size), "trained": 0.0})

    @property
    def n_reals(self) -> int:
        return LATENT_CHANNELS * self.latent_side ** 2

    @property
    def n_symbols(self) -> int:
        return self.n_reals // 2

    @property
    def trained(self) -> bool:
        return bool(self.store.meta.get("trained", 0.0))

    # differentiable paths, batch-first
    @staticmethod
    def _stack(layers, x):
        for layer in layers[:-1]:
            x = relu(layer(x))
        return layers[-1](x)

    def se_latent(self, seg: np.ndarray) -> Tensor:
        seg = np.asarray(seg)
        if seg.shape[-2:] != (self.seg_size, self.seg_size):
            raise ShapeError(f"encode_se expects [{self.seg_size}][{self.seg_size}] maps, got {seg.shape}")
        z = self._stack(self.se_enc, one_hot(seg.reshape((-1,) + seg.shape[-2:])))
        return quantize(z.reshape(z.shape[0], -1))

    def co_latent(self, low_res: np.ndarray) -> Tensor:
        x = np.asarray(low_res, dtype=np.float64)
        if x.shape[-3:] != (3, self.co_size, self.co_size):
            raise ShapeError(f"encode_co expects [3][{self.co_size}][{self.co_size}] images, got {x.shape}")
        z = self._stack(self.co_enc, x.reshape((-1,) + x.shape[-3:]))
        return quantize(z.reshape(z.shape[0], -1))

    def _latent_map(self, reals) -> Tensor:
        reals = reals if isinstance(reals, Tensor) else Tensor(reals)
        if reals.shape[-1] != self.n_reals:
            raise ShapeError(f"decoder expects {self.n_reals} reals ({self.n_symbols} symbols), got {reals.shape[-1]}")
        return reals.reshape(-1, LATENT_CHANNELS, self.latent_side, self.latent_side)

    def se_logits(self, reals) -> Tensor:
        h = relu(self.se_dec[0](self._latent_map(reals)))
        h = upsample_nearest(h, self.seg_size // self.latent_side)
        h = relu(self.se_dec[1](h))
        return self.se_dec[2](h)

    def co_image(self, reals) -> Tensor:
        return self._stack(self.co_dec, self._latent_map(reals))

    # inference API, single item or batch
    @staticmethod
    def _unbatch(x: np.ndarray, batched: bool) -> np.ndarray:
        return x if batched else x[0]

    @no_grad()
    def encode_se(self, seg: np.ndarray) -> np.ndarray:
        return self._unbatch(r2c(self.se_latent(seg).data), np.ndim(seg) == 3)

    @no_grad()
    def encode_co(self, low_res: np.ndarray) -> np.ndarray:
        return self._unbatch(r2c(self.co_latent(low_res).data), np.ndim(low_res) == 4)

    @no_grad()
    def decode_se(self, f_se: np.ndarray) -> np.ndarray:
        f = np.asarray(f_se)
        return self._unbatch(self.se_logits(c2r(np.atleast_2d(f))).data, f.ndim == 2)

    @no_grad()
    def decode_co(self, f_co: np.ndarray) -> np.ndarray:
        f = np.asarray(f_co)
        out = np.clip(self.co_image(c2r(np.atleast_2d(f))).data, 0.0, 1.0)
        return self._unbatch(out, f.ndim == 2)

    def save(self, path: Path) -> Path:
        return self.store.save(path)

    @classmethod
    def load(cls, path: Path) -> "SemanticCodec":
        header = ParamStore().load(path, strict=False)
        codec = cls(int(header.meta.get("image_size", 64)))
        codec.store.load(path)
        codec.store.freeze()
        return codec


def _noisy(reals: Tensor, snr_range: Optional[Tuple[float, float]], rng: np.random.Generator) -> Tensor:
    if snr_range is None:
        return reals
    snr = rng.uniform(*snr_range, size=reals.shape[0])
    return reals + (awgn_real(np.zeros(reals.shape), snr, rng))


def train_codecs(scenes: Sequence[Scene], config: CodecConfig, seed: int,
                 codec: Optional[SemanticCodec] = None) -> Tuple[SemanticCodec, Dict[str, List[float]]]:
    """Cross-entropy on the segmentation pair plus MSE on the compression pair, through the quantizer."""
    if len(scenes) < config.min_scenes:
        raise ValueError(f"train_codecs needs at least {config.min_scenes} scenes, got {len(scenes)}")
    rng = np.random.default_rng(seed)
    codec = codec or SemanticCodec(config.image_size, rng=np.random.default_rng(rng.integers(2 ** 63)))
    segs = np.stack([s.seg for s in scenes])
    lows = np.stack([s.low_res() for s in scenes])
    history: Dict[str, List[float]] = {"ce": [], "mse": []}
    for epoch in range(config.epochs):
        ce_sum, mse_sum, batches = 0.0, 0.0, 0
        for idx in minibatches(len(scenes), config.batch_size, rng):
            codec.store.zero_grad()
            ce = loss_ce(codec.se_logits(_noisy(codec.se_latent(segs[idx]), config.noise_snr_db, rng)), segs[idx])
            mse = loss_mse(codec.co_image(_noisy(codec.co_latent(lows[idx]), config.noise_snr_db, rng)), lows[idx])
            total = ce + mse
            check_finite_loss(total, "train_codecs")
            total.backward()
            adam_step(codec.store, codec.store.grads(), config.lr)
            ce_sum += float(ce.data)
            mse_sum += float(mse.data)
            batches += 1
        history["ce"].append(ce_sum / batches)
        history["mse"].append(mse_sum / batches)
        log_epoch(log, "codecs", epoch, ce=history["ce"][-1], mse=history["mse"][-1])
    codec.store.meta["trained"] = 1.0
    codec.store.freeze()
    return codec, history


def seg_accuracy(codec: SemanticCodec, scenes: Sequence[Scene]) -> float:
    segs = np.stack([s.seg for s in scenes])
    pred = np.argmax(codec.decode_se(codec.encode_se(segs)), axis=1)
    return float(np.mean(pred == segs))


# ---- JSCC baseline -----------------------------------------------------------

class JsccCodec:
    """Image -> unit-power complex symbols -> image, trained through AWGN."""

    def __init__(self, image_size: int = 64, rng: Optional[np.random.Generator] = None,
                 store: Optional[ParamStore] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.image_size = image_size
        self.side = image_size // 2
        self.store = store if store is not None else ParamStore()
        s = self.store
        self.enc = [Conv2d(s, "enc.0", 3, 16, 5, stride=2, rng=rng), Conv2d(s, "enc.1", 16, 8, 5, rng=rng)]
        self.dec = [Conv2d(s, "dec.0", 8, 16, 3, rng=rng), Conv2d(s, "dec.1", 16, 16, 3, rng=rng),
                    Conv2d(s, "dec.2", 16, 3, 3, rng=rng)]
        s.meta.update({"image_size": float(image_size), "trained": 0.0})

    @property
    def n_symbols(self) -> int:
        return 8 * self.side ** 2 // 2

    @property
    def trained(self) -> bool:
        return bool(self.store.meta.get("trained", 0.0))

    def encode_reals(self, images: np.ndarray) -> Tensor:
        x = np.asarray(images, dtype=np.float64).reshape(-1, 3, self.image_size, self.image_size)
        z = self.enc[1](relu(self.enc[0](x)))
        return normalize_power(z.reshape(z.shape[0], -1), 0.5)

    def decode_reals(self, reals) -> Tensor:
        reals = reals if isinstance(reals, Tensor) else Tensor(reals)
        h = relu(self.dec[0](reals.reshape(-1, 8, self.side, self.side)))
        h = upsample_nearest(h, 2)
        h = relu(self.dec[1](h))
        return sigmoid(self.dec[2](h))

    @no_grad()
    def encode(self, image: np.ndarray) -> np.ndarray:
        out = r2c(self.encode_reals(image).data)
        return out if np.ndim(image) == 4 else out[0]

    @no_grad()
    def decode(self, symbols: np.ndarray) -> np.ndarray:
        f = np.asarray(symbols)
        if f.shape[-1] != self.n_symbols:
            raise ShapeError(f"jscc decoder expects {self.n_symbols} symbols, got {f.shape[-1]}")
        out = self.decode_reals(c2r(np.atleast_2d(f))).data
        return out if f.ndim == 2 else out[0]

    def save(self, path: Path) -> Path:
        return self.store.save(path)

    @classmethod
    def load(cls, path: Path) -> "JsccCodec":
        header = ParamStore().load(path, strict=False)
        codec = cls(int(header.meta.get("image_size", 64)))
        codec.store.load(path)
        codec.store.freeze()
        return codec


def train_jscc(scenes: Sequence[Scene], config: CodecConfig, seed: int) -> Tuple[JsccCodec, List[float]]:
    if not scenes:
        raise ValueError("train_jscc: empty scene set")
    rng = np.random.default_rng(seed)
    codec = JsccCodec(config.image_size, rng=np.random.default_rng(rng.integers(2 ** 63)))
    images = np.stack([s.image for s in scenes])
    history: List[float] = []
    for epoch in range(config.jscc_epochs):
        losses = []
        for idx in minibatches(len(images), config.batch_size, rng):
            codec.store.zero_grad()
            reals = codec.encode_reals(images[idx])
            noisy = reals + awgn_real(np.zeros(reals.shape), rng.uniform(*config.jscc_snr_db, size=len(idx)), rng)
            loss = loss_mse(codec.decode_reals(noisy), images[idx])
            losses.append(check_finite_loss(loss, "train_jscc"))
            loss.backward()
            adam_step(codec.store, codec.store.grads(), config.lr)
        history.append(float(np.mean(losses)))
        log_epoch(log, "jscc", epoch, loss=history[-1])
    codec.store.meta["trained"] = 1.0
    codec.store.freeze()
    return codec, history
