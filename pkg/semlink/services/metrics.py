"""Image and segmentation quality metrics.

Perceptual distance and FID use a seeded, never-trained conv feature
extractor in place of pretrained backbones, so absolute values only
compare within this package.
"""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import eigh

from semlink.services.nn_core import ShapeError, conv2d, no_grad, relu

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FID_SHRINKAGE = 1e-6


class MetricError(ValueError):
    pass


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ {a.shape} vs {b.shape}")
    return a, b


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all stride-1 ``window`` x ``window`` windows, averaged over channels; data in [0, 1]."""
    a, b = _same_shape(a, b, "ssim")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ShapeError(f"ssim: image {a.shape[-2:]} smaller than the {window}x{window} window")
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


class FeatureExtractor:
    """Three stride-2 3x3 convs (3 -> 8 -> 16 -> 16) with He weights drawn from ``seed``."""

    channels: Tuple[int, ...] = (3, 8, 16, 16)

    def __init__(self, seed: int = 7, layer_weights: Sequence[float] = (1 / 3, 1 / 3, 1 / 3)):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.layer_weights = tuple(float(w) for w in layer_weights)
        self.weights: List[np.ndarray] = []
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3)))

    @property
    def dim(self) -> int:
        return int(sum(self.channels[1:]))

    @no_grad()
    def layers(self, images: np.ndarray) -> List[np.ndarray]:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        out = []
        for w in self.weights:
            x = relu(conv2d(x, w, stride=2)).data
            out.append(x)
        return out

    def pooled(self, images: np.ndarray) -> np.ndarray:
        """Global-average-pooled activations of every layer, concatenated: [N][dim]."""
        return np.concatenate([f.mean(axis=(2, 3)) for f in self.layers(images)], axis=1)


def perceptual(a: np.ndarray, b: np.ndarray, fx: FeatureExtractor) -> float:
    a, b = _same_shape(a, b, "perceptual")
    fa, fb = fx.layers(a), fx.layers(b)
    return float(sum(w * np.mean((x - y) ** 2) for w, x, y in zip(fx.layer_weights, fa, fb)))


def sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; negative round-off eigenvalues are clipped."""
    vals, vecs = eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_r: np.ndarray, cov_r: np.ndarray, mu_g: np.ndarray, cov_g: np.ndarray) -> float:
    root_r = sqrt_psd(cov_r)
    middle = sqrt_psd(root_r @ cov_g @ root_r)
    diff = mu_r - mu_g
    value = float(diff @ diff + np.trace(cov_r) + np.trace(cov_g) - 2.0 * np.trace(middle))
    return max(value, 0.0)


def feature_statistics(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise MetricError("fid: empty feature set")
    mu = f.mean(axis=0)
    cov = np.cov(f, rowvar=False) if len(f) > 1 else np.zeros((f.shape[1], f.shape[1]))
    cov = np.atleast_2d(cov)
    if len(f) <= f.shape[1]:
        cov = cov + FID_SHRINKAGE * np.eye(f.shape[1])
    return mu, cov


def fid_from_features(real: np.ndarray, generated: np.ndarray) -> float:
    mu_r, cov_r = feature_statistics(real)
    mu_g, cov_g = feature_statistics(generated)
    return frechet_distance(mu_r, cov_r, mu_g, cov_g)


def fid(set_r: np.ndarray, set_g: np.ndarray, fx: FeatureExtractor) -> float:
    if len(set_r) == 0 or len(set_g) == 0:
        raise MetricError("fid: empty image set")
    return fid_from_features(fx.pooled(np.asarray(set_r)), fx.pooled(np.asarray(set_g)))


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Per-class IoU, averaged with weights proportional to each class's pixel count in ``truth``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"iou: shapes differ {pred.shape} vs {truth.shape}")
    if truth.size == 0:
        raise MetricError("iou: empty maps")
    classes, counts = np.unique(truth, return_counts=True)
    total = 0.0
    for c, n in zip(classes, counts):
        p, t = pred == c, truth == c
        total += n * np.logical_and(p, t).sum() / np.logical_or(p, t).sum()
    return float(total / truth.size)
