"""Scene -> features -> precoding -> channel -> estimation -> decoding -> reconstruction, per variant.

Precoding and combining use the SVD of the *estimated* channel while the
signal propagates through the true one, so estimation error shows up as
inter-stream leakage.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from semlink.services.adaptive_precode import PrecodeModel, decode_forward, precode_forward
from semlink.services.cekm import KnowledgeMap, estimate, nmse
from semlink.services.channel import DEFAULT_NUMEROLOGY, ChannelTensor, Numerology, UserState
from semlink.services.metrics import FeatureExtractor, iou, perceptual, ssim
from semlink.services.nn_core import require_trained
from semlink.services.ofdm_link import (
    PilotLayout,
    SvdTriple,
    combine,
    demap_streams,
    equalize,
    frame_noise_variance,
    interpolate_ls,
    ls_estimate,
    map_streams,
    precode,
    propagate,
    svd_decompose,
    transmit_pilots,
)
from semlink.services.recon_diffusion import SceneReconstructor, reconstruct
from semlink.services.semantic_codec import JsccCodec, Scene, SemanticCodec, segment_by_color

log = logging.getLogger(__name__)

POLICY_KIND = {"cekm-pv": "pv", "cekm-ls": "ls"}


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage, self.cause = stage, cause


class _stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageFailed):
            raise StageFailed(self.name, exc) from exc
        return False


@dataclass
class LinkContext:
    numerology: Numerology = DEFAULT_NUMEROLOGY
    layout: PilotLayout = field(default_factory=PilotLayout)
    pilot_value: complex = 1.0


@dataclass
class Models:
    codec: Optional[SemanticCodec] = None
    jscc: Optional[JsccCodec] = None
    recon: Optional[SceneReconstructor] = None
    precode: Dict[float, PrecodeModel] = field(default_factory=dict)
    maps: Dict[str, KnowledgeMap] = field(default_factory=dict)
    features: FeatureExtractor = field(default_factory=FeatureExtractor)
    recon_steps: int = 10


@dataclass
class Outcome:
    image: np.ndarray
    seg: np.ndarray
    nmse_db: float
    f_se: Optional[np.ndarray] = None
    f_co: Optional[np.ndarray] = None


def estimate_channel(h: ChannelTensor, user: UserState, policy: str, models: Models, link: LinkContext,
                     snr_db: float, rng: np.random.Generator) -> ChannelTensor:
    """CSI available at both ends under ``policy``; LS pilots are sent at the data SNR."""
    if policy == "true-channel":
        return h
    if policy == "ls-interp":
        ls = ls_estimate(transmit_pilots(h, link.layout, link.pilot_value, snr_db, rng=rng), link.layout,
                         link.pilot_value)
        return ChannelTensor(interpolate_ls(ls, link.layout))
    if policy == "mixed":
        kmap = next(iter(models.maps.values()), None)
        if kmap is None:
            raise KeyError("no knowledge map loaded for the mixed fallback")
        entry = kmap.fallback
    else:
        kind = POLICY_KIND.get(policy, "true" if policy == "cekm-true" else None)
        if kind is None or kind not in models.maps:
            raise KeyError(f"no knowledge map for policy {policy!r}")
        entry = models.maps[kind].select(user)
    ls = ls_estimate(transmit_pilots(h, link.layout, link.pilot_value, snr_db, rng=rng), link.layout, link.pilot_value)
    return estimate(entry.estimator, ls)


def _send(frames: np.ndarray, h: ChannelTensor, svd_est: SvdTriple, snr_db: float,
          rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Frames precoded with the estimated V through the true channel; noise set by the true channel's SNR."""
    noise_var = frame_noise_variance(h, svd_est, snr_db)
    return propagate(precode(frames, svd_est), h, noise_var, rng=rng), noise_var


def run_link(scene: Scene, h: ChannelTensor, user: UserState, variant: str, policy: str, snr_db: float,
             models: Models, link: LinkContext, seed: int, beta: float = 1.0) -> Outcome:
    rng = np.random.default_rng(seed)
    with _stage("estimate"):
        h_est = estimate_channel(h, user, policy, models, link, snr_db, rng)
        err_db = nmse(h, h_est)
        svd_est = svd_decompose(h_est)

    if variant == "jscc-baseline":
        with _stage("encode"):
            require_trained(models.jscc, "JSCC codec")
            symbols = models.jscc.encode(scene.image)
        with _stage("channel"):
            frames = map_streams(symbols, np.empty(0, dtype=np.complex128), "semantic", link.numerology)
            y, noise_var = _send(frames, h, svd_est, snr_db, rng)
        with _stage("decode"):
            received, _ = demap_streams(equalize(combine(y, svd_est), svd_est, noise_var), symbols.size, 0)
            image = models.jscc.decode(received)
        with _stage("metrics"):
            seg = segment_by_color(image, scene.seg.shape[-1])
        return Outcome(image, seg, err_db)

    codec = models.codec
    with _stage("encode"):
        require_trained(codec, "semantic codec")
        f_se = codec.encode_se(scene.seg)
        f_co = codec.encode_co(scene.low_res())

    with _stage("channel"):
        if variant == "proposed-adaptive":
            model = models.precode.get(beta)
            if model is None:
                raise KeyError(f"no adaptive precoder trained for beta={beta:g}")
            tx = precode_forward(f_se, f_co, model, svd_est, link.numerology)
            noise_var = frame_noise_variance(h, svd_est, snr_db)
            y = propagate(tx, h, noise_var, rng=rng)
        else:
            priority = "semantic" if variant == "proposed-semantic" else "compress"
            frames = map_streams(f_se, f_co, priority, link.numerology)
            y, noise_var = _send(frames, h, svd_est, snr_db, rng)

    with _stage("decode"):
        if variant == "proposed-adaptive":
            r_se, r_co = decode_forward(y, svd_est, model, noise_var, f_se.size, f_co.size)
        else:
            x_hat = equalize(combine(y, svd_est), svd_est, noise_var)
            r_se, r_co = demap_streams(x_hat, f_se.size, f_co.size, priority)
        seg = np.argmax(codec.decode_se(r_se), axis=0)
        low = codec.decode_co(r_co)

    with _stage("reconstruct"):
        image = reconstruct(models.recon, seg, low, models.recon_steps, seed=int(rng.integers(2 ** 63)))
    return Outcome(image, seg, err_db, r_se, r_co)


def score(scene: Scene, outcome: Outcome, fx: FeatureExtractor) -> Dict[str, float]:
    with _stage("metrics"):
        return {"ssim": ssim(outcome.image, scene.image),
                "perceptual": perceptual(outcome.image, scene.image, fx),
                "iou": iou(outcome.seg, scene.seg)}


def make_link_fn(channels: Sequence[ChannelTensor], link: LinkContext, priority: str = "semantic"):
    """Perfect-CSI SVD link over a channel drawn from ``channels`` per call."""
    svds = [svd_decompose(h) for h in channels]

    def send(f_se: np.ndarray, f_co: np.ndarray, snr_db: float, rng: np.random.Generator):
        i = int(rng.integers(len(channels)))
        h, svd = channels[i], svds[i]
        frames = map_streams(f_se, f_co, priority, link.numerology)
        y, noise_var = _send(frames, h, svd, snr_db, rng)
        return demap_streams(equalize(combine(y, svd), svd, noise_var), f_se.size, f_co.size, priority)

    return send
