"""Receiver-side scene reconstruction by a frozen scene DDPM steered by two condition branches."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from semlink.core.config import ReconConfig
from semlink.core.logging import log_epoch
from semlink.services.diffusion import Denoiser, cosine_schedule, forward_sample, sample, train_denoiser
from semlink.services.nn_core import (
    Conv2d,
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
    upsample_nearest,
)
from semlink.services.semantic_codec import N_CLASSES, Scene, one_hot

log = logging.getLogger(__name__)

# (f_se, f_co, snr_db, rng) -> received (f_se, f_co)
LinkFn = Callable[[np.ndarray, np.ndarray, float, np.random.Generator], Tuple[np.ndarray, np.ndarray]]


class ConditionBranch:
    """Upsample -> conv -> relu -> zero-initialized conv, producing an injection map for the base denoiser."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, factor: int, width: int,
                 rng: np.random.Generator):
        self.name, self.factor, self.in_channels = name, factor, in_channels
        self.conv = Conv2d(store, f"{name}.conv", in_channels, width, 3, rng=rng)
        self.zero = Conv2d(store, f"{name}.zero", width, width, 3, init="zero")

    def __call__(self, x) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"branch {self.name} expects {self.in_channels} input channels, got {x.shape[1]}")
        return self.zero(relu(self.conv(upsample_nearest(x, self.factor))))


@dataclass
class Triple:
    image: np.ndarray  # [3][S][S]
    seg: np.ndarray  # received class map [S/4][S/4]
    low_res: np.ndarray  # received image [3][S/8][S/8]


class SceneReconstructor:
    def __init__(self, image_size: int = 64, config: Optional[ReconConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        config = config or ReconConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.image_size, self.config = image_size, config
        self.base = Denoiser((3, image_size, image_size), 0, config.width, config.timesteps, rng=rng)
        self.schedule = cosine_schedule(config.timesteps)
        self.branches = ParamStore()
        self.branch_se = ConditionBranch(self.branches, "se", N_CLASSES, 4, config.width, rng)
        self.branch_co = ConditionBranch(self.branches, "co", 3, 8, config.width, rng)
        self.branches.meta.update({"trained": 0.0})

    @property
    def branches_trained(self) -> bool:
        return bool(self.branches.meta.get("trained", 0.0))

    def _inputs(self, seg: np.ndarray, low_res: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        s = self.image_size
        seg = np.asarray(seg).reshape(-1, s // 4, s // 4)
        low = np.asarray(low_res, dtype=np.float64).reshape(-1, 3, s // 8, s // 8)
        return one_hot(seg), low * 2.0 - 1.0

    def injection(self, seg: np.ndarray, low_res: np.ndarray, use_se: bool = True, use_co: bool = True,
                  mask_se: Optional[np.ndarray] = None, mask_co: Optional[np.ndarray] = None) -> Optional[Tensor]:
        se_in, co_in = self._inputs(seg, low_res)
        out = None
        if use_se:
            inj = self.branch_se(se_in)
            out = inj * mask_se.reshape(-1, 1, 1, 1) if mask_se is not None else inj
        if use_co:
            inj = self.branch_co(co_in)
            inj = inj * mask_co.reshape(-1, 1, 1, 1) if mask_co is not None else inj
            out = inj if out is None else out + inj
        return out

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.base.save(directory / "base.slnn")
        self.branches.meta["image_size"] = float(self.image_size)
        self.branches.save(directory / "branches.slnn")
        return directory

    @classmethod
    def load(cls, directory: Path, config: Optional[ReconConfig] = None) -> "SceneReconstructor":
        directory = Path(directory)
        header = ParamStore().load(directory / "base.slnn", strict=False)
        config = (config or ReconConfig()).model_copy(update={"width": int(header.meta.get("width", 32)),
                                                              "timesteps": int(header.meta.get("T", 100))})
        branches_probe = ParamStore().load(directory / "branches.slnn", strict=False)
        recon = cls(int(branches_probe.meta.get("image_size", 64)), config)
        recon.base.store.load(directory / "base.slnn")
        recon.base.store.freeze()
        recon.branches.load(directory / "branches.slnn")
        recon.branches.freeze()
        return recon


def train_base(recon: SceneReconstructor, scenes: Sequence[Scene], seed: int) -> List[float]:
    """Unconditional scene DDPM on images mapped to [-1, 1]; the base is frozen afterwards."""
    data = np.stack([s.image for s in scenes]) * 2.0 - 1.0
    cfg = recon.config
    history = train_denoiser(recon.base, data, None, recon.schedule, cfg.base_epochs, cfg.batch_size, cfg.base_lr,
                             seed, component="recon-base")
    recon.base.store.freeze()
    return history


def build_triples(scenes: Sequence[Scene], codec, link: LinkFn, snr_db: Tuple[float, float],
                  seed: int) -> List[Triple]:
    """Features of each scene sent over ``link`` at an SNR drawn from ``snr_db``, decoded back to conditions."""
    rng = np.random.default_rng(seed)
    triples = []
    for scene in scenes:
        f_se = codec.encode_se(scene.seg)
        f_co = codec.encode_co(scene.low_res())
        r_se, r_co = link(f_se, f_co, float(rng.uniform(*snr_db)), rng)
        triples.append(Triple(scene.image, np.argmax(codec.decode_se(r_se), axis=0), codec.decode_co(r_co)))
    return triples


def branch_loss(recon: SceneReconstructor, images: np.ndarray, segs: np.ndarray, lows: np.ndarray,
                rng: np.random.Generator, dropout: float = 0.0) -> Tuple[Tensor, Tensor]:
    """(L_se, L_co): eps-prediction losses of the frozen base steered by one branch each."""
    n = len(images)
    x0 = images * 2.0 - 1.0
    t = rng.integers(0, recon.schedule.T, size=n)
    x_t, eps = forward_sample(x0, t, recon.schedule, rng=rng)
    keep_se = (rng.uniform(size=n) >= dropout).astype(np.float64)
    keep_co = (rng.uniform(size=n) >= dropout).astype(np.float64)
    inj_se = recon.injection(segs, lows, use_co=False, mask_se=keep_se)
    inj_co = recon.injection(segs, lows, use_se=False, mask_co=keep_co)
    return (loss_mse(recon.base(x_t, t, None, inj_se), eps),
            loss_mse(recon.base(x_t, t, None, inj_co), eps))


def train_branches(recon: SceneReconstructor, triples: Sequence[Triple], seed: int,
                   epochs: Optional[int] = None) -> Dict[str, List[float]]:
    """Trains only the branch parameters on L_se + L_co with condition dropout."""
    if not recon.base.trained:
        raise UntrainedModel("train_branches: base denoiser must be pretrained first")
    cfg = recon.config
    epochs = cfg.branch_epochs if epochs is None else epochs
    rng = np.random.default_rng(seed)
    images = np.stack([tr.image for tr in triples]) if triples else np.empty((0, 3, 1, 1))
    segs = np.stack([tr.seg for tr in triples]) if triples else np.empty((0, 1, 1))
    lows = np.stack([tr.low_res for tr in triples]) if triples else np.empty((0, 3, 1, 1))
    history: Dict[str, List[float]] = {"se": [], "co": []}
    for epoch in range(epochs):
        se_sum, co_sum, batches = 0.0, 0.0, 0
        for idx in minibatches(len(images), cfg.batch_size, rng):
            recon.branches.zero_grad()
            l_se, l_co = branch_loss(recon, images[idx], segs[idx], lows[idx], rng, cfg.dropout)
            total = l_se + l_co
            check_finite_loss(total, "train_branches")
            total.backward()
            adam_step(recon.branches, recon.branches.grads(), cfg.branch_lr)
            se_sum += float(l_se.data)
            co_sum += float(l_co.data)
            batches += 1
        history["se"].append(se_sum / max(batches, 1))
        history["co"].append(co_sum / max(batches, 1))
        log_epoch(log, "recon-branches", epoch, loss_se=history["se"][-1], loss_co=history["co"][-1])
    if epochs > 0:
        recon.branches.meta["trained"] = 1.0
    return history


@no_grad()
def conditional_loss(recon: SceneReconstructor, triples: Sequence[Triple], seed: int,
                     conditioned: bool = True) -> float:
    """Mean eps-prediction loss over ``triples`` with both branches on (or off), on a fixed noise draw."""
    rng = np.random.default_rng(seed)
    images = np.stack([tr.image for tr in triples])
    x0 = images * 2.0 - 1.0
    t = rng.integers(0, recon.schedule.T, size=len(images))
    x_t, eps = forward_sample(x0, t, recon.schedule, rng=rng)
    inj = None
    if conditioned:
        inj = recon.injection(np.stack([tr.seg for tr in triples]), np.stack([tr.low_res for tr in triples]))
    return float(loss_mse(recon.base(x_t, t, None, inj), eps).data)


def reconstruct(recon: SceneReconstructor, seg: np.ndarray, low_res: np.ndarray, steps: Optional[int] = None,
                seed: int = 0, use_se: bool = True, use_co: bool = True) -> np.ndarray:
    """Image [3][S][S] in [0, 1] sampled from the base with both branch injections summed."""
    if not recon.base.trained:
        raise UntrainedModel("reconstruct: base denoiser has not been trained")
    if not recon.branches_trained:
        log.warning("reconstructing with untrained condition branches")
    steps = steps or recon.config.steps
    with no_grad():
        inj = recon.injection(seg, low_res, use_se=use_se, use_co=use_co)
    injection = inj.data if inj is not None else None
    x = sample(recon.base, None, recon.schedule, steps, seed=seed, n=1, injection=injection, clip_x0=(-1.0, 1.0))
    return np.clip((x[0] + 1.0) / 2.0, 0.0, 1.0)


def write_ppm(path: Path, image: np.ndarray) -> Path:
    """Binary PPM (P6) of a [3][H][W] image in [0, 1]."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    _, h, w = img.shape
    pixels = np.round(np.moveaxis(img, 0, -1) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path
