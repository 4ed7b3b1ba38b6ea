"""Task-adaptive precoding: a learnable real mixing layer W ahead of SVD precoding and a dense receiver decoder.

The payload [F_se; F_co] is split into blocks of ``block_symbols`` complex
symbols; each block is C2R'd, multiplied by W, normalized to unit mean
symbol power and R2C'd, then the blocks are mapped as one sequence onto the
SVD streams. Training replaces the MIMO link by its exact per-slot
equivalent after U^H combining and MMSE equalization:

    r = g * x + n,  g = lam^2 / (lam^2 + s2),  std(n) per real = lam / (lam^2 + s2) * sqrt(s2 / 2)
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from semlink.core.config import PrecodeConfig
from semlink.core.logging import log_epoch
from semlink.services.channel import DEFAULT_NUMEROLOGY, ChannelTensor, Numerology
from semlink.services.nn_core import (
    Dense,
    ParamStore,
    ShapeError,
    Tensor,
    adam_step,
    check_finite_loss,
    check_not_diverged,
    dense,
    loss_mse,
    minibatches,
    no_grad,
    normalize_power,
)
from semlink.services.ofdm_link import (
    SvdTriple,
    combine,
    demap_streams,
    equalize,
    map_streams,
    precode,
    stream_slots,
    svd_decompose,
)
from semlink.services.semantic_codec import c2r, r2c

log = logging.getLogger(__name__)

W_INIT_STD = 0.01


def parameter_count(block_symbols: int) -> int:
    """W plus the decoder's weight and bias for one block of complex symbols."""
    n = 2 * block_symbols
    return 2 * n * n + n


class PrecodeModel:
    def __init__(self, n_symbols: int, beta: float = 1.0, block_symbols: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None, store: Optional[ParamStore] = None):
        if beta <= 0:
            raise ValueError(f"beta must be > 0, got {beta}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_symbols = int(n_symbols)
        self.block = int(block_symbols or n_symbols)
        self.n_blocks = -(-self.n_symbols // self.block)
        self.beta = float(beta)
        self.store = store if store is not None else ParamStore()
        n = 2 * self.block
        self.store.add("w", np.eye(n) + rng.normal(0.0, W_INIT_STD, size=(n, n)))
        self.decoder = Dense(self.store, "decoder", n, n, init="identity")
        self.store.meta.update({"beta": self.beta, "block_symbols": float(self.block),
                                "n_symbols": float(self.n_symbols), "trained": 0.0})

    @property
    def trained(self) -> bool:
        return bool(self.store.meta.get("trained", 0.0))

    @property
    def w(self) -> Tensor:
        return self.store["w"]

    def set_w(self, w: np.ndarray) -> None:
        self.store.load_arrays({"w": w, **{k: v for k, v in self.store.arrays().items() if k != "w"}})

    def blocks(self, reals: np.ndarray) -> np.ndarray:
        """[..., 2N] -> [..., n_blocks, 2B], zero padded."""
        pad = 2 * self.n_blocks * self.block - reals.shape[-1]
        if pad < 0:
            raise ShapeError(f"payload of {reals.shape[-1] // 2} symbols exceeds model size {self.n_symbols}")
        reals = np.concatenate([reals, np.zeros(reals.shape[:-1] + (pad,))], axis=-1) if pad else reals
        return reals.reshape(reals.shape[:-1] + (self.n_blocks, 2 * self.block))

    def encode(self, reals) -> Tensor:
        """Blocked reals -> W -> unit mean symbol power per block (0.5 per real)."""
        return normalize_power(dense(reals, self.w), 0.5)

    def decode(self, reals) -> Tensor:
        return self.decoder(reals)

    def save(self, path: Path) -> Path:
        return self.store.save(path)

    @classmethod
    def load(cls, path: Path) -> "PrecodeModel":
        header = ParamStore().load(path, strict=False)
        meta = header.meta
        model = cls(int(meta["n_symbols"]), meta.get("beta", 1.0), int(meta["block_symbols"]))
        model.store.load(path)
        model.store.freeze()
        return model


def payload(f_se: np.ndarray, f_co: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(f_se).reshape(-1), np.asarray(f_co).reshape(-1)])


@no_grad()
def encode_payload(model: PrecodeModel, f_se: np.ndarray, f_co: np.ndarray) -> np.ndarray:
    """X_en as one complex sequence of n_blocks * block_symbols symbols."""
    x = payload(f_se, f_co)
    return r2c(model.encode(model.blocks(c2r(x))).data.reshape(-1))


def precode_forward(f_se: np.ndarray, f_co: np.ndarray, model: PrecodeModel, svd: SvdTriple,
                    numerology: Numerology = DEFAULT_NUMEROLOGY) -> np.ndarray:
    """Transmit-ready frames V X_en, [n_frames][K][L][Nt]."""
    x_en = encode_payload(model, f_se, f_co)
    frames = map_streams(x_en, np.empty(0, dtype=np.complex128), "semantic", numerology)
    return precode(frames, svd)


@no_grad()
def decode_forward(y: np.ndarray, svd: SvdTriple, model: PrecodeModel, noise_var: float,
                   n_se: int, n_co: int) -> Tuple[np.ndarray, np.ndarray]:
    """U^H Y -> MMSE -> demap -> decoder -> (F_se_hat, F_co_hat)."""
    x_hat = equalize(combine(y, svd), svd, noise_var)
    seq, _ = demap_streams(x_hat, model.n_blocks * model.block, 0, "semantic")
    out = r2c(model.decode(model.blocks(c2r(seq))).data.reshape(-1))[:n_se + n_co]
    return out[:n_se], out[n_se:]


# ---- training ----------------------------------------------------------------

class LinkEnsemble:
    """Per-slot singular values and received signal power for a set of channels."""

    def __init__(self, channels: Sequence[ChannelTensor | np.ndarray], n_transmit: int,
                 numerology: Numerology = DEFAULT_NUMEROLOGY):
        K, L, D = numerology.n_subcarriers, numerology.n_symbols, numerology.n_streams
        _, slots = stream_slots(n_transmit, K, L, D)
        lam, signal = [], []
        for h in channels:
            s = svd_decompose(h).s
            lam.append(s[slots[:, 1], slots[:, 2], slots[:, 3]])
            signal.append(float(np.mean(np.sum(s ** 2, axis=-1))) / numerology.n_rx)
        self.lam = np.asarray(lam)  # [n_channels][n_transmit]
        self.signal = np.asarray(signal)

    def __len__(self) -> int:
        return len(self.lam)

    def effective(self, idx: np.ndarray, snr_db: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(gain, noise std) per real entry, [batch][2 n_transmit]."""
        lam = self.lam[idx]
        s2 = (self.signal[idx] / 10.0 ** (np.asarray(snr_db) / 10.0))[:, None]
        den = lam ** 2 + s2
        gain = lam ** 2 / den
        std = lam / den * np.sqrt(s2 / 2.0)
        return np.repeat(gain, 2, axis=1), np.repeat(std, 2, axis=1)


def surrogate_losses(model: PrecodeModel, x: np.ndarray, n_se: int, ensemble: LinkEnsemble, idx: np.ndarray,
                     snr_db: np.ndarray, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
    """(MSE_se, MSE_co) over a batch of payloads [batch][N] sent through the per-slot link equivalent."""
    reals = c2r(x)
    blocked = model.blocks(reals)
    b = len(x)
    enc = model.encode(blocked).reshape(b, -1)
    gain, std = ensemble.effective(idx, snr_db)
    received = enc * gain + std * rng.standard_normal(std.shape)
    out = model.decode(received.reshape(blocked.shape)).reshape(b, -1)
    return (loss_mse(out[:, :2 * n_se], reals[:, :2 * n_se]),
            loss_mse(out[:, 2 * n_se:reals.shape[1]], reals[:, 2 * n_se:]))


def train_joint(model: PrecodeModel, features: Tuple[np.ndarray, np.ndarray], channels: Sequence,
                config: PrecodeConfig, seed: int, numerology: Numerology = DEFAULT_NUMEROLOGY,
                epochs: Optional[int] = None) -> Dict[str, List[float]]:
    """Minimizes MSE(F_se) + beta * MSE(F_co) over random channels and SNRs in ``config.snr_db``."""
    f_se, f_co = (np.asarray(f) for f in features)
    if f_se.ndim != 2 or f_co.ndim != 2 or len(f_se) != len(f_co):
        raise ShapeError("train_joint expects feature batches [n][N_se] and [n][N_co]")
    n_se = f_se.shape[1]
    x = np.concatenate([f_se, f_co], axis=1)
    if x.shape[1] != model.n_symbols:
        raise ShapeError(f"payload has {x.shape[1]} symbols, model expects {model.n_symbols}")
    rng = np.random.default_rng(seed)
    ensemble = LinkEnsemble(channels, model.n_blocks * model.block, numerology)
    history: Dict[str, List[float]] = {"se": [], "co": [], "total": []}
    for epoch in range(config.epochs if epochs is None else epochs):
        se_sum = co_sum = tot_sum = 0.0
        batches = 0
        for idx in minibatches(len(x), config.batch_size, rng):
            ch = rng.integers(0, len(ensemble), size=len(idx))
            snr = rng.uniform(*config.snr_db, size=len(idx))
            model.store.zero_grad()
            l_se, l_co = surrogate_losses(model, x[idx], n_se, ensemble, ch, snr, rng)
            total = l_se + model.beta * l_co
            tot_sum += check_finite_loss(total, "train_joint")
            total.backward()
            adam_step(model.store, model.store.grads(), config.lr)
            se_sum += float(l_se.data)
            co_sum += float(l_co.data)
            batches += 1
        for key, value in (("se", se_sum), ("co", co_sum), ("total", tot_sum)):
            history[key].append(value / max(batches, 1))
        log_epoch(log, f"precode-beta{model.beta:g}", epoch, mse_se=history["se"][-1], mse_co=history["co"][-1])
    check_not_diverged(history["total"], f"precode-beta{model.beta:g}")
    model.store.meta["trained"] = 1.0
    return history


@no_grad()
def evaluate_mse(model: PrecodeModel, features: Tuple[np.ndarray, np.ndarray], channels: Sequence,
                 snr_db: float, seed: int, numerology: Numerology = DEFAULT_NUMEROLOGY) -> Tuple[float, float]:
    """Feature MSEs at a fixed SNR, each payload on a channel drawn from ``channels``."""
    f_se, f_co = (np.asarray(f) for f in features)
    rng = np.random.default_rng(seed)
    ensemble = LinkEnsemble(channels, model.n_blocks * model.block, numerology)
    idx = rng.integers(0, len(ensemble), size=len(f_se))
    l_se, l_co = surrogate_losses(model, np.concatenate([f_se, f_co], axis=1), f_se.shape[1], ensemble, idx,
                                  np.full(len(f_se), float(snr_db)), rng)
    return float(l_se.data), float(l_co.data)


def mean_symbol_power(x: np.ndarray) -> float:
    return float(np.mean(np.abs(x) ** 2)) if np.size(x) else 0.0


def identity_model(n_symbols: int) -> PrecodeModel:
    """W = I, decoder = I: the plain SVD path."""
    model = PrecodeModel(n_symbols)
    model.set_w(np.eye(2 * model.block))
    return model
