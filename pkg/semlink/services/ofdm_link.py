"""Physical-layer algebra: pilots and LS estimation, SVD precoding/combining, AWGN, stream mapping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np

from semlink.services.channel import ChannelTensor, DEFAULT_NUMEROLOGY, Numerology


class PilotError(ValueError):
    pass


class LinkError(ValueError):
    pass


@dataclass(frozen=True)
class PilotLayout:
    symbol_indices: Tuple[int, ...] = (0, 4, 9, 13)
    n_tx: int = 4
    n_subcarriers: int = 72
    n_symbols: int = 14

    def __post_init__(self):
        if self.n_subcarriers % self.n_tx:
            raise PilotError(f"{self.n_subcarriers} subcarriers do not split evenly over {self.n_tx} antennas")
        if any(not 0 <= s < self.n_symbols for s in self.symbol_indices):
            raise PilotError(f"pilot symbols {self.symbol_indices} outside [0, {self.n_symbols})")

    @classmethod
    def for_numerology(cls, numerology: Numerology = DEFAULT_NUMEROLOGY,
                       symbol_indices: Sequence[int] = (0, 4, 9, 13)) -> "PilotLayout":
        return cls(tuple(symbol_indices), numerology.n_tx, numerology.n_subcarriers, numerology.n_symbols)

    @property
    def n_pilot_subcarriers(self) -> int:
        return self.n_subcarriers // self.n_tx

    @property
    def n_pilot_symbols(self) -> int:
        return len(self.symbol_indices)

    def subcarriers(self, antenna: int) -> np.ndarray:
        return np.arange(antenna, self.n_subcarriers, self.n_tx)

    def mask(self) -> np.ndarray:
        """[K][L][Nt] true where an antenna sends a pilot."""
        m = np.zeros((self.n_subcarriers, self.n_symbols, self.n_tx), dtype=bool)
        for t in range(self.n_tx):
            m[np.ix_(self.subcarriers(t), list(self.symbol_indices), [t])] = True
        return m


@dataclass
class SvdTriple:
    u: np.ndarray  # [K][L][Nr][Nr]
    s: np.ndarray  # [K][L][min(Nr,Nt)], descending
    v: np.ndarray  # [K][L][Nt][Nt]

    @property
    def n_streams(self) -> int:
        return self.s.shape[-1]


@dataclass
class SymbolFrame:
    x: np.ndarray  # complex [K][L][D]


# ---- SVD ---------------------------------------------------------------------

def svd_decompose(h: ChannelTensor | np.ndarray) -> SvdTriple:
    g = h.h if isinstance(h, ChannelTensor) else np.asarray(h, dtype=np.complex128)
    if not np.all(np.isfinite(g)):
        raise LinkError("svd_decompose: non-finite channel")
    u, s, vh = np.linalg.svd(g, full_matrices=True)
    v = np.conj(np.swapaxes(vh, -1, -2))
    d = s.shape[-1]
    # phase convention: first nonzero row of each V column is real-positive
    first = np.argmax(np.abs(v) > 1e-12, axis=-2)
    pick = np.take_along_axis(v, first[..., None, :], axis=-2)[..., 0, :]
    mag = np.abs(pick)
    phase = np.where(mag > 0, pick / np.where(mag > 0, mag, 1.0), 1.0)
    v = v * np.conj(phase)[..., None, :]
    u = u.copy()
    u[..., :, :d] = u[..., :, :d] * np.conj(phase[..., :d])[..., None, :]
    return SvdTriple(u=u, s=s, v=v)


def precode(x: np.ndarray, svd: SvdTriple) -> np.ndarray:
    """X_tx = V_D X per resource element; x is [..., K, L, D]."""
    d = svd.n_streams
    return np.einsum("kltd,...kld->...klt", svd.v[..., :, :d], x)


def frame_noise_variance(h: ChannelTensor | np.ndarray, svd: SvdTriple, snr_db: float) -> float:
    """Noise power giving the requested mean received SNR per antenna for unit-power streams."""
    g = h.h if isinstance(h, ChannelTensor) else np.asarray(h)
    d = svd.n_streams
    hv = np.einsum("klrt,kltd->klrd", g, svd.v[..., :, :d])
    signal = float(np.mean(np.sum(np.abs(hv) ** 2, axis=(-2, -1)))) / g.shape[2]
    return signal / 10.0 ** (snr_db / 10.0)


def propagate(x_tx: np.ndarray, h: ChannelTensor | np.ndarray, noise_var: float,
              seed: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Y = H X_tx + Z with complex white Gaussian Z of the given variance; x_tx is [..., K, L, Nt]."""
    g = h.h if isinstance(h, ChannelTensor) else np.asarray(h)
    y = np.einsum("klrt,...klt->...klr", g, x_tx)
    if noise_var > 0:
        rng = rng if rng is not None else np.random.default_rng(seed)
        y = y + math.sqrt(noise_var / 2.0) * (rng.normal(size=y.shape) + 1j * rng.normal(size=y.shape))
    return y


def transmit(x: SymbolFrame | np.ndarray, h: ChannelTensor, svd: SvdTriple, snr_db: Optional[float],
             seed: Optional[int] = None) -> np.ndarray:
    """Y = H V X + Z. ``snr_db=None`` switches the noise off."""
    xs = x.x if isinstance(x, SymbolFrame) else np.asarray(x)
    K, L = h.shape[:2]
    if xs.shape[-3:-1] != (K, L) or xs.shape[-1] != svd.n_streams:
        raise LinkError(f"transmit: frame shape {xs.shape} does not fit channel {h.shape} with {svd.n_streams} streams")
    noise_var = 0.0 if snr_db is None else frame_noise_variance(h, svd, snr_db)
    return propagate(precode(xs, svd), h, noise_var, seed=seed)


def combine(y: np.ndarray, svd: SvdTriple) -> np.ndarray:
    """U^H Y restricted to the first D streams."""
    d = svd.n_streams
    return np.einsum("klrd,...klr->...kld", np.conj(svd.u[..., :, :d]), y)


def equalize(x_hat: np.ndarray, svd: SvdTriple, noise_var: float) -> np.ndarray:
    """Per-stream MMSE: lambda / (lambda^2 + sigma^2); zero-gain streams map to zero."""
    lam = svd.s
    den = lam ** 2 + noise_var
    gain = np.divide(lam, den, out=np.zeros_like(lam), where=den > 0)
    return x_hat * gain


def stream_gains(svd: SvdTriple, noise_var: float) -> Tuple[np.ndarray, np.ndarray]:
    """Effective (signal gain, noise std per complex symbol) after combining and MMSE, [K][L][D]."""
    lam = svd.s
    den = lam ** 2 + noise_var
    g = np.divide(lam ** 2, den, out=np.zeros_like(lam), where=den > 0)
    w = np.divide(lam, den, out=np.zeros_like(lam), where=den > 0)
    return g, w * math.sqrt(noise_var)


# ---- pilots ------------------------------------------------------------------

def pilot_frame(layout: PilotLayout, pilot_value: complex = 1.0) -> np.ndarray:
    """[K][Lp][Nt]: each antenna sends on its own subcarriers, zero elsewhere."""
    x = np.zeros((layout.n_subcarriers, layout.n_pilot_symbols, layout.n_tx), dtype=np.complex128)
    for t in range(layout.n_tx):
        x[layout.subcarriers(t), :, t] = pilot_value
    return x


def transmit_pilots(h: ChannelTensor | np.ndarray, layout: PilotLayout, pilot_value: complex,
                    snr_db: Optional[float], seed: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Received pilot symbols [..., K, Lp, Nr]; noise variance |p|^2 / rho for a unit-power channel."""
    g = h.h if isinstance(h, ChannelTensor) else np.asarray(h)
    g = g[..., list(layout.symbol_indices), :, :]
    y = np.einsum("...klrt,klt->...klr", g, pilot_frame(layout, pilot_value))
    if snr_db is not None:
        noise_var = abs(pilot_value) ** 2 / 10.0 ** (snr_db / 10.0)
        rng = rng if rng is not None else np.random.default_rng(seed)
        y = y + math.sqrt(noise_var / 2.0) * (rng.normal(size=y.shape) + 1j * rng.normal(size=y.shape))
    return y


def ls_estimate(y_pilots: np.ndarray, layout: PilotLayout, pilot_value: complex) -> np.ndarray:
    """LS grid [..., Kp, Lp, Nr, Nt] from received pilots [..., K, Lp, Nr]."""
    if pilot_value == 0:
        raise PilotError("pilot value must be nonzero")
    y = np.asarray(y_pilots)
    if y.shape[-3:-1] != (layout.n_subcarriers, layout.n_pilot_symbols):
        raise PilotError(f"received pilots {y.shape} do not match layout "
                         f"({layout.n_subcarriers} x {layout.n_pilot_symbols})")
    per_antenna = [y[..., layout.subcarriers(t), :, :] for t in range(layout.n_tx)]
    return np.stack(per_antenna, axis=-1) / pilot_value


def true_pilot_grid(h: ChannelTensor | np.ndarray, layout: PilotLayout) -> np.ndarray:
    """The channel at each antenna's own pilot REs, [..., Kp, Lp, Nr, Nt]."""
    g = h.h if isinstance(h, ChannelTensor) else np.asarray(h)
    g = g[..., list(layout.symbol_indices), :, :]
    return np.stack([g[..., layout.subcarriers(t), :, :, t] for t in range(layout.n_tx)], axis=-1)


@lru_cache(maxsize=8)
def interpolation_matrices(layout: PilotLayout) -> Tuple[np.ndarray, np.ndarray]:
    """Linear interpolation with edge hold: A [Nt][K][Kp] over subcarriers, B [L][Lp] over symbols."""
    K, Kp = layout.n_subcarriers, layout.n_pilot_subcarriers
    grid = np.arange(K)
    eye_k = np.eye(Kp)
    a = np.stack([np.stack([np.interp(grid, layout.subcarriers(t), eye_k[j]) for j in range(Kp)], axis=1)
                  for t in range(layout.n_tx)])
    eye_l = np.eye(layout.n_pilot_symbols)
    b = np.stack([np.interp(np.arange(layout.n_symbols), layout.symbol_indices, eye_l[j])
                  for j in range(layout.n_pilot_symbols)], axis=1)
    return a, b


def interpolate_ls(ls_grid: np.ndarray, layout: PilotLayout) -> np.ndarray:
    """Full-grid estimate [..., K, L, Nr, Nt] by linear interpolation of an LS grid."""
    a, b = interpolation_matrices(layout)
    return np.einsum("tkp,...pqrt,lq->...klrt", a, ls_grid, b, optimize=True)


# ---- stream mapping ----------------------------------------------------------

def _plan(total: int, K: int, L: int, D: int) -> Tuple[int, int]:
    n_frames = max(1, math.ceil(total / (K * L * D)))
    quota = math.ceil(total / (D * n_frames)) if total else 0
    return n_frames, quota


def stream_slots(total: int, K: int, L: int, D: int) -> Tuple[int, np.ndarray]:
    """Slot (frame, k, l, d) of each payload symbol under balanced fill.

    Stream d of frame f carries symbols [(d*n + f)*q, (d*n + f)*q + q) in
    subcarrier-major RE order, so the head of the payload rides stream 0
    across all frames before stream 1 is used.
    """
    n_frames, quota = _plan(total, K, L, D)
    i = np.arange(total)
    block, offset = np.divmod(i, quota) if quota else (i, i)
    d, f = np.divmod(block, n_frames)
    k, l = np.divmod(offset, L)
    return n_frames, np.stack([f, k, l, d], axis=1)


PRIORITIES = ("semantic", "compress")


def _check_priority(priority: str) -> None:
    if priority not in PRIORITIES:
        raise ValueError(f"priority must be 'semantic' or 'compress', got {priority!r}")


def map_streams(f_se: np.ndarray, f_co: np.ndarray, priority: str = "semantic",
                numerology: Numerology = DEFAULT_NUMEROLOGY) -> np.ndarray:
    """Pack both features into frames [n][K][L][D]; the priority feature goes first onto stream 0."""
    _check_priority(priority)
    first, second = (f_se, f_co) if priority == "semantic" else (f_co, f_se)
    seq = np.concatenate([np.asarray(first).reshape(-1), np.asarray(second).reshape(-1)]).astype(np.complex128)
    K, L, D = numerology.n_subcarriers, numerology.n_symbols, numerology.n_streams
    n_frames, slots = stream_slots(seq.size, K, L, D)
    frames = np.zeros((n_frames, K, L, D), dtype=np.complex128)
    frames[slots[:, 0], slots[:, 1], slots[:, 2], slots[:, 3]] = seq
    return frames


def demap_streams(frames: np.ndarray, n_se: int, n_co: int, priority: str = "semantic") -> Tuple[np.ndarray, np.ndarray]:
    _check_priority(priority)
    frames = np.asarray(frames)
    _, K, L, D = frames.shape
    _, slots = stream_slots(n_se + n_co, K, L, D)
    seq = frames[slots[:, 0], slots[:, 1], slots[:, 2], slots[:, 3]]
    if priority == "semantic":
        return seq[:n_se], seq[n_se:]
    return seq[n_co:], seq[:n_co]
