"""Clustered geometric MIMO-OFDM channel generator.

Each drop places ``cluster_count`` single-ray clusters around the line from
the user to the base station at the origin. Cluster delays follow an
exponential profile that is rescaled so the drop's power-weighted RMS delay
spread hits a value drawn from the region's range; LOS regions put a
deterministic path with Rician K-factor 10 dB at zero delay.

    H[k,l,r,t] = sum_c g_c a_r(theta_c)[r] conj(a_t(phi_c)[t])
                 * exp(-j 2 pi f_k tau_c) * exp(j 2 pi nu_c t_l)
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.constants import pi, speed_of_light

from semlink.storage.containers import read_channel_dataset, write_channel_dataset

log = logging.getLogger(__name__)

LOS_K_FACTOR_DB = 10.0
ANGLE_SPREAD_DEG = 20.0
DELAY_SCALING = 2.1  # r_tau of the exponential delay profile
SHADOWING_DB = 3.0


class InvalidRegion(ValueError):
    pass


class NonFiniteChannel(ValueError):
    pass


@dataclass(frozen=True)
class Numerology:
    carrier_hz: float = 2.655e9
    subcarrier_spacing_hz: float = 15e3
    n_subcarriers: int = 72
    n_symbols: int = 14
    n_rx: int = 2
    n_tx: int = 4

    @property
    def symbol_duration_s(self) -> float:
        return 1.0 / (self.n_symbols * 1000.0)

    @property
    def n_streams(self) -> int:
        return min(self.n_rx, self.n_tx)

    @property
    def grid_shape(self) -> Tuple[int, int, int, int]:
        return (self.n_subcarriers, self.n_symbols, self.n_rx, self.n_tx)


DEFAULT_NUMEROLOGY = Numerology()


@dataclass(frozen=True)
class RegionSpec:
    id: int
    center: Tuple[float, float]
    radius: float
    los: bool
    cluster_count: int
    delay_spread_range: Tuple[float, float]  # ns

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidRegion(f"region {self.id}: radius must be > 0, got {self.radius}")
        if self.cluster_count < 1:
            raise InvalidRegion(f"region {self.id}: cluster_count must be >= 1, got {self.cluster_count}")
        lo, hi = self.delay_spread_range
        if not 0 < lo <= hi:
            raise InvalidRegion(f"region {self.id}: delay spread range must satisfy 0 < min <= max, got {lo, hi}")


TABLE_REGIONS: Tuple[RegionSpec, ...] = (
    RegionSpec(1, (100.0, 100.0), 100.0, True, 5, (50.0, 100.0)),
    RegionSpec(2, (100.0, -100.0), 100.0, False, 20, (400.0, 450.0)),
    RegionSpec(3, (-100.0, -100.0), 100.0, False, 20, (950.0, 1000.0)),
    RegionSpec(4, (-100.0, 100.0), 100.0, False, 15, (50.0, 100.0)),
)


@dataclass(frozen=True)
class UserState:
    position: Tuple[float, float]
    speed: float  # km/h
    heading: float = 0.0  # rad

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")

    def as_row(self) -> np.ndarray:
        return np.array([self.position[0], self.position[1], self.speed, self.heading])

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "UserState":
        return cls((float(row[0]), float(row[1])), float(row[2]), float(row[3]))


@dataclass(frozen=True)
class PathProfile:
    delays: np.ndarray  # seconds
    powers: np.ndarray  # mean powers, sum 1


@dataclass
class ChannelTensor:
    h: np.ndarray  # complex [K][L][Nr][Nt]
    profile: Optional[PathProfile] = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.complex128)
        if self.h.ndim != 4:
            raise ValueError(f"channel tensor must be [K][L][Nr][Nt], got shape {self.h.shape}")
        if not np.all(np.isfinite(self.h)):
            raise NonFiniteChannel("channel tensor has non-finite entries")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.h.shape


@dataclass
class ChannelDataset:
    region_id: int
    h: np.ndarray  # complex [n][K][L][Nr][Nt]
    users: List[UserState] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.h)

    def tensor(self, i: int) -> ChannelTensor:
        return ChannelTensor(self.h[i])


# ---- geometry ----------------------------------------------------------------

def _ula(n: int, angles: np.ndarray) -> np.ndarray:
    """Half-wavelength ULA responses, [n][clusters]."""
    return np.exp(1j * pi * np.arange(n)[:, None] * np.sin(angles)[None, :])


def _wrap(angle: np.ndarray) -> np.ndarray:
    return (angle + pi) % (2 * pi) - pi


def region_for_position(regions: Sequence[RegionSpec], position: Tuple[float, float]) -> RegionSpec:
    """Region whose centre is nearest; ties go to the lower id."""
    x, y = position
    return min(regions, key=lambda r: (math.hypot(x - r.center[0], y - r.center[1]), r.id))


def cdm_subregion_centers() -> List[Tuple[float, float]]:
    """Twenty sampling sites: a 4x4 grid at +-50/+-150 m plus the four region centres."""
    grid = [(x, y) for x in (50.0, 150.0, -50.0, -150.0) for y in (50.0, 150.0, -50.0, -150.0)]
    return grid + [(100.0, 100.0), (100.0, -100.0), (-100.0, -100.0), (-100.0, 100.0)]


def subregion_index(positions: np.ndarray, centers: Optional[Sequence[Tuple[float, float]]] = None) -> np.ndarray:
    c = np.asarray(centers if centers is not None else cdm_subregion_centers())
    p = np.asarray(positions).reshape(-1, 2)
    return np.argmin(np.linalg.norm(p[:, None, :] - c[None, :, :], axis=-1), axis=1)


def rms_of_profile(delays: np.ndarray, powers: np.ndarray) -> float:
    p = powers / powers.sum()
    mean = float(np.sum(p * delays))
    return float(np.sqrt(max(np.sum(p * delays ** 2) - mean ** 2, 0.0)))


# ---- generation --------------------------------------------------------------

def _draw_profile(region: RegionSpec, rng: np.random.Generator,
                  delay_spread_ns: Optional[Tuple[float, float]]) -> Tuple[np.ndarray, np.ndarray, float]:
    lo, hi = delay_spread_ns or region.delay_spread_range
    target = rng.uniform(lo, hi) * 1e-9
    n = region.cluster_count
    tau = np.sort(-DELAY_SCALING * target * np.log1p(-rng.uniform(size=n)))
    tau -= tau[0]
    powers = np.exp(-tau * (DELAY_SCALING - 1.0) / (DELAY_SCALING * target))
    powers *= 10.0 ** (-rng.normal(0.0, SHADOWING_DB, size=n) / 10.0)
    powers /= powers.sum()
    if region.los:
        k = 10.0 ** (LOS_K_FACTOR_DB / 10.0)
        # cluster 0 becomes the LOS path at zero delay
        powers = np.concatenate([[k / (k + 1.0)], powers[1:] / max(powers[1:].sum(), 1e-300) / (k + 1.0)]) \
            if n > 1 else np.array([1.0])
        tau[0] = 0.0
    realized = rms_of_profile(tau, powers)
    if realized > 0:
        tau = tau * (target / realized)
    return tau, powers, target


def generate(region: RegionSpec, user: UserState, seed: int,
             numerology: Numerology = DEFAULT_NUMEROLOGY,
             delay_spread_ns: Optional[Tuple[float, float]] = None,
             frame_index: int = 0) -> ChannelTensor:
    """One drop. Pure in (region, user, seed); ``frame_index`` continues the Doppler phase."""
    if region.cluster_count < 1:
        raise InvalidRegion(f"region {region.id}: cluster_count must be >= 1")
    x, y = user.position
    dist = math.hypot(x - region.center[0], y - region.center[1])
    if dist > 2.0 * region.radius:
        log.warning("user outside region", extra={"region": region.id, "distance_m": round(dist, 1)})

    rng = np.random.default_rng(seed)
    tau, powers, _ = _draw_profile(region, rng, delay_spread_ns)
    n = region.cluster_count
    spread = np.deg2rad(ANGLE_SPREAD_DEG)

    bearing_to_bs = math.atan2(-y, -x)
    bearing_from_bs = math.atan2(y, x)
    theta = _wrap(bearing_to_bs + rng.normal(0.0, spread, size=n))
    phi = _wrap(bearing_from_bs + rng.normal(0.0, spread, size=n))

    gains = np.sqrt(powers / 2.0) * (rng.normal(size=n) + 1j * rng.normal(size=n))
    if region.los:
        theta[0], phi[0] = _wrap(bearing_to_bs), _wrap(bearing_from_bs)
        wavelength = speed_of_light / numerology.carrier_hz
        gains[0] = np.sqrt(powers[0]) * np.exp(-2j * pi * math.hypot(x, y) / wavelength)

    K, L, Nr, Nt = numerology.grid_shape
    f_k = np.arange(K) * numerology.subcarrier_spacing_hz
    t_l = (np.arange(L) + frame_index * L) * numerology.symbol_duration_s
    nu = (user.speed / 3.6) / speed_of_light * numerology.carrier_hz * np.cos(user.heading - theta)

    freq = np.exp(-2j * pi * f_k[:, None] * tau[None, :])
    time = np.exp(2j * pi * t_l[:, None] * nu[None, :])
    a_r = _ula(Nr, theta)
    a_t = _ula(Nt, phi)
    h = np.einsum("kc,lc,rc,tc,c->klrt", freq, time, a_r, np.conj(a_t), gains, optimize=True)
    return ChannelTensor(h, PathProfile(delays=tau, powers=powers))


def generate_frames(region: RegionSpec, user: UserState, seed: int, n_frames: int,
                    numerology: Numerology = DEFAULT_NUMEROLOGY,
                    delay_spread_ns: Optional[Tuple[float, float]] = None) -> List[ChannelTensor]:
    return [generate(region, user, seed, numerology, delay_spread_ns, frame_index=f) for f in range(n_frames)]


# ---- statistics --------------------------------------------------------------

def profile_rms_delay_spread(tensor: ChannelTensor) -> float:
    """Exact RMS delay spread (ns) of the drop's path profile."""
    if tensor.profile is None:
        raise ValueError("channel tensor carries no path profile")
    return rms_of_profile(tensor.profile.delays, tensor.profile.powers) * 1e9


def frequency_correlation(h: ChannelTensor | np.ndarray, lag: int) -> complex:
    """Normalized correlation between subcarriers ``lag`` apart, pooled over symbols and antennas."""
    g = h.h if isinstance(h, ChannelTensor) else np.asarray(h)
    K = g.shape[0]
    if not 0 <= lag < K:
        raise ValueError(f"lag must lie in [0, {K}), got {lag}")
    a, b = g[lag:], g[:K - lag]
    den = math.sqrt(float(np.sum(np.abs(a) ** 2) * np.sum(np.abs(b) ** 2)))
    if den == 0:
        return 0j
    return complex(np.sum(a * np.conj(b)) / den)


def rms_delay_spread(h: ChannelTensor | np.ndarray, spacing_hz: float = DEFAULT_NUMEROLOGY.subcarrier_spacing_hz,
                     rank_tol: float = 1e-9) -> float:
    """RMS delay spread (ns) of the power-delay profile recovered from the frequency correlation.

    The smoothed subcarrier covariance is split into signal and noise
    subspaces; path delays come from the rotation between shifted signal
    subspaces and path powers from a least-squares fit of the response on
    those delays. Noise-free input recovers the profile exactly as long as
    it has fewer than K/2 distinct delays.
    """
    g = h.h if isinstance(h, ChannelTensor) else np.asarray(h, dtype=np.complex128)
    K = g.shape[0]
    snapshots = g.reshape(K, -1)
    if K < 3 or not np.any(snapshots):
        return 0.0
    M = K // 2
    # forward smoothing over subcarrier offsets, [M][offsets * snapshots]
    windows = sliding_window_view(snapshots, M, axis=0)
    Y = np.moveaxis(windows, -1, 0).reshape(M, -1)
    w, v = np.linalg.eigh(Y @ Y.conj().T / Y.shape[1])
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    n_paths = int(np.clip(np.sum(w > rank_tol * w[0]), 1, M - 1))
    signal = v[:, :n_paths]
    rotation = np.linalg.lstsq(signal[:-1], signal[1:], rcond=None)[0]
    z = np.linalg.eigvals(rotation)
    delays = -np.angle(z) / (2 * pi * spacing_hz)
    steering = np.exp(-2j * pi * np.arange(K)[:, None] * spacing_hz * delays[None, :])
    amplitudes = np.linalg.lstsq(steering, snapshots, rcond=None)[0]
    powers = np.mean(np.abs(amplitudes) ** 2, axis=1)
    if powers.sum() <= 0:
        return 0.0
    return rms_of_profile(delays, powers) * 1e9


def temporal_correlation(h: ChannelTensor | np.ndarray, lag: int) -> float:
    """Real part of the normalized symbol-lag autocorrelation, pooled over subcarriers and antennas."""
    g = h.h if isinstance(h, ChannelTensor) else np.asarray(h)
    L = g.shape[1]
    if not 0 <= lag < L:
        raise ValueError(f"lag must lie in [0, {L}), got {lag}")
    a, b = g[:, lag:], g[:, :L - lag]
    den = math.sqrt(float(np.sum(np.abs(a) ** 2) * np.sum(np.abs(b) ** 2)))
    if den == 0:
        return 1.0
    return float(np.clip(np.real(np.sum(a * np.conj(b))) / den, -1.0, 1.0))


# ---- datasets ----------------------------------------------------------------

def sample_users(center: Tuple[float, float], radius: float, speed_kmh: Tuple[float, float], n: int,
                 rng: np.random.Generator) -> List[UserState]:
    r = radius * np.sqrt(rng.uniform(size=n))
    ang = rng.uniform(0.0, 2 * pi, size=n)
    speeds = rng.uniform(speed_kmh[0], speed_kmh[1], size=n)
    headings = rng.uniform(-pi, pi, size=n)
    return [UserState((center[0] + r[i] * math.cos(ang[i]), center[1] + r[i] * math.sin(ang[i])),
                      float(speeds[i]), float(headings[i])) for i in range(n)]


@dataclass(frozen=True)
class Scenario:
    """A test or training site: a disc inside a region with a speed range."""
    name: str
    region: RegionSpec
    center: Tuple[float, float]
    radius: float
    speed_kmh: Tuple[float, float]
    delay_spread_ns: Optional[Tuple[float, float]] = None

    @property
    def mid_speed(self) -> float:
        return 0.5 * (self.speed_kmh[0] + self.speed_kmh[1])

    def draw(self, n: int, seed: int, numerology: Numerology = DEFAULT_NUMEROLOGY) -> ChannelDataset:
        rng = np.random.default_rng(seed)
        users = sample_users(self.center, self.radius, self.speed_kmh, n, rng)
        seeds = rng.integers(0, 2 ** 63 - 1, size=n)
        K, L, Nr, Nt = numerology.grid_shape
        h = np.empty((n, K, L, Nr, Nt), dtype=np.complex128)
        for i, user in enumerate(users):
            h[i] = generate(self.region, user, int(seeds[i]), numerology, self.delay_spread_ns).h
        return ChannelDataset(self.region.id, h, users)


def make_scenario(name: str, regions: Sequence[RegionSpec], center: Tuple[float, float], radius: float,
                  speed_kmh: Tuple[float, float], delay_spread_ns: Optional[Tuple[float, float]] = None) -> Scenario:
    return Scenario(name, region_for_position(regions, center), center, radius, speed_kmh, delay_spread_ns)


def mixed_dataset(regions: Sequence[RegionSpec], samples_per_site: int, seed: int,
                  radius: float = 20.0, speed_kmh: Tuple[float, float] = (12.0, 144.0),
                  numerology: Numerology = DEFAULT_NUMEROLOGY) -> ChannelDataset:
    """Multi-scenario training set drawn at the twenty sampling sites (region id 0)."""
    rng = np.random.default_rng(seed)
    parts, users = [], []
    for i, center in enumerate(cdm_subregion_centers()):
        site = make_scenario(f"site{i}", regions, center, radius, speed_kmh)
        ds = site.draw(samples_per_site, int(rng.integers(0, 2 ** 63 - 1)), numerology)
        parts.append(ds.h)
        users.extend(ds.users)
    K, L, Nr, Nt = numerology.grid_shape
    h = np.concatenate(parts) if parts else np.empty((0, K, L, Nr, Nt), dtype=np.complex128)
    return ChannelDataset(0, h, users)


def normalize_ensemble(h: np.ndarray) -> np.ndarray:
    """Scales a stack of channel grids to unit mean per-entry power."""
    power = float(np.mean(np.abs(h) ** 2)) if h.size else 0.0
    return h / math.sqrt(power) if power > 0 else h


def save_dataset(path: Path, ds: ChannelDataset) -> Path:
    users = np.array([u.as_row() for u in ds.users]) if ds.users else np.zeros((len(ds), 4))
    return write_channel_dataset(path, ds.region_id, ds.h, users)


def load_dataset(path: Path) -> ChannelDataset:
    region_id, h, users = read_channel_dataset(path)
    return ChannelDataset(region_id, h, [UserState.from_row(u) for u in users])


def with_delay_spread(region: RegionSpec, delay_spread_ns: Tuple[float, float]) -> RegionSpec:
    return replace(region, delay_spread_range=tuple(delay_spread_ns))
