"""Channel estimation knowledge map.

A conditional diffusion model (CDM) learns the channel distribution of the
training sites; for each deployment scenario it synthesizes a dataset from a
position/velocity (PV) or LS-sample condition, and a small residual conv
estimator is trained on it. ``KnowledgeMap.select`` picks the entry for a
user by region and velocity bin, falling back to an estimator trained on the
mixed multi-site dataset.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from semlink.core.config import CdmConfig, EstimatorConfig
from semlink.core.logging import log_epoch
from semlink.services.channel import (
    DEFAULT_NUMEROLOGY,
    ChannelDataset,
    ChannelTensor,
    Numerology,
    RegionSpec,
    Scenario,
    UserState,
    cdm_subregion_centers,
    make_scenario,
    normalize_ensemble,
    sample_users,
)
from semlink.services.diffusion import Denoiser, cosine_schedule, sample, train_denoiser
from semlink.services.nn_core import (
    Conv2d,
    ParamStore,
    ShapeError,
    Tensor,
    UntrainedModel,
    adam_step,
    check_finite_loss,
    check_not_diverged,
    gather_grid,
    loss_mse,
    minibatches,
    no_grad,
    relu,
)
from semlink.services.ofdm_link import PilotLayout, interpolate_ls, ls_estimate, transmit_pilots

log = logging.getLogger(__name__)

KINDS = ("pv", "ls", "true")
BIN_WIDTH_KMH = 12.0
BIN_MIN_KMH = 12.0
BIN_MAX_KMH = 204.0
N_BINS = int((BIN_MAX_KMH - BIN_MIN_KMH) / BIN_WIDTH_KMH)
LS_SAMPLES = 3
NMSE_FLOOR_DB = -100.0


class KnowledgeMapError(ValueError):
    pass


class EstimationError(ValueError):
    pass


# ---- real/complex channel layout ----------------------------------------------

def to_real_layout(h: np.ndarray) -> np.ndarray:
    """[..., A, B, Nr, Nt] complex -> [..., 2 Nr Nt, A, B]; channel c = part*Nr*Nt + r*Nt + t."""
    h = np.asarray(h)
    *lead, a, b, nr, nt = h.shape
    stacked = np.stack([h.real, h.imag], axis=-3)  # [..., A, B, 2, Nr, Nt]
    flat = stacked.reshape(*lead, a, b, 2 * nr * nt)
    return np.moveaxis(flat, -1, -3)


def from_real_layout(x: np.ndarray, n_rx: int, n_tx: int) -> np.ndarray:
    x = np.asarray(x)
    *lead, c, a, b = x.shape
    if c != 2 * n_rx * n_tx:
        raise ShapeError(f"real layout has {c} channels, expected {2 * n_rx * n_tx}")
    parts = np.moveaxis(x, -3, -1).reshape(*lead, a, b, 2, n_rx, n_tx)
    return parts[..., 0, :, :] + 1j * parts[..., 1, :, :]


# ---- conditions --------------------------------------------------------------

@dataclass(frozen=True)
class PVCondition:
    x: float
    y: float
    v: float  # km/h

    def vector(self) -> np.ndarray:
        return np.array([self.x / 200.0, self.y / 200.0, self.v / 100.0])

    def describe(self) -> dict:
        return {"type": "pv", "x": self.x, "y": self.y, "v": self.v}


@dataclass(frozen=True)
class LSCondition:
    samples: np.ndarray  # [3][Kp][Lp][Nr][Nt] complex
    snr_db: float

    def vector(self) -> np.ndarray:
        s = np.asarray(self.samples)
        v = np.concatenate([s.real.reshape(-1), s.imag.reshape(-1)])
        rms = math.sqrt(float(np.mean(v ** 2)))
        return v / rms if rms > 0 else v

    def describe(self) -> dict:
        return {"type": "ls", "n_samples": int(len(self.samples)), "snr_db": self.snr_db}


Condition = Union[PVCondition, LSCondition]


def condition_dim(kind: str, layout: PilotLayout, numerology: Numerology = DEFAULT_NUMEROLOGY) -> int:
    if kind == "pv":
        return 3
    if kind == "ls":
        return 2 * LS_SAMPLES * layout.n_pilot_subcarriers * layout.n_pilot_symbols * numerology.n_rx * numerology.n_tx
    raise KnowledgeMapError(f"no CDM condition for kind {kind!r}")


def ls_condition(channels: np.ndarray, layout: PilotLayout, pilot_value: complex, snr_db: float,
                 rng: np.random.Generator) -> LSCondition:
    """LS pilot grids of (up to) three measured channels, each with independent noise."""
    grids = [ls_estimate(transmit_pilots(h, layout, pilot_value, snr_db, rng=rng), layout, pilot_value)
             for h in channels[:LS_SAMPLES]]
    return LSCondition(np.stack(grids), snr_db)


# ---- channel diffusion model -------------------------------------------------

class ChannelDiffusion:
    """Denoiser over the real channel layout [2 Nr Nt][K][L], data scaled to unit variance per real."""

    def __init__(self, kind: str, config: CdmConfig, layout: PilotLayout,
                 numerology: Numerology = DEFAULT_NUMEROLOGY, rng: Optional[np.random.Generator] = None):
        if kind not in ("pv", "ls"):
            raise KnowledgeMapError(f"CDM kind must be 'pv' or 'ls', got {kind!r}")
        self.kind, self.config, self.layout, self.numerology = kind, config, layout, numerology
        shape = (2 * numerology.n_rx * numerology.n_tx, numerology.n_subcarriers, numerology.n_symbols)
        self.denoiser = Denoiser(shape, condition_dim(kind, layout, numerology), config.width,
                                 config.timesteps, rng=rng)
        self.denoiser.store.meta["kind"] = float(KINDS.index(kind))
        self.schedule = cosine_schedule(config.timesteps)

    @property
    def trained(self) -> bool:
        return self.denoiser.trained

    def save(self, path: Path) -> Path:
        return self.denoiser.save(path)

    @classmethod
    def load(cls, path: Path, config: CdmConfig, layout: PilotLayout,
             numerology: Numerology = DEFAULT_NUMEROLOGY) -> "ChannelDiffusion":
        header = ParamStore().load(path, strict=False)
        kind = KINDS[int(header.meta.get("kind", 0))]
        config = config.model_copy(update={"width": int(header.meta.get("width", config.width)),
                                           "timesteps": int(header.meta.get("T", config.timesteps))})
        cdm = cls(kind, config, layout, numerology)
        cdm.denoiser.store.load(path)
        return cdm


def cdm_training_set(kind: str, regions: Sequence[RegionSpec], config: CdmConfig, layout: PilotLayout,
                     pilot_value: complex, seed: int,
                     numerology: Numerology = DEFAULT_NUMEROLOGY) -> Tuple[np.ndarray, np.ndarray]:
    """Channels from the twenty training sites with their conditions.

    PV: the sample's own position and speed. LS: three other samples of the
    same site measured at the configured LS SNR.
    """
    rng = np.random.default_rng(seed)
    data, conds = [], []
    for i, center in enumerate(cdm_subregion_centers()):
        site = make_scenario(f"site{i}", regions, center, config.subregion_radius, config.speed_kmh)
        ds = site.draw(config.samples_per_subregion, int(rng.integers(2 ** 63)), numerology)
        for j, user in enumerate(ds.users):
            if kind == "pv":
                conds.append(PVCondition(user.position[0], user.position[1], user.speed).vector())
            else:
                others = [k for k in range(len(ds)) if k != j] or [j]
                pick = rng.choice(others, size=LS_SAMPLES, replace=len(others) < LS_SAMPLES)
                conds.append(ls_condition(ds.h[pick], layout, pilot_value, config.ls_snr_db, rng).vector())
        data.append(ds.h)
    h = normalize_ensemble(np.concatenate(data))
    return to_real_layout(h) * math.sqrt(2.0), np.stack(conds)


def train_cdm(kind: str, regions: Sequence[RegionSpec], config: CdmConfig, layout: PilotLayout,
              pilot_value: complex, seed: int, numerology: Numerology = DEFAULT_NUMEROLOGY) -> ChannelDiffusion:
    rng = np.random.default_rng(seed)
    data, conds = cdm_training_set(kind, regions, config, layout, pilot_value, int(rng.integers(2 ** 63)), numerology)
    cdm = ChannelDiffusion(kind, config, layout, numerology, rng=np.random.default_rng(rng.integers(2 ** 63)))
    log.info("training cdm", extra={"component": f"cdm-{kind}", "samples": int(len(data))})
    train_denoiser(cdm.denoiser, data, conds, cdm.schedule, config.epochs, config.batch_size, config.lr,
                   int(rng.integers(2 ** 63)), component=f"cdm-{kind}")
    return cdm


def synthesize_dataset(cdm: ChannelDiffusion, condition: Union[Condition, Sequence[Condition]], n: int,
                       seed: int, batch_size: int = 64) -> ChannelDataset:
    """``n`` CDM samples under ``condition`` (a sequence is cycled), renormalized to unit mean power."""
    if not cdm.trained:
        raise UntrainedModel("synthesize_dataset: CDM has not been trained")
    nm = cdm.numerology
    if n == 0:
        return ChannelDataset(0, np.empty((0,) + nm.grid_shape, dtype=np.complex128))
    conds = list(condition) if isinstance(condition, (list, tuple)) else [condition]
    vectors = np.stack([conds[i % len(conds)].vector() for i in range(n)])
    rng = np.random.default_rng(seed)
    out = []
    for start in range(0, n, batch_size):
        batch = vectors[start:start + batch_size]
        x = sample(cdm.denoiser, batch, cdm.schedule, cdm.config.sample_steps, seed=int(rng.integers(2 ** 63)),
                   n=len(batch), clip_x0=(-cdm.config.clip, cdm.config.clip))
        out.append(from_real_layout(x / math.sqrt(2.0), nm.n_rx, nm.n_tx))
    return ChannelDataset(0, normalize_ensemble(np.concatenate(out)))


# ---- estimator ---------------------------------------------------------------

def velocity_bin(speed_kmh: float) -> Optional[int]:
    """12 km/h bins over 12-204 km/h, the top edge belonging to the last bin; None outside."""
    if not BIN_MIN_KMH <= speed_kmh <= BIN_MAX_KMH:
        return None
    return min(math.floor((speed_kmh - BIN_MIN_KMH) / BIN_WIDTH_KMH), N_BINS - 1)


def _upsample_tables(layout: PilotLayout, n_rx: int) -> Tuple[np.ndarray, np.ndarray]:
    nt = layout.n_tx
    channels = np.arange(2 * n_rx * nt)
    k = np.arange(layout.n_subcarriers)
    t = (channels % nt)[:, None]
    rows = np.clip(np.round((k[None, :] - t) / nt), 0, layout.n_pilot_subcarriers - 1).astype(np.int64)
    pilots = np.asarray(layout.symbol_indices)
    cols = np.argmin(np.abs(np.arange(layout.n_symbols)[:, None] - pilots[None, :]), axis=1)
    return rows, cols


class ChannelEstimator:
    """Residual conv estimator on the pilot grid, upsampled to the full grid on top of LS interpolation."""

    def __init__(self, layout: PilotLayout, numerology: Numerology = DEFAULT_NUMEROLOGY, width: int = 16,
                 blocks: int = 3, rng: Optional[np.random.Generator] = None, store: Optional[ParamStore] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layout, self.numerology = layout, numerology
        self.channels = 2 * numerology.n_rx * numerology.n_tx
        self.store = store if store is not None else ParamStore()
        s = self.store
        self.conv_in = Conv2d(s, "conv_in", self.channels, width, 3, rng=rng)
        self.blocks = [Conv2d(s, f"block{i}", width, width, 3, rng=rng) for i in range(blocks)]
        self.conv_mid = Conv2d(s, "conv_mid", width, self.channels, 3, rng=rng)
        self.conv_out = Conv2d(s, "conv_out", self.channels, self.channels, 3, init="zero")
        self.rows, self.cols = _upsample_tables(layout, numerology.n_rx)
        s.meta.update({"width": float(width), "blocks": float(blocks), "trained": 0.0})

    @property
    def trained(self) -> bool:
        return bool(self.store.meta.get("trained", 0.0))

    def _check(self, ls_grid: np.ndarray) -> np.ndarray:
        g = np.asarray(ls_grid)
        want = (self.layout.n_pilot_subcarriers, self.layout.n_pilot_symbols, self.numerology.n_rx,
                self.numerology.n_tx)
        if g.shape[-4:] != want:
            raise ShapeError(f"LS grid must be [..., {']['.join(map(str, want))}], got {g.shape}")
        return g.reshape((-1,) + want)

    def __call__(self, ls_grid: np.ndarray) -> Tensor:
        """Full-grid estimate in the real layout, [N][2 Nr Nt][K][L]."""
        g = self._check(ls_grid)
        skip = to_real_layout(interpolate_ls(g, self.layout))
        h = relu(self.conv_in(to_real_layout(g)))
        for block in self.blocks:
            h = h + relu(block(h))
        up = gather_grid(self.conv_mid(h), self.rows, self.cols)
        return self.conv_out(up) + skip

    @no_grad()
    def forward_real(self, ls_grid: np.ndarray) -> np.ndarray:
        out = self(ls_grid).data
        return out if np.ndim(ls_grid) == 5 else out[0]

    def save(self, path: Path) -> Path:
        return self.store.save(path)

    @classmethod
    def load(cls, path: Path, layout: PilotLayout, numerology: Numerology = DEFAULT_NUMEROLOGY) -> "ChannelEstimator":
        header = ParamStore().load(path, strict=False)
        est = cls(layout, numerology, int(header.meta.get("width", 16)), int(header.meta.get("blocks", 3)))
        est.store.load(path)
        est.store.freeze()
        return est


def estimate(estimator: ChannelEstimator, ls_grid: np.ndarray) -> ChannelTensor:
    nm = estimator.numerology
    real = estimator.forward_real(ls_grid)
    if real.ndim != 3:
        raise ShapeError("estimate takes a single LS grid; use forward_real for batches")
    return ChannelTensor(from_real_layout(real, nm.n_rx, nm.n_tx))


def train_estimator(dataset: Union[ChannelDataset, np.ndarray], layout: PilotLayout, config: EstimatorConfig,
                    seed: int, pilot_value: complex = 1.0, numerology: Numerology = DEFAULT_NUMEROLOGY,
                    component: str = "estimator") -> ChannelEstimator:
    """Minimizes the MSE between the estimate from noisy LS pilots and the true channel."""
    h = dataset.h if isinstance(dataset, ChannelDataset) else np.asarray(dataset)
    if len(h) == 0:
        raise EstimationError("train_estimator: empty dataset")
    rng = np.random.default_rng(seed)
    est = ChannelEstimator(layout, numerology, config.width, config.blocks, rng=np.random.default_rng(rng.integers(2 ** 63)))
    target = to_real_layout(h)
    history: List[float] = []
    for epoch in range(config.epochs):
        losses = []
        for idx in minibatches(len(h), config.batch_size, rng):
            ls = ls_estimate(transmit_pilots(h[idx], layout, pilot_value, config.train_snr_db, rng=rng),
                             layout, pilot_value)
            est.store.zero_grad()
            loss = loss_mse(est(ls), target[idx])
            losses.append(check_finite_loss(loss, component))
            loss.backward()
            adam_step(est.store, est.store.grads(), config.lr)
        history.append(float(np.mean(losses)))
        log_epoch(log, component, epoch, loss=history[-1])
    check_not_diverged(history, component)
    est.store.meta["trained"] = 1.0
    est.store.freeze()
    return est


def nmse(h_true: Union[ChannelTensor, np.ndarray], h_est: Union[ChannelTensor, np.ndarray]) -> float:
    """10 log10(||H - H_est||^2 / ||H||^2), floored at -100 dB."""
    a = h_true.h if isinstance(h_true, ChannelTensor) else np.asarray(h_true)
    b = h_est.h if isinstance(h_est, ChannelTensor) else np.asarray(h_est)
    if a.shape != b.shape:
        raise ShapeError(f"nmse: shapes differ {a.shape} vs {b.shape}")
    power = float(np.sum(np.abs(a) ** 2))
    if power == 0:
        raise EstimationError("nmse: true channel has zero power")
    err = float(np.sum(np.abs(a - b) ** 2))
    if err == 0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(err / power), NMSE_FLOOR_DB)


# ---- knowledge map -----------------------------------------------------------

@dataclass
class EstimatorEntry:
    key: Tuple[int, int]  # (region id, velocity bin); (0, -1) for the fallback
    estimator: ChannelEstimator
    provenance: dict = field(default_factory=dict)


def entry_name(key: Tuple[int, int]) -> str:
    return "fallback" if key[1] < 0 else f"region{key[0]}_bin{key[1]}"


@dataclass
class KnowledgeMap:
    kind: str
    regions: List[RegionSpec]
    fallback: EstimatorEntry
    entries: Dict[Tuple[int, int], EstimatorEntry] = field(default_factory=dict)

    def add(self, entry: EstimatorEntry) -> None:
        if entry.key in self.entries:
            raise KnowledgeMapError(f"duplicate knowledge-map key {entry.key}")
        self.entries[entry.key] = entry

    def region_of(self, position: Tuple[float, float]) -> Optional[RegionSpec]:
        """Nearest region centre among regions containing the position; ties go to the lower id."""
        x, y = position
        inside = [(math.hypot(x - r.center[0], y - r.center[1]), r.id, r) for r in self.regions
                  if math.hypot(x - r.center[0], y - r.center[1]) <= r.radius]
        return min(inside, key=lambda item: item[:2])[2] if inside else None

    def select(self, user: UserState) -> EstimatorEntry:
        region = self.region_of(user.position)
        vbin = velocity_bin(user.speed)
        if region is None or vbin is None:
            return self.fallback
        return self.entries.get((region.id, vbin), self.fallback)

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"kind": self.kind,
                 "regions": [{"id": r.id, "center": list(r.center), "radius": r.radius, "los": r.los,
                              "cluster_count": r.cluster_count, "delay_spread_ns": list(r.delay_spread_range)}
                             for r in self.regions],
                 "fallback": {"file": "fallback.slnn", "provenance": self.fallback.provenance},
                 "entries": []}
        self.fallback.estimator.save(directory / "fallback.slnn")
        for (region_id, vbin), entry in sorted(self.entries.items()):
            name = f"region{region_id}_bin{vbin}.slnn"
            entry.estimator.save(directory / name)
            index["entries"].append({"region": region_id, "bin": vbin, "file": name, "provenance": entry.provenance})
        (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory: Path, layout: PilotLayout, numerology: Numerology = DEFAULT_NUMEROLOGY) -> "KnowledgeMap":
        directory = Path(directory)
        try:
            index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise KnowledgeMapError(f"no knowledge map at {directory}") from e
        regions = [RegionSpec(r["id"], tuple(r["center"]), r["radius"], r["los"], r["cluster_count"],
                              tuple(r["delay_spread_ns"])) for r in index["regions"]]
        fallback = EstimatorEntry((0, -1), ChannelEstimator.load(directory / index["fallback"]["file"], layout, numerology),
                                  index["fallback"].get("provenance", {}))
        kmap = cls(index["kind"], regions, fallback)
        for e in index["entries"]:
            est = ChannelEstimator.load(directory / e["file"], layout, numerology)
            kmap.add(EstimatorEntry((e["region"], e["bin"]), est, e.get("provenance", {})))
        return kmap

    def describe(self) -> dict:
        return {"kind": self.kind,
                "entries": [{"region": k[0], "bin": k[1], "provenance": e.provenance}
                            for k, e in sorted(self.entries.items())],
                "fallback": bool(self.fallback is not None)}


def scenario_dataset(kind: str, scenario: Scenario, cdm: Optional[ChannelDiffusion], n: int, seed: int,
                     layout: PilotLayout, pilot_value: complex, ls_snr_db: float,
                     numerology: Numerology = DEFAULT_NUMEROLOGY) -> Tuple[ChannelDataset, dict]:
    """Training set for one map entry and the provenance describing its condition."""
    rng = np.random.default_rng(seed)
    if kind == "true":
        ds = scenario.draw(n, int(rng.integers(2 ** 63)), numerology)
        ds.h = normalize_ensemble(ds.h)
        return ds, {"type": "true", "scenario": scenario.name, "n": n}
    if cdm is None or cdm.kind != kind:
        raise KnowledgeMapError(f"a trained {kind!r} CDM is needed to build {kind!r} entries")
    if kind == "pv":
        users = sample_users(scenario.center, scenario.radius, scenario.speed_kmh, min(n, 64) or 1, rng)
        conds: List[Condition] = [PVCondition(u.position[0], u.position[1], u.speed) for u in users]
    else:
        measured = scenario.draw(4 * LS_SAMPLES, int(rng.integers(2 ** 63)), numerology).h
        conds = [ls_condition(measured[i * LS_SAMPLES:(i + 1) * LS_SAMPLES], layout, pilot_value, ls_snr_db, rng)
                 for i in range(4)]
    ds = synthesize_dataset(cdm, conds, n, int(rng.integers(2 ** 63)))
    provenance = {"scenario": scenario.name, "n": n, **conds[0].describe()}
    return ds, provenance


def build_knowledge_map(kind: str, scenarios: Sequence[Scenario], regions: Sequence[RegionSpec],
                        cdm: Optional[ChannelDiffusion], fallback: EstimatorEntry, n_generated: int,
                        estimator_config: EstimatorConfig, layout: PilotLayout, pilot_value: complex,
                        ls_snr_db: float, seed: int, threads: int = 1,
                        numerology: Numerology = DEFAULT_NUMEROLOGY) -> KnowledgeMap:
    """One entry per scenario, trained in parallel; keys come from the scenario centre and mid speed."""
    if kind not in KINDS:
        raise KnowledgeMapError(f"kind must be one of {KINDS}, got {kind!r}")
    kmap = KnowledgeMap(kind, list(regions), fallback)
    seeds = np.random.default_rng(seed).integers(0, 2 ** 63 - 1, size=(len(scenarios), 2))

    def build(i: int) -> EstimatorEntry:
        sc = scenarios[i]
        region = kmap.region_of(sc.center)
        if region is None:
            raise KnowledgeMapError(f"scenario {sc.name!r} centre {sc.center} lies in no region")
        vbin = velocity_bin(sc.mid_speed)
        if vbin is None:
            raise KnowledgeMapError(f"scenario {sc.name!r} mid speed {sc.mid_speed} km/h lies outside the velocity bins")
        ds, provenance = scenario_dataset(kind, sc, cdm, n_generated, int(seeds[i, 0]), layout, pilot_value,
                                          ls_snr_db, numerology)
        est = train_estimator(ds, layout, estimator_config, int(seeds[i, 1]), pilot_value, numerology,
                              component=f"estimator-{kind}-{sc.name}")
        return EstimatorEntry((region.id, vbin), est, provenance)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for entry in pool.map(build, range(len(scenarios))):
            kmap.add(entry)
    log.info("knowledge map built", extra={"kind": kind, "entries": len(kmap.entries)})
    return kmap
