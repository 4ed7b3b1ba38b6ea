"""Training orchestration and the three benchmark sweeps.

Each command reads an ``ExperimentConfig``, derives every seed from the
master seed with ``derive_seed`` and writes a manifest next to its outputs.
Monte-Carlo trials run on a thread pool; results are collected with
``Executor.map`` so rows come out in submission order whatever the thread
count, and a re-run with the same manifest writes the same CSV bytes.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from semlink.core.config import ExperimentConfig
from semlink.core.seeding import derive_seed
from semlink.services import semantic_codec
from semlink.services.adaptive_precode import PrecodeModel, train_joint
from semlink.services.cekm import (
    KINDS,
    ChannelDiffusion,
    EstimatorEntry,
    KnowledgeMap,
    build_knowledge_map,
    entry_name,
    nmse,
    train_cdm,
    train_estimator,
)
from semlink.services.channel import (
    ChannelDataset,
    Numerology,
    RegionSpec,
    Scenario,
    UserState,
    make_scenario,
    mixed_dataset,
    normalize_ensemble,
    save_dataset,
)
from semlink.services.metrics import FeatureExtractor, fid
from semlink.services.ofdm_link import PilotLayout
from semlink.services.pipeline import LinkContext, Models, estimate_channel, make_link_fn, run_link, score
from semlink.services.recon_diffusion import (
    SceneReconstructor,
    build_triples,
    train_base,
    train_branches,
    write_ppm,
)
from semlink.services.semantic_codec import (
    JsccCodec,
    Scene,
    SemanticCodec,
    generate_scene,
    generate_scenes,
    load_scenes,
    save_scenes,
)
from semlink.storage.artifacts import ArtifactStore, write_manifest

log = logging.getLogger(__name__)

CHANNEL_BENCH_COLUMNS = ["scenario", "policy", "snr_db", "seed", "nmse_db"]
E2E_COLUMNS = ["scenario", "variant", "snr_db", "seed", "ssim", "perceptual", "fid", "iou", "nmse_db"]
BETA_SWEEP_COLUMNS = ["scenario", "beta", "snr_db", "seed", "fid", "iou", "mse_se", "mse_co"]

# channel bench: the oracle row is the estimator trained on the scenario's own channels
BENCH_POLICY = {"cekm-pv": "cekm-pv", "cekm-ls": "cekm-ls", "mixed": "mixed", "true-channel": "cekm-true",
                "ls-interp": "ls-interp"}

HINT_CEKM = "run `python -m semlink build-cekm` first"
HINT_CODECS = "run `python -m semlink train-codecs` first"
HINT_RECON = "run `python -m semlink train-recon` first"
HINT_PRECODE = "run `python -m semlink train-precode` first"


@dataclass
class Setup:
    numerology: Numerology
    link: LinkContext
    regions: List[RegionSpec]
    scenarios: Dict[str, Scenario]
    store: ArtifactStore

    @property
    def layout(self) -> PilotLayout:
        return self.link.layout


def link_setup(cfg: ExperimentConfig, artifact_dir: Path) -> Setup:
    lc = cfg.link
    numerology = Numerology(lc.carrier_hz, lc.subcarrier_spacing_hz, lc.n_subcarriers, lc.n_symbols, lc.n_rx, lc.n_tx)
    layout = PilotLayout.for_numerology(numerology, lc.pilot_symbols)
    regions = [RegionSpec(r.id, tuple(r.center), r.radius, r.los, r.cluster_count, tuple(r.delay_spread_ns))
               for r in cfg.regions]
    scenarios = {s.name: make_scenario(s.name, regions, tuple(s.center), s.radius, tuple(s.speed_kmh),
                                       tuple(s.delay_spread_ns) if s.delay_spread_ns else None)
                 for s in cfg.scenarios}
    return Setup(numerology, LinkContext(numerology, layout, complex(lc.pilot_value)), regions, scenarios,
                 ArtifactStore(Path(artifact_dir)))


def scenario_channels(setup: Setup, cfg: ExperimentConfig, n: int, *labels: object) -> ChannelDataset:
    """``n`` channels of the configured scenario, normalized to unit mean power."""
    ds = setup.scenarios[cfg.scenario].draw(n, derive_seed(cfg.master_seed, "channels", cfg.scenario, *labels),
                                            setup.numerology)
    ds.h = normalize_ensemble(ds.h)
    return ds


def _manifest_path(root: Path, command: str) -> Path:
    return Path(root) / "manifests" / f"{command}.json"


def _load_scenes(setup: Setup, cfg: ExperimentConfig, n: int) -> List[Scene]:
    path = setup.store.scenes()
    if path.exists():
        scenes = load_scenes(path)
        if len(scenes) >= n:
            return scenes[:n]
    return generate_scenes(n, derive_seed(cfg.master_seed, "scenes"), cfg.codec.image_size)


# ---- training ----------------------------------------------------------------

def run_build_cekm(cfg: ExperimentConfig, artifact_dir: Path, threads: int = 1) -> Dict[str, Path]:
    """CDMs (PV and LS), the mixed-dataset fallback and the pv/ls/true knowledge maps."""
    setup = link_setup(cfg, artifact_dir)
    store, seeds = setup.store, {}
    cdms: Dict[str, ChannelDiffusion] = {}
    for kind in ("pv", "ls"):
        seeds[f"cdm-{kind}"] = derive_seed(cfg.master_seed, "cdm", kind)
        cdms[kind] = train_cdm(kind, setup.regions, cfg.cdm, setup.layout, setup.link.pilot_value,
                               seeds[f"cdm-{kind}"], setup.numerology)
        cdms[kind].save(store.cdm(kind))

    seeds["fallback"] = derive_seed(cfg.master_seed, "fallback")
    mixed = mixed_dataset(setup.regions, cfg.cdm.samples_per_subregion, seeds["fallback"], cfg.cdm.subregion_radius,
                          tuple(cfg.cdm.speed_kmh), setup.numerology)
    mixed.h = normalize_ensemble(mixed.h)
    save_dataset(store.channels("mixed"), mixed)
    fallback_est = train_estimator(mixed, setup.layout, cfg.estimator, derive_seed(cfg.master_seed, "fallback", "fit"),
                                   setup.link.pilot_value, setup.numerology, component="estimator-mixed")
    fallback_est.save(store.fallback())
    fallback = EstimatorEntry((0, -1), fallback_est, {"type": "mixed", "n": len(mixed)})

    artifacts = {"cdm_pv": store.cdm("pv"), "cdm_ls": store.cdm("ls"), "fallback": store.fallback()}
    for kind in KINDS:
        seeds[f"map-{kind}"] = derive_seed(cfg.master_seed, "map", kind)
        kmap = build_knowledge_map(kind, list(setup.scenarios.values()), setup.regions, cdms.get(kind), fallback,
                                   cfg.cdm.n_generated, cfg.estimator, setup.layout, setup.link.pilot_value,
                                   cfg.cdm.ls_snr_db, seeds[f"map-{kind}"], threads, setup.numerology)
        kmap.save(store.knowledge_map(kind))
        artifacts[f"cekm_{kind}"] = store.knowledge_map(kind)
    write_manifest(_manifest_path(store.root, "build-cekm"), "build-cekm", cfg, seeds, artifacts)
    return artifacts


def run_train_codecs(cfg: ExperimentConfig, artifact_dir: Path) -> Dict[str, Path]:
    setup = link_setup(cfg, artifact_dir)
    store = setup.store
    seeds = {"scenes": derive_seed(cfg.master_seed, "scenes"), "codecs": derive_seed(cfg.master_seed, "codecs"),
             "jscc": derive_seed(cfg.master_seed, "jscc")}
    scenes = generate_scenes(cfg.codec.n_scenes, seeds["scenes"], cfg.codec.image_size)
    save_scenes(store.scenes(), scenes)
    codec, history = semantic_codec.train_codecs(scenes, cfg.codec, seeds["codecs"])
    codec.save(store.codecs())
    log.info("codecs trained", extra={"component": "codecs", "epochs": len(history["ce"]),
                                      "seg_accuracy": round(semantic_codec.seg_accuracy(codec, scenes[:64]), 4)})
    jscc, _ = semantic_codec.train_jscc(scenes, cfg.codec, seeds["jscc"])
    jscc.save(store.jscc())
    artifacts = {"scenes": store.scenes(), "codecs": store.codecs(), "jscc": store.jscc()}
    write_manifest(_manifest_path(store.root, "train-codecs"), "train-codecs", cfg, seeds, artifacts)
    return artifacts


def run_train_recon(cfg: ExperimentConfig, artifact_dir: Path) -> Dict[str, Path]:
    """Scene DDPM, then the two condition branches on features received over simulated links."""
    setup = link_setup(cfg, artifact_dir)
    store = setup.store
    codec = SemanticCodec.load(store.require(store.codecs(), HINT_CODECS))
    seeds = {"init": derive_seed(cfg.master_seed, "recon", "init"), "base": derive_seed(cfg.master_seed, "recon", "base"),
             "triples": derive_seed(cfg.master_seed, "recon", "triples"),
             "branches": derive_seed(cfg.master_seed, "recon", "branches")}
    scenes = _load_scenes(setup, cfg, cfg.recon.n_scenes)
    recon = SceneReconstructor(cfg.codec.image_size, cfg.recon, np.random.default_rng(seeds["init"]))
    train_base(recon, scenes, seeds["base"])
    channels = scenario_channels(setup, cfg, cfg.recon.n_channels, "recon")
    link = make_link_fn([channels.tensor(i) for i in range(len(channels))], setup.link)
    triples = build_triples(scenes, codec, link, tuple(cfg.recon.snr_db), seeds["triples"])
    train_branches(recon, triples, seeds["branches"])
    recon.save(store.recon())
    artifacts = {"recon": store.recon(), "codecs": store.codecs()}
    write_manifest(_manifest_path(store.root, "train-recon"), "train-recon", cfg, seeds, artifacts)
    return artifacts


def precode_features(codec: SemanticCodec, scenes: Sequence[Scene]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.stack([codec.encode_se(s.seg) for s in scenes]),
            np.stack([codec.encode_co(s.low_res()) for s in scenes]))


def run_train_precode(cfg: ExperimentConfig, artifact_dir: Path, threads: int = 1) -> Dict[str, Path]:
    """One adaptive precoder per beta; every beta sees the same data, channels and noise."""
    setup = link_setup(cfg, artifact_dir)
    store = setup.store
    codec = SemanticCodec.load(store.require(store.codecs(), HINT_CODECS))
    features = precode_features(codec, _load_scenes(setup, cfg, cfg.precode.n_scenes))
    ds = scenario_channels(setup, cfg, cfg.precode.n_channels, "precode")
    channels = [ds.tensor(i) for i in range(len(ds))]
    seeds = {"init": derive_seed(cfg.master_seed, "precode", "init"), "fit": derive_seed(cfg.master_seed, "precode")}
    n_symbols = features[0].shape[1] + features[1].shape[1]

    def fit(beta: float) -> Path:
        model = PrecodeModel(n_symbols, beta, cfg.precode.block_symbols, np.random.default_rng(seeds["init"]))
        train_joint(model, features, channels, cfg.precode, seeds["fit"], setup.numerology)
        return model.save(store.precode(beta))

    betas = sorted(set(cfg.betas) | {cfg.beta})
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        paths = list(pool.map(fit, betas))
    artifacts = {f"precode_beta{b:g}": p for b, p in zip(betas, paths)}
    write_manifest(_manifest_path(store.root, "train-precode"), "train-precode", cfg, seeds, artifacts)
    return artifacts


# ---- loading -----------------------------------------------------------------

def load_maps(setup: Setup, kinds: Iterable[str]) -> Dict[str, KnowledgeMap]:
    store = setup.store
    return {kind: KnowledgeMap.load(store.require(store.knowledge_map(kind), HINT_CEKM), setup.layout,
                                    setup.numerology)
            for kind in kinds}


def map_kinds(policies: Iterable[str], bench: bool = False) -> List[str]:
    """Knowledge maps needed by ``policies``; ``mixed`` needs any one map for its fallback."""
    kinds: List[str] = []
    for policy in policies:
        kind = {"cekm-pv": "pv", "cekm-ls": "ls"}.get(policy)
        if policy == "true-channel" and bench:
            kind = "true"
        if kind and kind not in kinds:
            kinds.append(kind)
    if "mixed" in policies and not kinds:
        kinds.append("pv")
    return kinds


def load_models(cfg: ExperimentConfig, setup: Setup, variants: Iterable[str], policies: Iterable[str],
                betas: Iterable[float] = ()) -> Models:
    store, variants = setup.store, list(variants)
    models = Models(features=FeatureExtractor(cfg.evaluation.feature_seed), recon_steps=cfg.recon.steps)
    models.maps = load_maps(setup, map_kinds(policies))
    if any(v != "jscc-baseline" for v in variants):
        models.codec = SemanticCodec.load(store.require(store.codecs(), HINT_CODECS))
        recon_dir = store.require(store.recon(), HINT_RECON)
        models.recon = SceneReconstructor.load(recon_dir, cfg.recon)
    if "jscc-baseline" in variants:
        models.jscc = JsccCodec.load(store.require(store.jscc(), HINT_CODECS))
    if "proposed-adaptive" in variants:
        for beta in set(betas) | {cfg.beta}:
            models.precode[beta] = PrecodeModel.load(store.require(store.precode(beta), HINT_PRECODE))
    return models


# ---- benches -----------------------------------------------------------------

def mean_db(values_db: Sequence[float]) -> float:
    """dB of the mean linear value."""
    return 10.0 * math.log10(float(np.mean(np.power(10.0, np.asarray(values_db) / 10.0))))


def _fmt(row: dict) -> dict:
    return {k: f"{v:.6f}" if isinstance(v, float) else v for k, v in row.items()}


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(_fmt(row))
    return path


def _map_rows(fn: Callable, trials: Sequence, threads: int) -> List:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(fn, trials))


def run_channel_bench(cfg: ExperimentConfig, artifact_dir: Path, out_dir: Path, threads: int = 1) -> Path:
    """NMSE (dB of mean linear error) per policy and SNR on held-out scenario channels.

    Every policy sees the same pilot noise for the same channel, seed and SNR.
    """
    setup = link_setup(cfg, artifact_dir)
    policies = list(dict.fromkeys(list(cfg.policies) + ["ls-interp"]))
    models = Models(maps=load_maps(setup, map_kinds(policies, bench=True)))
    test = scenario_channels(setup, cfg, cfg.evaluation.n_test_channels, "test", "bench")
    channels = [test.tensor(i) for i in range(len(test))]
    trials = [(seed, snr, policy) for seed in cfg.seeds for snr in cfg.snr_db for policy in policies]

    def trial(args) -> dict:
        seed, snr, policy = args
        errors = []
        for i, h in enumerate(channels):
            rng = np.random.default_rng(derive_seed(cfg.master_seed, "bench-channel", seed, snr, i))
            h_est = estimate_channel(h, test.users[i], BENCH_POLICY[policy], models, setup.link, snr, rng)
            errors.append(nmse(h, h_est))
        return {"scenario": cfg.scenario, "policy": policy, "snr_db": float(snr), "seed": seed,
                "nmse_db": mean_db(errors)}

    rows = _map_rows(trial, trials, threads)
    out = write_csv(Path(out_dir) / "channel_bench.csv", CHANNEL_BENCH_COLUMNS, rows)
    _bench_manifest(cfg, setup, out_dir, "bench-channel", out,
                    {f"cekm_{k}": setup.store.knowledge_map(k) for k in models.maps})
    return out


def _bench_manifest(cfg: ExperimentConfig, setup: Setup, out_dir: Path, command: str, output: Path,
                    artifacts: Dict[str, Path]) -> Path:
    seeds = {str(s): derive_seed(cfg.master_seed, command, s) for s in cfg.seeds}
    path = write_manifest(Path(out_dir) / f"{command}.manifest.json", command, cfg, seeds, artifacts,
                          {output.name: output})
    log.info("run finished", extra={"command": command, "csv": str(output), "manifest": str(path)})
    return path


@dataclass
class _Trial:
    image: np.ndarray
    metrics: Dict[str, float]
    nmse_db: float
    mse_se: float = 0.0
    mse_co: float = 0.0


def _scene_trials(cfg: ExperimentConfig, setup: Setup, models: Models, scenes: Sequence[Scene],
                  test: ChannelDataset, variant: str, policy: str, snr: float, seed: int, beta: float,
                  label: str) -> List[_Trial]:
    def one(j: int) -> _Trial:
        scene = scenes[j]
        i = j % len(test)
        outcome = run_link(scene, test.tensor(i), test.users[i], variant, policy, snr, models, setup.link,
                           derive_seed(cfg.master_seed, label, seed, snr, j), beta)
        trial = _Trial(outcome.image, score(scene, outcome, models.features), outcome.nmse_db)
        if outcome.f_se is not None:
            trial.mse_se = float(np.mean(np.abs(outcome.f_se - models.codec.encode_se(scene.seg)) ** 2))
            trial.mse_co = float(np.mean(np.abs(outcome.f_co - models.codec.encode_co(scene.low_res())) ** 2))
        return trial

    # scenes run sequentially inside a row; rows are the parallel unit
    return [one(j) for j in range(len(scenes))]


def _eval_data(cfg: ExperimentConfig, setup: Setup) -> Tuple[List[Scene], ChannelDataset]:
    scenes = generate_scenes(cfg.evaluation.n_scenes, derive_seed(cfg.master_seed, "scenes", "test"),
                             cfg.codec.image_size)
    return scenes, scenario_channels(setup, cfg, cfg.evaluation.n_test_channels, "test", "e2e")


def _aggregate(trials: Sequence[_Trial], scenes: Sequence[Scene], fx: FeatureExtractor) -> Dict[str, float]:
    return {"ssim": float(np.mean([t.metrics["ssim"] for t in trials])),
            "perceptual": float(np.mean([t.metrics["perceptual"] for t in trials])),
            "fid": fid(np.stack([s.image for s in scenes]), np.stack([t.image for t in trials]), fx),
            "iou": float(np.mean([t.metrics["iou"] for t in trials])),
            "nmse_db": mean_db([t.nmse_db for t in trials]),
            "mse_se": float(np.mean([t.mse_se for t in trials])),
            "mse_co": float(np.mean([t.mse_co for t in trials]))}


def _used_artifacts(setup: Setup, models: Models) -> Dict[str, Path]:
    store = setup.store
    artifacts = {f"cekm_{k}": store.knowledge_map(k) for k in models.maps}
    if models.codec is not None:
        artifacts.update(codecs=store.codecs(), recon=store.recon())
    if models.jscc is not None:
        artifacts["jscc"] = store.jscc()
    artifacts.update({f"precode_beta{b:g}": store.precode(b) for b in models.precode})
    return artifacts


def run_e2e(cfg: ExperimentConfig, artifact_dir: Path, out_dir: Path, threads: int = 1) -> Path:
    """Image metrics per variant and SNR through the full chain under ``cfg.estimator_policy``."""
    setup = link_setup(cfg, artifact_dir)
    models = load_models(cfg, setup, cfg.variants, [cfg.estimator_policy])
    scenes, test = _eval_data(cfg, setup)
    trials = [(seed, snr, variant) for seed in cfg.seeds for snr in cfg.snr_db for variant in cfg.variants]

    def row(args) -> dict:
        seed, snr, variant = args
        results = _scene_trials(cfg, setup, models, scenes, test, variant, cfg.estimator_policy, snr, seed,
                                cfg.beta, "e2e")
        agg = _aggregate(results, scenes, models.features)
        return {"scenario": cfg.scenario, "variant": variant, "snr_db": float(snr), "seed": seed,
                **{k: agg[k] for k in ("ssim", "perceptual", "fid", "iou", "nmse_db")}}

    out = write_csv(Path(out_dir) / "e2e.csv", E2E_COLUMNS, _map_rows(row, trials, threads))
    _bench_manifest(cfg, setup, out_dir, "bench-e2e", out, _used_artifacts(setup, models))
    return out


def run_beta_sweep(cfg: ExperimentConfig, artifact_dir: Path, out_dir: Path, threads: int = 1) -> Path:
    """FID, IoU and received-feature MSEs of the adaptive variant per beta."""
    setup = link_setup(cfg, artifact_dir)
    models = load_models(cfg, setup, ["proposed-adaptive"], [cfg.estimator_policy], cfg.betas)
    scenes, test = _eval_data(cfg, setup)
    trials = [(seed, snr, beta) for seed in cfg.seeds for snr in cfg.snr_db for beta in cfg.betas]

    def row(args) -> dict:
        seed, snr, beta = args
        results = _scene_trials(cfg, setup, models, scenes, test, "proposed-adaptive", cfg.estimator_policy, snr,
                                seed, beta, "sweep-beta")
        agg = _aggregate(results, scenes, models.features)
        return {"scenario": cfg.scenario, "beta": float(beta), "snr_db": float(snr), "seed": seed,
                **{k: agg[k] for k in ("fid", "iou", "mse_se", "mse_co")}}

    out = write_csv(Path(out_dir) / "beta_sweep.csv", BETA_SWEEP_COLUMNS, _map_rows(row, trials, threads))
    _bench_manifest(cfg, setup, out_dir, "sweep-beta", out, _used_artifacts(setup, models))
    return out


def inspect_artifacts(cfg: ExperimentConfig, artifact_dir: Path) -> dict:
    """Artifact listing plus the entries of every knowledge map found."""
    setup = link_setup(cfg, artifact_dir)
    store = setup.store
    maps = {kind: KnowledgeMap.load(store.knowledge_map(kind), setup.layout, setup.numerology).describe()
            for kind in KINDS if (store.knowledge_map(kind) / "index.json").exists()}
    return {"root": str(store.root), "files": store.listing(), "maps": maps}


def query_map(cfg: ExperimentConfig, artifact_dir: Path, kind: str, position: Tuple[float, float], speed_kmh: float,
              heading: float = 0.0) -> dict:
    """Entry the ``kind`` knowledge map selects for one user state."""
    setup = link_setup(cfg, artifact_dir)
    kmap = load_maps(setup, [kind])[kind]
    entry = kmap.select(UserState(position, speed_kmh, heading))
    located = kmap.region_of(position)
    fallback = entry.key[1] < 0
    return {"kind": kind, "entry": entry_name(entry.key),
            "region": None if fallback else entry.key[0],
            "velocity_bin": None if fallback else entry.key[1],
            "located_in": located.id if located else None,
            "condition": entry.provenance.get("type", "mixed" if fallback else kind),
            "provenance": entry.provenance}


def reconstruct_scene(cfg: ExperimentConfig, artifact_dir: Path, out_dir: Path, scene_seed: int, snr_db: float,
                      variant: str) -> Dict[str, Path]:
    """One generated scene through the chain under ``cfg.estimator_policy``; original and received as PPM."""
    setup = link_setup(cfg, artifact_dir)
    models = load_models(cfg, setup, [variant], [cfg.estimator_policy])
    scene = generate_scene(scene_seed, cfg.codec.image_size)
    test = scenario_channels(setup, cfg, 1, "reconstruct", scene_seed)
    outcome = run_link(scene, test.tensor(0), test.users[0], variant, cfg.estimator_policy, snr_db, models,
                       setup.link, derive_seed(cfg.master_seed, "reconstruct", scene_seed, snr_db), cfg.beta)
    out_dir = Path(out_dir)
    paths = {"original": write_ppm(out_dir / f"scene{scene_seed}_original.ppm", scene.image),
             "received": write_ppm(out_dir / f"scene{scene_seed}_{variant}_{snr_db:g}dB.ppm", outcome.image)}
    log.info("scene reconstructed", extra={"variant": variant, "snr_db": snr_db, "nmse_db": round(outcome.nmse_db, 3),
                                           **{k: round(v, 4) for k, v in score(scene, outcome, models.features).items()}})
    return paths
