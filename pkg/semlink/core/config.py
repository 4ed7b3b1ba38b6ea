import hashlib
import json
from pathlib import Path
from typing import Annotated, Any, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, NoDecode, SettingsConfigDict


class ConfigError(ValueError):
    pass


def split_csv(v: Any) -> Any:
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    return v


class Settings(BaseSettings):
    ENV: str = "dev"
    LOG_DIR: str = "logs"
    LOG_LEVEL: str = "INFO"
    LOG_MAX_BYTES: int = 1048576  # 1 MiB
    LOG_BACKUPS: int = 7

    ARTIFACT_DIR: str = "artifacts"
    THREADS: int = 1
    MASTER_SEED: int = 2025

    API_HOST: str = "127.0.0.1"
    API_PORT: int = 8000
    # which knowledge map the query service loads: pv, ls or true
    CEKM_KIND: str = "pv"
    # experiment config giving the link geometry the map was built for
    EXPERIMENT_CONFIG: str = ""

    # CORS: disabled unless set via env
    CORS_ORIGINS: Annotated[List[str], NoDecode] = []

    model_config = SettingsConfigDict(env_prefix="SEMLINK_", env_file=".env",
                                      env_file_encoding="utf-8", extra="ignore")

    @field_validator("CORS_ORIGINS", mode="before")
    @classmethod
    def _split_csv(cls, v):
        return split_csv(v)


settings = Settings()


# ---- Experiment configuration ------------------------------------------------

Variant = Literal["proposed-adaptive", "proposed-semantic", "proposed-compress", "jscc-baseline"]
Policy = Literal["cekm-pv", "cekm-ls", "mixed", "true-channel"]

ALL_VARIANTS: List[str] = ["proposed-adaptive", "proposed-semantic", "proposed-compress", "jscc-baseline"]
ALL_POLICIES: List[str] = ["cekm-pv", "cekm-ls", "mixed", "true-channel"]


class LinkConfig(BaseModel):
    carrier_hz: float = 2.655e9
    subcarrier_spacing_hz: float = 15e3
    n_subcarriers: int = 72
    n_symbols: int = 14
    n_rx: int = 2
    n_tx: int = 4
    pilot_symbols: List[int] = [0, 4, 9, 13]
    pilot_value: float = 1.0


class RegionConfig(BaseModel):
    id: int
    center: Tuple[float, float]
    radius: float = Field(100.0, gt=0)
    los: bool = False
    cluster_count: int = Field(ge=1)
    delay_spread_ns: Tuple[float, float]


class ScenarioConfig(BaseModel):
    name: str
    center: Tuple[float, float]
    radius: float = Field(10.0, gt=0)
    speed_kmh: Tuple[float, float]
    # replaces the region's delay-spread range (environment shift)
    delay_spread_ns: Optional[Tuple[float, float]] = None


class CdmConfig(BaseModel):
    width: int = 32
    timesteps: int = 100
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    samples_per_subregion: int = 256
    subregion_radius: float = 20.0
    speed_kmh: Tuple[float, float] = (12.0, 144.0)
    sample_steps: int = 10
    n_generated: int = 5120
    ls_snr_db: float = 10.0
    clip: float = 4.0


class EstimatorConfig(BaseModel):
    width: int = 16
    blocks: int = 3
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    train_snr_db: Optional[float] = 10.0
    n_test: int = 500


class CodecConfig(BaseModel):
    image_size: int = 64
    n_scenes: int = 1000
    min_scenes: int = 1000
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    noise_snr_db: Optional[Tuple[float, float]] = (-5.0, 20.0)
    jscc_epochs: int = 40
    jscc_snr_db: Tuple[float, float] = (-10.0, 20.0)


class ReconConfig(BaseModel):
    width: int = 32
    timesteps: int = 100
    base_epochs: int = 40
    branch_epochs: int = 10
    base_lr: float = 1e-3
    branch_lr: float = 1e-4
    batch_size: int = 16
    n_scenes: int = 512
    steps: int = 10
    dropout: float = Field(0.1, ge=0.0, le=1.0)
    snr_db: Tuple[float, float] = (-8.0, 12.0)
    # channel draws the branch training features are sent over
    n_channels: int = 256


class PrecodeConfig(BaseModel):
    # None: one block spanning the whole payload
    block_symbols: Optional[int] = None
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    snr_db: Tuple[float, float] = (-10.0, 10.0)
    n_channels: int = 256
    n_scenes: int = 256


class EvaluationConfig(BaseModel):
    n_scenes: int = 200
    n_test_channels: int = 500
    feature_seed: int = 7


def default_regions() -> List[RegionConfig]:
    return [
        RegionConfig(id=1, center=(100.0, 100.0), los=True, cluster_count=5, delay_spread_ns=(50.0, 100.0)),
        RegionConfig(id=2, center=(100.0, -100.0), los=False, cluster_count=20, delay_spread_ns=(400.0, 450.0)),
        RegionConfig(id=3, center=(-100.0, -100.0), los=False, cluster_count=20, delay_spread_ns=(950.0, 1000.0)),
        RegionConfig(id=4, center=(-100.0, 100.0), los=False, cluster_count=15, delay_spread_ns=(50.0, 100.0)),
    ]


def default_scenarios() -> List[ScenarioConfig]:
    return [
        ScenarioConfig(name="region1-extrapolation", center=(50.0, 50.0), speed_kmh=(192.0, 204.0)),
        ScenarioConfig(name="region1-delay-shift", center=(50.0, 50.0), speed_kmh=(72.0, 84.0),
                       delay_spread_ns=(950.0, 1000.0)),
        ScenarioConfig(name="region3-augmentation", center=(-150.0, -150.0), speed_kmh=(12.0, 24.0)),
    ]


class ExperimentConfig(BaseSettings):
    name: str = "default"
    scenario: str = "region1-extrapolation"
    regions: List[RegionConfig] = Field(default_factory=default_regions)
    scenarios: List[ScenarioConfig] = Field(default_factory=default_scenarios)
    snr_db: Annotated[List[float], NoDecode] = [-8.0, -4.0, 0.0, 4.0, 8.0, 12.0]
    seeds: Annotated[List[int], NoDecode] = [0]
    master_seed: int = 2025
    variants: Annotated[List[Variant], NoDecode] = Field(default_factory=lambda: list(ALL_VARIANTS))
    beta: float = Field(1.0, gt=0)
    betas: Annotated[List[float], NoDecode] = [0.1, 1.0, 10.0]
    estimator_policy: Policy = "cekm-pv"
    policies: Annotated[List[Policy], NoDecode] = Field(default_factory=lambda: list(ALL_POLICIES))
    output_dir: str = "runs/default"

    link: LinkConfig = Field(default_factory=LinkConfig)
    cdm: CdmConfig = Field(default_factory=CdmConfig)
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    recon: ReconConfig = Field(default_factory=ReconConfig)
    precode: PrecodeConfig = Field(default_factory=PrecodeConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    model_config = SettingsConfigDict(env_prefix="SEMLINK_", env_nested_delimiter="__", extra="ignore")

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings,
                                   dotenv_settings, file_secret_settings):
        # env beats file values
        return (env_settings, init_settings)

    @field_validator("snr_db", "seeds", "variants", "betas", "policies", mode="before")
    @classmethod
    def _split_csv(cls, v):
        return split_csv(v)

    @field_validator("snr_db")
    @classmethod
    def _snr_nonempty(cls, v):
        if not v:
            raise ValueError("snr_db must list at least one value")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds_nonempty(cls, v):
        if not v:
            raise ValueError("seeds must list at least one value")
        return v

    @field_validator("betas")
    @classmethod
    def _betas_positive(cls, v):
        if any(b <= 0 for b in v):
            raise ValueError("every beta must be > 0")
        return v

    @model_validator(mode="after")
    def _check_references(self):
        names = [s.name for s in self.scenarios]
        if len(set(names)) != len(names):
            raise ValueError("scenario names must be unique")
        if self.scenario not in names:
            raise ValueError(f"scenario {self.scenario!r} not in scenarios {names}")
        ids = [r.id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValueError("region ids must be unique")
        return self

    def scenario_config(self, name: Optional[str] = None) -> ScenarioConfig:
        name = name or self.scenario
        for s in self.scenarios:
            if s.name == name:
                return s
        raise ConfigError(f"unknown scenario {name!r}")


# ---- Loading -----------------------------------------------------------------

def deep_merge(base: dict, other: dict) -> dict:
    out = dict(base)
    for k, v in other.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _read_yaml(path: Path, chain: Tuple[Path, ...] = ()) -> dict:
    path = path.resolve()
    if path in chain:
        raise ConfigError(f"include cycle: {' -> '.join(str(p) for p in chain + (path,))}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    includes = data.pop("include", []) or []
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        merged = deep_merge(merged, _read_yaml(path.parent / inc, chain + (path,)))
    return deep_merge(merged, data)


def read_config_data(path: Optional[str]) -> dict:
    """Raw config mapping from a YAML file or a run manifest (its ``config`` object)."""
    if path is None:
        return {}
    p = Path(path)
    if p.suffix == ".json":
        try:
            manifest = json.loads(p.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read manifest {p}: {e}") from e
        if "config" not in manifest:
            raise ConfigError(f"{p} has no 'config' object")
        return manifest["config"]
    return _read_yaml(p)


def load_experiment_config(path: Optional[str] = None, **overrides: Any) -> ExperimentConfig:
    data = read_config_data(path)
    try:
        cfg = ExperimentConfig(**data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    # explicit CLI flags win over both file and env
    updates = {k: v for k, v in overrides.items() if v is not None}
    return cfg.model_copy(update=updates) if updates else cfg


def config_hash(cfg: BaseModel) -> str:
    payload = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
