"""``semlink`` command group: training, benches, inspection and the query service."""
from __future__ import annotations

import functools
import json
import logging
import uuid
from pathlib import Path
from typing import Optional

import click

from semlink import __version__
from semlink.core.config import ConfigError, ExperimentConfig, load_experiment_config, settings
from semlink.core.logging import set_run_id, setup_logging
from semlink.services import experiments
from semlink.services.cekm import KnowledgeMapError
from semlink.services.nn_core import NonFiniteGradient, NonFiniteLoss, TrainingDiverged, UntrainedModel
from semlink.services.pipeline import StageFailed
from semlink.storage.artifacts import ArtifactMissing
from semlink.storage.containers import ContainerError

log = logging.getLogger("semlink.cli")


def _errors(func):
    """Domain errors become ClickExceptions carrying a hint."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ArtifactMissing as e:
            raise click.ClickException(f"{e.path} not found; {e.hint}") from e
        except ConfigError as e:
            raise click.ClickException(f"invalid config: {e}") from e
        except ContainerError as e:
            raise click.ClickException(f"unreadable artifact: {e}; rebuild it") from e
        except StageFailed as e:
            raise click.ClickException(f"pipeline stage {e.stage!r} failed: {e.cause}") from e
        except UntrainedModel as e:
            raise click.ClickException(f"{e}; run the matching training command first") from e
        except (TrainingDiverged, NonFiniteLoss, NonFiniteGradient) as e:
            raise click.ClickException(f"{e}; lower the learning rate in the config") from e
        except KnowledgeMapError as e:
            raise click.ClickException(f"knowledge map: {e}") from e

    return wrapper


def common_options(func):
    func = click.option("--threads", type=int, default=None, help="Worker threads (default: SEMLINK_THREADS).")(func)
    func = click.option("--out", type=click.Path(file_okay=False), default=None,
                        help="Output directory for CSVs and manifests.")(func)
    func = click.option("--seed", type=int, default=None, help="Master seed override.")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                        help="YAML config or a run manifest to replay.")(func)
    return func


class Run:
    def __init__(self, cfg: ExperimentConfig, artifact_dir: Path, out: Path, threads: int):
        self.cfg, self.artifact_dir, self.out, self.threads = cfg, artifact_dir, out, threads


def _start(command: str, config_path: Optional[str], seed: Optional[int], out: Optional[str],
           threads: Optional[int]) -> Run:
    set_run_id(uuid.uuid4().hex[:12])
    setup_logging()
    cfg = load_experiment_config(config_path, master_seed=seed)
    run = Run(cfg, Path(settings.ARTIFACT_DIR), Path(out or cfg.output_dir), threads or settings.THREADS)
    log.info("run started", extra={"command": command, "config": config_path, "master_seed": cfg.master_seed,
                                   "threads": run.threads})
    return run


@click.group()
@click.version_option(version=__version__, prog_name="semlink")
def cli():
    """Semantic image link with a channel estimation knowledge map."""


@cli.command("build-cekm")
@common_options
@_errors
def build_cekm(config_path, seed, out, threads):
    """Train the channel diffusion models and build the pv/ls/true knowledge maps."""
    run = _start("build-cekm", config_path, seed, out, threads)
    artifacts = experiments.run_build_cekm(run.cfg, run.artifact_dir, run.threads)
    click.echo(json.dumps({k: str(v) for k, v in artifacts.items()}, indent=2, sort_keys=True))


@cli.command("train-codecs")
@common_options
@_errors
def train_codecs(config_path, seed, out, threads):
    """Train the semantic/compression codec pair and the JSCC baseline."""
    run = _start("train-codecs", config_path, seed, out, threads)
    artifacts = experiments.run_train_codecs(run.cfg, run.artifact_dir)
    click.echo(json.dumps({k: str(v) for k, v in artifacts.items()}, indent=2, sort_keys=True))


@cli.command("train-recon")
@common_options
@_errors
def train_recon(config_path, seed, out, threads):
    """Train the scene diffusion model and its two condition branches."""
    run = _start("train-recon", config_path, seed, out, threads)
    artifacts = experiments.run_train_recon(run.cfg, run.artifact_dir)
    click.echo(json.dumps({k: str(v) for k, v in artifacts.items()}, indent=2, sort_keys=True))


@cli.command("train-precode")
@common_options
@_errors
def train_precode(config_path, seed, out, threads):
    """Train one adaptive precoder per beta."""
    run = _start("train-precode", config_path, seed, out, threads)
    artifacts = experiments.run_train_precode(run.cfg, run.artifact_dir, run.threads)
    click.echo(json.dumps({k: str(v) for k, v in artifacts.items()}, indent=2, sort_keys=True))


@cli.command("bench-channel")
@common_options
@_errors
def bench_channel(config_path, seed, out, threads):
    """NMSE versus SNR per estimator policy."""
    run = _start("bench-channel", config_path, seed, out, threads)
    click.echo(str(experiments.run_channel_bench(run.cfg, run.artifact_dir, run.out, run.threads)))


@cli.command("bench-e2e")
@common_options
@_errors
def bench_e2e(config_path, seed, out, threads):
    """Image metrics versus SNR per transmission variant."""
    run = _start("bench-e2e", config_path, seed, out, threads)
    click.echo(str(experiments.run_e2e(run.cfg, run.artifact_dir, run.out, run.threads)))


@cli.command("sweep-beta")
@common_options
@_errors
def sweep_beta(config_path, seed, out, threads):
    """FID, IoU and feature MSEs of the adaptive variant per beta."""
    run = _start("sweep-beta", config_path, seed, out, threads)
    click.echo(str(experiments.run_beta_sweep(run.cfg, run.artifact_dir, run.out, run.threads)))


@cli.command("inspect")
@common_options
@_errors
def inspect(config_path, seed, out, threads):
    """List artifacts and knowledge-map entries."""
    run = _start("inspect", config_path, seed, out, threads)
    click.echo(json.dumps(experiments.inspect_artifacts(run.cfg, run.artifact_dir), indent=2, sort_keys=True))


@cli.command("query")
@common_options
@click.option("--x", "x", type=float, required=True, help="User x position in metres.")
@click.option("--y", "y", type=float, required=True, help="User y position in metres.")
@click.option("--speed-kmh", type=click.FloatRange(min=0.0), required=True)
@click.option("--heading", type=float, default=0.0, show_default=True, help="Radians.")
@click.option("--kind", type=click.Choice(["pv", "ls", "true"]), default=None,
              help="Map to query (default: SEMLINK_CEKM_KIND).")
@_errors
def query(config_path, seed, out, threads, x, y, speed_kmh, heading, kind):
    """Knowledge-map entry selected for a position and speed."""
    run = _start("query", config_path, seed, out, threads)
    result = experiments.query_map(run.cfg, run.artifact_dir, kind or settings.CEKM_KIND, (x, y), speed_kmh, heading)
    click.echo(json.dumps(result, indent=2, sort_keys=True))


@cli.command("reconstruct")
@common_options
@click.option("--scene-seed", type=int, default=0, show_default=True, help="Seed of the generated scene to send.")
@click.option("--snr", "snr_db", type=float, default=10.0, show_default=True)
@click.option("--variant", type=click.Choice(["proposed-adaptive", "proposed-semantic", "proposed-compress",
                                              "jscc-baseline"]), default="proposed-semantic", show_default=True)
@_errors
def reconstruct_cmd(config_path, seed, out, threads, scene_seed, snr_db, variant):
    """Send one generated scene through the link and write original and received images as PPM."""
    run = _start("reconstruct", config_path, seed, out, threads)
    paths = experiments.reconstruct_scene(run.cfg, run.artifact_dir, run.out, scene_seed, snr_db, variant)
    click.echo(json.dumps({k: str(v) for k, v in paths.items()}, indent=2, sort_keys=True))


@cli.command("serve")
@click.option("--host", default=None, help="Bind address (default: SEMLINK_API_HOST).")
@click.option("--port", type=int, default=None, help="Port (default: SEMLINK_API_PORT).")
def serve(host, port):
    """Run the knowledge-map query service."""
    import uvicorn

    uvicorn.run("semlink.main:app", host=host or settings.API_HOST, port=port or settings.API_PORT)
