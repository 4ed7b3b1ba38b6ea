"""Artifact directory layout and run manifests."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from semlink import __version__
from semlink.core.config import ExperimentConfig, config_hash

log = logging.getLogger(__name__)


class ArtifactMissing(FileNotFoundError):
    def __init__(self, path: Path, hint: str):
        super().__init__(f"missing artifact {path}; {hint}")
        self.path, self.hint = Path(path), hint


class ArtifactStore:
    """Named locations under one root; each trained component has a fixed relative path."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def cdm(self, kind: str) -> Path:
        return self.root / f"cdm_{kind}.slnn"

    def knowledge_map(self, kind: str) -> Path:
        return self.root / "cekm" / kind

    def fallback(self) -> Path:
        return self.root / "cekm" / "fallback.slnn"

    def codecs(self) -> Path:
        return self.root / "codecs.slnn"

    def jscc(self) -> Path:
        return self.root / "jscc.slnn"

    def scenes(self) -> Path:
        return self.root / "datasets" / "scenes.slsc"

    def channels(self, name: str) -> Path:
        return self.root / "datasets" / f"{name}.slch"

    def recon(self) -> Path:
        return self.root / "recon"

    def precode(self, beta: float) -> Path:
        return self.root / f"precode_beta{beta:g}.slnn"

    def require(self, path: Path, hint: str) -> Path:
        if not Path(path).exists():
            raise ArtifactMissing(path, hint)
        return Path(path)

    def listing(self) -> List[str]:
        if not self.root.exists():
            return []
        return sorted(str(p.relative_to(self.root)) for p in self.root.rglob("*") if p.is_file())


def sha256_path(path: Path) -> str:
    """Digest of a file, or of every file under a directory in sorted relative-path order."""
    path = Path(path)
    digest = hashlib.sha256()
    files: Iterable[Path] = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            digest.update(str(f.relative_to(path)).encode("utf-8"))
        digest.update(f.read_bytes())
    return digest.hexdigest()


def write_manifest(path: Path, command: str, cfg: ExperimentConfig, seeds: Dict[str, int],
                   artifacts: Dict[str, Path], outputs: Optional[Dict[str, Path]] = None) -> Path:
    """JSON manifest: no timestamps, so identical runs produce identical bytes."""
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": config_hash(cfg),
        "master_seed": cfg.master_seed,
        "seeds": seeds,
        "artifacts": {name: sha256_path(p) for name, p in sorted(artifacts.items()) if Path(p).exists()},
        "outputs": {name: sha256_path(p) for name, p in sorted((outputs or {}).items()) if Path(p).exists()},
        "config": cfg.model_dump(mode="json"),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("manifest written", extra={"manifest": str(path), "command": command})
    return path
