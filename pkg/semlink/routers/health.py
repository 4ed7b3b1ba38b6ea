from pathlib import Path

from fastapi import APIRouter, Response

from semlink import __version__
from semlink.core.config import settings
from semlink.storage.artifacts import ArtifactStore

router = APIRouter(tags=["health"])

@router.get("/healthz", summary="Liveness probe")
def healthz():
    return {"ok": True, "version": __version__}

@router.get("/readyz", summary="Readiness: the configured knowledge map is on disk")
def readyz(response: Response):
    index = ArtifactStore(Path(settings.ARTIFACT_DIR)).knowledge_map(settings.CEKM_KIND) / "index.json"
    ready = index.exists()
    if not ready:
        response.status_code = 503
    return {"ok": ready, "kind": settings.CEKM_KIND}
