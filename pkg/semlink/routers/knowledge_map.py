from __future__ import annotations

import logging
from functools import lru_cache
from pathlib import Path
from typing import List

import numpy as np
from fastapi import APIRouter, Depends, HTTPException, Query
from pydantic import BaseModel, Field

from semlink.core.config import ConfigError, load_experiment_config, settings
from semlink.services.cekm import EstimationError, KnowledgeMap, KnowledgeMapError, entry_name, estimate
from semlink.services.channel import UserState
from semlink.services.experiments import link_setup
from semlink.services.nn_core import ShapeError

router = APIRouter(prefix="/cekm", tags=["cekm"])
log = logging.getLogger(__name__)


class UserIn(BaseModel):
    x: float
    y: float
    speed: float = Field(ge=0)
    heading: float = 0.0


class EstimateReq(BaseModel):
    user: UserIn
    # LS pilot grid [Kp][Lp][Nr][Nt]
    real: List[List[List[List[float]]]]
    imag: List[List[List[List[float]]]]


class EstimateResp(BaseModel):
    key: str
    real: List[List[List[List[float]]]]
    imag: List[List[List[List[float]]]]


@lru_cache(maxsize=1)
def _load_map(artifact_dir: str, kind: str, config_path: str) -> KnowledgeMap:
    cfg = load_experiment_config(config_path or None)
    setup = link_setup(cfg, Path(artifact_dir))
    kmap = KnowledgeMap.load(setup.store.knowledge_map(kind), setup.layout, setup.numerology)
    log.info("knowledge map loaded", extra={"kind": kind, "entries": len(kmap.entries)})
    return kmap


def get_knowledge_map() -> KnowledgeMap:
    try:
        return _load_map(settings.ARTIFACT_DIR, settings.CEKM_KIND, settings.EXPERIMENT_CONFIG)
    except (KnowledgeMapError, ConfigError, FileNotFoundError) as e:
        raise HTTPException(status_code=503, detail=f"no knowledge map loaded: {e}")


@router.get("/entries", summary="Entries of the loaded knowledge map")
def entries(kmap: KnowledgeMap = Depends(get_knowledge_map)):
    return {"kind": kmap.kind,
            "entries": [{"key": entry_name(k), "region": k[0], "bin": k[1], "file": f"{entry_name(k)}.slnn",
                         "provenance": e.provenance} for k, e in sorted(kmap.entries.items())],
            "fallback": kmap.fallback is not None}


@router.get("/select", summary="Estimator chosen for a user state")
def select(x: float = Query(...), y: float = Query(...), speed: float = Query(..., ge=0),
           kmap: KnowledgeMap = Depends(get_knowledge_map)):
    entry = kmap.select(UserState((x, y), speed))
    return {"key": entry_name(entry.key), "provenance": entry.provenance}


@router.post("/estimate", response_model=EstimateResp, summary="Full-grid channel estimate from an LS pilot grid")
def estimate_grid(req: EstimateReq, kmap: KnowledgeMap = Depends(get_knowledge_map)):
    try:
        ls = np.asarray(req.real, dtype=np.float64) + 1j * np.asarray(req.imag, dtype=np.float64)
        entry = kmap.select(UserState((req.user.x, req.user.y), req.user.speed, req.user.heading))
        h = estimate(entry.estimator, ls).h
    except (ShapeError, EstimationError, ValueError) as e:
        raise HTTPException(status_code=422, detail=str(e))
    return EstimateResp(key=entry_name(entry.key), real=h.real.tolist(), imag=h.imag.tolist())
