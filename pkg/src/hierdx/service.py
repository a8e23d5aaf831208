"""HTTP reward service for external RL trainers.

Endpoints::

    POST /v1/score        ScoreRequest        -> RewardBreakdown
    POST /v1/score_batch  {"requests": [...]} -> {"results": [...]}  (input order)
    GET  /v1/health       version, format_version, taxonomy checksum
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Literal

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field, field_validator

from hierdx import __version__
from hierdx.reward import GRAN_SCALE, TAG_PRESETS, TagSet, score
from hierdx.taxonomy import MALIGNANCY_CATEGORIES, TaxonomyAnnotation, TaxonomyTree, canonical, load_taxonomy

FORMAT_VERSION = 1


class OptionModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    letter: str = Field(pattern=r"^[A-Z]$")
    label: str


class TagModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    open_think: str
    close_think: str
    open_answer: str
    close_answer: str


class ScoreRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    completion: str
    ground_truth_path: list[str]
    malignancy: str
    options: list[OptionModel] | None = None
    tag_set: str | TagModel = "rl"
    mode: Literal["strict", "lenient"] = "strict"
    ordered: bool = False

    @field_validator("tag_set")
    @classmethod
    def _known_preset(cls, v):
        if isinstance(v, str) and v not in TAG_PRESETS:
            raise ValueError(f"unknown tag preset {v!r}")
        return v


class BatchRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    requests: list[ScoreRequest]


class UnresolvableLabels(Exception):
    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RewardScorer:
    """Stateless scoring over an immutable taxonomy."""

    def __init__(self, tree: TaxonomyTree, gran_scale: float = GRAN_SCALE) -> None:
        self.tree = tree
        self.gran_scale = gran_scale

    def annotation(self, req: ScoreRequest) -> TaxonomyAnnotation:
        if not req.ground_truth_path:
            raise UnresolvableLabels("ground_truth_path must be non-empty")
        path = [canonical(l) for l in req.ground_truth_path]
        unknown = [l for l in path if l not in self.tree]
        if unknown:
            raise UnresolvableLabels(f"labels not in taxonomy: {unknown}")
        expected = self.tree.path_of(path[-1]).path
        if tuple(path) != expected:
            raise UnresolvableLabels(f"ground_truth_path is not the taxonomy path of {path[-1]!r}: {list(expected)}")
        malignancy = canonical(req.malignancy)
        if malignancy not in MALIGNANCY_CATEGORIES:
            raise UnresolvableLabels(f"unknown malignancy {req.malignancy!r}")
        return TaxonomyAnnotation(tuple(path), malignancy)

    def score(self, req: ScoreRequest) -> dict[str, Any]:
        truth = self.annotation(req)
        tags = req.tag_set if isinstance(req.tag_set, str) else TagSet(**req.tag_set.model_dump())
        options = {o.letter: o.label for o in req.options} if req.options else None
        return score(
            req.completion,
            truth,
            options=options,
            tags=tags,
            mode=req.mode,
            gran_scale=self.gran_scale,
            ordered=req.ordered,
        ).to_dict()


def create_app(
    taxonomy_path: str | Path,
    *,
    gran_scale: float = GRAN_SCALE,
    max_workers: int = 8,
) -> FastAPI:
    tree = load_taxonomy(taxonomy_path)
    checksum = file_checksum(taxonomy_path)
    scorer = RewardScorer(tree, gran_scale)
    executor = ThreadPoolExecutor(max_workers=max_workers)

    app = FastAPI(title="hierdx reward service", version=__version__)
    app.state.scorer = scorer

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        errors = [
            {"field": ".".join(str(p) for p in e["loc"][1:]) or "body", "message": e["msg"]} for e in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"error": "malformed request", "details": errors})

    @app.exception_handler(UnresolvableLabels)
    async def _unresolvable(request: Request, exc: UnresolvableLabels):
        return JSONResponse(status_code=422, content={"error": "unresolvable labels", "details": exc.message})

    @app.get("/v1/health")
    def health() -> dict[str, Any]:
        return {
            "status": "ok",
            "version": __version__,
            "format_version": FORMAT_VERSION,
            "taxonomy_checksum": checksum,
            "taxonomy_nodes": len(tree),
            "gran_scale": gran_scale,
        }

    @app.post("/v1/score")
    def score_one(req: ScoreRequest) -> dict[str, Any]:
        return scorer.score(req)

    @app.post("/v1/score_batch")
    def score_batch(batch: BatchRequest) -> dict[str, Any]:
        for req in batch.requests:
            scorer.annotation(req)
        return {"results": list(executor.map(scorer.score, batch.requests))}

    return app


def serve(taxonomy_path: str | Path, host: str = "127.0.0.1", port: int = 8000, gran_scale: float = GRAN_SCALE) -> None:
    import uvicorn

    uvicorn.run(create_app(taxonomy_path, gran_scale=gran_scale), host=host, port=port, log_level="warning")
