"""HTTP surface: /v1/images, /v1/rollout, /v1/embed per the wire protocol."""

from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .backend import ModelBackend
from .config import AdapterConfig
from .store import ImageStore


class RolloutRequest(BaseModel):
    image_id: str
    prefix_lines: list[str] = Field(default_factory=list)
    temperature: float
    max_new_lines: int
    seed: Optional[int] = None


class EmbedRequest(BaseModel):
    image_id: str
    mode: str
    layer_index: Optional[int] = None


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(config: AdapterConfig, backend: Optional[ModelBackend] = None) -> FastAPI:
    backend = backend or ModelBackend(config)
    store = ImageStore(capacity=config.image_store_capacity)
    app = FastAPI(title="tikzsmith-adapter")
    app.state.backend = backend
    app.state.store = store

    @app.post("/v1/images")
    async def upload_image(request: Request):
        data = await request.body()
        if not data:
            return _error(400, "empty image payload")
        return {"image_id": store.put(data)}

    @app.post("/v1/rollout")
    def rollout(req: RolloutRequest):
        png = store.get(req.image_id)
        if png is None:
            return _error(404, f"unknown image_id {req.image_id}")
        if req.temperature <= 0:
            return _error(400, "temperature must be positive")
        if req.max_new_lines < 1:
            return _error(400, "max_new_lines must be positive")
        if any("\n" in ln or "\r" in ln for ln in req.prefix_lines):
            return _error(400, "prefix lines must not contain separators")
        with backend.lock:
            try:
                result = backend.sample_rollout(
                    png, list(req.prefix_lines), req.temperature, req.max_new_lines, req.seed
                )
            except ValueError as exc:
                return _error(400, str(exc))
        lines = list(result.batch.lines)
        eos = result.batch.eos
        if not lines and not eos:
            # token budget produced nothing usable; close the sequence rather
            # than emit a protocol-violating empty non-final batch
            eos = True
        return {"new_lines": lines, "eos": eos, "tokens_used": result.tokens_used}

    @app.post("/v1/embed")
    def embed(req: EmbedRequest):
        png = store.get(req.image_id)
        if png is None:
            return _error(404, f"unknown image_id {req.image_id}")
        if req.mode not in ("pooled", "patches"):
            return _error(400, f"unknown mode {req.mode!r}")
        with backend.lock:
            try:
                if req.mode == "pooled":
                    values = backend.embed_pooled(png)
                    return {"dim": int(values.shape[0]), "values": values.tolist()}
                patches = backend.embed_patches(png, req.layer_index)
            except ValueError as exc:
                return _error(400, str(exc))
        return {
            "num_patches": int(patches.shape[0]),
            "dim": int(patches.shape[1]),
            "patches": patches.tolist(),
        }

    return app
