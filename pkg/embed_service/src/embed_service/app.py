"""HTTP surface: POST /embed/text, /embed/image, /embed/sentence, GET /healthz.

Responses carry {"dim": d, "vectors": [[...], ...]} with unit-normalized
rows in request order. Bad payloads map to 400, inference failures to 503.
"""

from __future__ import annotations

import base64
import binascii
import io
import logging

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .config import ServiceConfig
from .slots import ModelFailure, load_slot

logger = logging.getLogger(__name__)


class TextRequest(BaseModel):
    texts: list[str] = Field(min_length=1)
    profile: str | None = None


class ImageRequest(BaseModel):
    images_b64: list[str] = Field(min_length=1)
    profile: str | None = None


def _decode_image(blob: str) -> np.ndarray:
    try:
        raw = base64.b64decode(blob, validate=True)
        with Image.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (binascii.Error, OSError, ValueError) as exc:
        raise BadPayload(f"not a decodable base64 image: {exc}")


class BadPayload(Exception):
    pass


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="embed-service")
    slots = {spec.profile: load_slot(spec) for spec in config.slots}
    image_text = {
        name: slot
        for name, slot in slots.items()
        if slot.spec.resolved_role == "image_text"
    }
    sentence = {
        name: slot
        for name, slot in slots.items()
        if slot.spec.resolved_role == "sentence"
    }
    if not image_text:
        raise ValueError("config defines no image-text slot")
    default_image_text = next(iter(image_text))
    default_sentence = next(iter(sentence)) if sentence else default_image_text

    @app.exception_handler(RequestValidationError)
    async def on_validation(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(BadPayload)
    async def on_bad_payload(request: Request, exc: BadPayload):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(ModelFailure)
    async def on_model_failure(request: Request, exc: ModelFailure):
        logger.error("model failure: %s", exc)
        return JSONResponse(status_code=503, content={"error": str(exc)})

    def pick(table: dict, requested: str | None, default: str):
        name = requested or default
        if name not in table:
            raise BadPayload(f"unknown profile {name!r}; have {sorted(table)}")
        return table[name]

    def respond(slot, vectors: np.ndarray) -> dict:
        return {
            "profile": slot.spec.profile,
            "dim": slot.spec.dim,
            "vectors": vectors.tolist(),
        }

    @app.get("/healthz")
    async def healthz():
        return {
            "status": "ok",
            "profiles": sorted(slots),
            "dims": {name: slot.spec.dim for name, slot in slots.items()},
        }

    @app.post("/embed/text")
    async def embed_text(req: TextRequest):
        slot = pick(image_text, req.profile, default_image_text)
        return respond(slot, slot.encode_texts(req.texts))

    @app.post("/embed/image")
    async def embed_image(req: ImageRequest):
        slot = pick(image_text, req.profile, default_image_text)
        images = [_decode_image(blob) for blob in req.images_b64]
        return respond(slot, slot.encode_images(images))

    @app.post("/embed/sentence")
    async def embed_sentence(req: TextRequest):
        slot = pick(sentence or image_text, req.profile, default_sentence)
        return respond(slot, slot.encode_texts(req.texts))

    return app


def serve(config: ServiceConfig, host: str = "127.0.0.1", port: int = 9100):
    """Run the service under uvicorn (blocking)."""
    import uvicorn

    uvicorn.run(create_app(config), host=host, port=port, log_level="info")
