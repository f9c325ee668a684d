"""HTTP inference service.

``POST /infer`` takes a base-64 PNG of the scene canvas, a pixel-space
prompt box, and a candidate count, and answers with up to k aligned
caption/mask candidates sorted by score: caption tokens plus the
detokenized string, one run-length-encoded mask per mentioned entity
with the caption word position it links to, and the model/config
version.  Sampling is seeded from a hash of the request body, so
identical requests produce byte-identical responses.  ``GET /health``
reports service status and the model version.

The model snapshot is loaded once at startup and never mutated;
swapping checkpoints requires a restart.  Malformed request fields
answer 400 with field-level messages; structurally valid requests the
scene rejects (box out of bounds, unrecognizable canvas) answer 422.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import io
import json

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .config import TrainConfig, config_hash
from .data import CANVAS_SIZE, encode_rle
from .errors import InputError
from .model import ShapeCapModel
from .training import load_checkpoint

__all__ = ["create_app", "model_version", "serve"]

MAX_IMAGE_B64 = 4 << 20  # generous ceiling for a 64x64 PNG


class InferRequest(BaseModel):
    image: str = Field(description="base-64 PNG of the scene canvas")
    box: list[int] = Field(min_length=4, max_length=4,
                           description="prompt box [x0, y0, x1, y1] in pixels")
    k: int = Field(default=5, ge=1, le=5, description="max candidates")


def model_version(cfg: TrainConfig, epoch: int) -> str:
    return f"{config_hash(cfg)}-e{epoch}"


def _decode_image(encoded: str) -> np.ndarray:
    if len(encoded) > MAX_IMAGE_B64:
        raise InputError("image: encoded payload too large")
    try:
        raw = base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise InputError(f"image: invalid base-64 data ({exc})") from exc
    try:
        with Image.open(io.BytesIO(raw)) as img:
            if img.format != "PNG":
                raise InputError(f"image: expected PNG, got {img.format}")
            rgb = img.convert("RGB")
            array = np.asarray(rgb, dtype=np.uint8)
    except InputError:
        raise
    except Exception as exc:
        raise InputError(f"image: not a decodable PNG ({exc})") from exc
    if array.shape[:2] != (CANVAS_SIZE, CANVAS_SIZE):
        raise InputError(
            f"image: canvas must be {CANVAS_SIZE}x{CANVAS_SIZE}, "
            f"got {array.shape[1]}x{array.shape[0]}"
        )
    return array


def _request_seed(payload: InferRequest) -> int:
    canon = json.dumps(
        {"image": payload.image, "box": list(payload.box), "k": payload.k},
        sort_keys=True,
    )
    digest = hashlib.sha256(canon.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


def create_app(checkpoint_path: str) -> FastAPI:
    """Build the service around one immutable checkpoint snapshot."""
    payload = load_checkpoint(checkpoint_path)
    cfg = TrainConfig(**payload["config"])
    torch.manual_seed(cfg.seed)
    model = ShapeCapModel(
        dim=cfg.dim,
        heads=cfg.heads,
        depth=cfg.depth,
        enc_channels=cfg.enc_channels,
        d_joint=cfg.d_joint,
        steps=cfg.steps,
        theta=cfg.theta,
        filtering=cfg.filtering,
        ranking=cfg.ranking,
        cross_attention=cfg.cross_attention,
    )
    model.load_state_dict(payload["model_state"])
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    version = model_version(cfg, payload["epoch"])

    app = FastAPI(title="shape-world caption/mask service")

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        fields = []
        for err in exc.errors():
            loc = ".".join(str(part) for part in err["loc"] if part != "body")
            fields.append({"field": loc or "body", "message": err["msg"]})
        return JSONResponse(status_code=400, content={"detail": fields})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "model_version": version}

    @app.post("/infer")
    def infer(request: InferRequest) -> JSONResponse:
        try:
            image = _decode_image(request.image)
        except InputError as exc:
            return JSONResponse(
                status_code=400,
                content={"detail": [{"field": "image", "message": str(exc)}]},
            )
        height, width = image.shape[:2]
        x0, y0, x1, y1 = request.box
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            return JSONResponse(
                status_code=422,
                content={"detail": [{
                    "field": "box",
                    "message": f"box {request.box} is not inside the "
                               f"{width}x{height} image",
                }]},
            )
        generator = torch.Generator().manual_seed(_request_seed(request))
        try:
            candidates = model.infer(image, (x0, y0, x1, y1), k=request.k,
                                     generator=generator)
        except InputError as exc:
            return JSONResponse(
                status_code=422,
                content={"detail": [{"field": "box", "message": str(exc)}]},
            )
        body = {
            "model_version": version,
            "candidates": [
                {
                    "tokens": [int(t) for t in cand.tokens],
                    "caption": cand.caption,
                    "score": float(cand.score),
                    "masks": [
                        {
                            "rle": encode_rle(mask),
                            "word_position": int(pos),
                            "confidence": float(conf),
                        }
                        for mask, pos, conf in zip(
                            cand.masks, cand.mask_word_positions,
                            cand.mask_confidences,
                        )
                    ],
                }
                for cand in candidates
            ],
        }
        return JSONResponse(content=body)

    return app


def serve(checkpoint_path: str, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(checkpoint_path), host=host, port=port)
