"""
HTTP surface: POST /v1/classify and GET /health.
"""

import logging
from typing import Any

import orjson
import uvicorn
from starlette.applications import Starlette
from starlette.concurrency import run_in_threadpool
from starlette.requests import Request
from starlette.responses import JSONResponse
from starlette.routing import Route

from src.guard.config import EngineConfig
from src.guard.engine import SafetyEngine
from src.guard.errors import (
    EmptyInput,
    GuardError,
    MalformedContainer,
    OutOfRange,
    UnsupportedEncoding,
    UsageError,
    WrongLength,
)

logger = logging.getLogger(__name__)

BAD_REQUEST = (MalformedContainer, EmptyInput, WrongLength, OutOfRange, UsageError)
TRUE_VALUES = {"1", "true", "yes", "on"}


class OrjsonResponse(JSONResponse):
    def render(self, content: Any) -> bytes:
        return orjson.dumps(content, option=orjson.OPT_SERIALIZE_NUMPY)


def _error(status: int, message: str) -> OrjsonResponse:
    return OrjsonResponse({"error": message}, status_code=status)


async def health(request: Request) -> OrjsonResponse:
    engine: SafetyEngine = request.app.state.engine
    return OrjsonResponse({
        "status": "ok",
        "head_parameters": engine.head_parameters,
        "backend": engine.backend.kind,
        "threshold": engine.cfg.threshold,
    })


async def classify(request: Request) -> OrjsonResponse:
    engine: SafetyEngine = request.app.state.engine
    body = await request.body()
    transcribe = request.query_params.get("transcribe", "").lower() in TRUE_VALUES
    # parsed by the engine so a bad value is audited like any rejected input
    threshold = request.query_params.get("threshold")
    try:
        result = await run_in_threadpool(engine.classify_bytes, body, threshold, transcribe)
    except BAD_REQUEST as e:
        return _error(400, str(e))
    except UnsupportedEncoding as e:
        return _error(422, str(e))
    except GuardError:
        logger.exception("Classification failed")
        return _error(500, "internal error")
    except Exception:
        logger.exception("Unexpected failure while classifying a request")
        return _error(500, "internal error")
    return OrjsonResponse(result.to_dict())


def create_app(engine: SafetyEngine) -> Starlette:
    """Build the ASGI app around an already loaded engine"""
    app = Starlette(routes=[
        Route("/health", health, methods=["GET"]),
        Route("/v1/classify", classify, methods=["POST"]),
    ])
    app.state.engine = engine
    return app


def serve(cfg: EngineConfig) -> None:
    """Load the engine and serve until interrupted"""
    with SafetyEngine(cfg) as engine:
        logger.info("Serving on http://%s:%d", cfg.service_host, cfg.service_port)
        uvicorn.run(create_app(engine), host=cfg.service_host, port=cfg.service_port,
                    log_level=cfg.log_level.lower())
