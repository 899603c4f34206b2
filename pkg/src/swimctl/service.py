"""HTTP front end: the same commands as the CLI, one request per run."""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .config import parse_config
from .errors import ConfigError, MeshFileError


class RunRequest(BaseModel):
    config_text: str = Field("", description="INI text, same format as a config file")
    base_dir: str = Field(".", description="directory that relative paths in the config resolve against")


class RunResponse(BaseModel):
    status: int
    summary: dict
    artifacts: list[str] = []


class ErrorResponse(BaseModel):
    status: int = 2
    error: str
    message: str
    field: str | None = None
    path: str | None = None


app = FastAPI(title="swimctl", version=__version__)


def _error(exc: Exception) -> JSONResponse:
    body = ErrorResponse(
        error=type(exc).__name__,
        message=str(exc),
        field=getattr(exc, "field", None),
        path=getattr(exc, "path", None) or getattr(exc, "filename", None),
    )
    return JSONResponse(status_code=400, content=body.model_dump())


def _handle(command: str, req: RunRequest):
    from .runner import execute

    try:
        cfg = parse_config(req.config_text, base_dir=req.base_dir)
        res = execute(command, cfg)
    except (ConfigError, MeshFileError, OSError) as exc:
        return _error(exc)
    return RunResponse(status=res.status, summary=res.summary, artifacts=res.artifacts)


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/run", response_model=RunResponse, responses={400: {"model": ErrorResponse}})
def run(req: RunRequest):
    return _handle("run", req)


@app.post("/verify", response_model=RunResponse, responses={400: {"model": ErrorResponse}})
def verify(req: RunRequest):
    return _handle("verify", req)


@app.post("/mesh", response_model=RunResponse, responses={400: {"model": ErrorResponse}})
def mesh(req: RunRequest):
    return _handle("mesh", req)
