"""HTTP facade over the experiment harness.

Thin by design: endpoints validate request models, call the harness, and
map domain errors to status codes (422 config-invalid, 502
oracle-failure). All business logic lives in the library modules.
"""

from __future__ import annotations

from typing import Any, List, Optional

from fastapi import FastAPI, Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import __version__
from .errors import ConfigError, OracleError
from .harness import (ExperimentConfig, RunReport, SweepReport,
                      export_selection, run_experiment, sweep)


class SweepRequest(BaseModel):
    config: ExperimentConfig
    axis: str
    values: List[Any]


class ExportRequest(BaseModel):
    report_path: str
    seed: Optional[int] = None
    out: Optional[str] = None


class ExportResponse(BaseModel):
    path: str
    n_points: int


class HealthResponse(BaseModel):
    status: str
    version: str


def create_app() -> FastAPI:
    app = FastAPI(title="subsel", version=__version__)

    @app.exception_handler(ConfigError)
    async def _config_error(_: Request, exc: ConfigError) -> JSONResponse:
        return JSONResponse(status_code=422,
                            content={"kind": "config-invalid", "detail": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse(
            status_code=422,
            content={"kind": "config-invalid",
                     "detail": jsonable_encoder(exc.errors())})

    @app.exception_handler(OracleError)
    async def _oracle_error(_: Request, exc: OracleError) -> JSONResponse:
        return JSONResponse(status_code=502,
                            content={"kind": "oracle-failure", "detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/run", response_model=RunReport)
    def run(config: ExperimentConfig) -> RunReport:
        return run_experiment(config)

    @app.post("/sweep", response_model=SweepReport)
    def run_sweep(request: SweepRequest) -> SweepReport:
        return sweep(request.config, request.axis, request.values)

    @app.post("/brute", response_model=RunReport)
    def brute(config: ExperimentConfig) -> RunReport:
        forced = config.model_copy(update={"agent": "brute_force"})
        return run_experiment(forced)

    @app.post("/export", response_model=ExportResponse)
    def export(request: ExportRequest) -> ExportResponse:
        path = export_selection(request.report_path, seed=request.seed,
                                out=request.out)
        n_points = sum(1 for line in path.read_text(encoding="utf-8").splitlines()
                       if line.strip())
        return ExportResponse(path=str(path), n_points=n_points)

    return app


app = create_app()
