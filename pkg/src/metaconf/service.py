"""HTTP service exposing the run operations.

Every endpoint is a thin wrapper over a handler function that takes a
request model and returns a response model; the CLI calls the same
handlers in process, so there is a single code path for all transports.
Paths in requests refer to the filesystem the service runs on.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, runner
from .config import RunConfig, default_config, load_config, parse_config
from .errors import ConfigError, NumericalError


class ConfigCarrier(BaseModel):
    """Inline config text, a config path, or neither (defaults)."""

    config_path: str | None = None
    config_text: str | None = None

    def resolve(self) -> RunConfig:
        if self.config_path is not None and self.config_text is not None:
            raise ConfigError("pass config_path or config_text, not both")
        if self.config_path is not None:
            return load_config(self.config_path)
        if self.config_text is not None:
            return parse_config(self.config_text)
        return default_config()


class DatagenRequest(ConfigCarrier):
    out_path: str


class DatagenResponse(BaseModel):
    train_path: str
    test_path: str
    train_summary: dict
    test_summary: dict
    metadata: dict


class TrainRequest(ConfigCarrier):
    data_path: str
    out_dir: str


class TrainResponse(BaseModel):
    checkpoint_path: str
    history_path: str
    report_path: str
    manifest_path: str
    metrics: dict


class EvalRequest(BaseModel):
    checkpoint_path: str
    data_path: str
    mode: str = "regression"
    out_path: str | None = None


class EvalResponse(BaseModel):
    report: dict
    report_path: str | None


class CompareRequest(ConfigCarrier):
    data_path: str
    test_data_path: str | None = None
    seeds: list[int] = Field(min_length=2)
    variants: list[str] = Field(min_length=1)
    out_dir: str


class CompareResponse(BaseModel):
    table_path: str
    report_path: str
    table: dict
    win_rate_full_vs_joint: dict | None
    runs: list[dict]


class GradcheckRequest(ConfigCarrier):
    mode: str = "suite"


class GradcheckResponse(BaseModel):
    mode: str
    n_cases: int
    max_rel_error: float
    threshold: float
    passed: bool
    n_above_1e_3: int | None = None
    details: list[dict]


class HealthResponse(BaseModel):
    status: str
    version: str


def handle_datagen(req: DatagenRequest) -> DatagenResponse:
    return DatagenResponse(**runner.run_datagen(req.resolve(), req.out_path))


def handle_train(req: TrainRequest) -> TrainResponse:
    return TrainResponse(**runner.run_train(req.resolve(), req.data_path, req.out_dir))


def handle_eval(req: EvalRequest) -> EvalResponse:
    return EvalResponse(**runner.run_eval(
        req.checkpoint_path, req.data_path, mode=req.mode, out_path=req.out_path
    ))


def handle_compare(req: CompareRequest) -> CompareResponse:
    return CompareResponse(**runner.run_compare(
        req.resolve(), req.data_path, req.seeds, req.variants, req.out_dir,
        test_data_path=req.test_data_path,
    ))


def handle_gradcheck(req: GradcheckRequest) -> GradcheckResponse:
    return GradcheckResponse(**runner.run_gradcheck(req.resolve(), mode=req.mode))


def _to_http(exc: Exception) -> HTTPException:
    if isinstance(exc, ConfigError):
        return HTTPException(400, detail={"kind": "config", "message": str(exc)})
    if isinstance(exc, NumericalError):
        return HTTPException(500, detail={"kind": "numerical", "message": str(exc)})
    raise exc


def create_app() -> FastAPI:
    app = FastAPI(title="metaconf", version=__version__)

    def guarded(handler, req):
        try:
            return handler(req)
        except (ConfigError, NumericalError) as exc:
            raise _to_http(exc) from exc

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/datagen", response_model=DatagenResponse)
    def datagen(req: DatagenRequest):
        return guarded(handle_datagen, req)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest):
        return guarded(handle_train, req)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest):
        return guarded(handle_eval, req)

    @app.post("/compare", response_model=CompareResponse)
    def compare(req: CompareRequest):
        return guarded(handle_compare, req)

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest):
        return guarded(handle_gradcheck, req)

    return app


app = create_app()
