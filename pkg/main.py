from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from pathlib import Path
import logging
import os
from dotenv import load_dotenv

from ctta import __version__, settings
from ctta.ablation import run_ablation
from ctta.cache import cached_report, invalidate_report_cache
from ctta.checkpoint import fingerprint
from ctta.errors import ConfigError
from ctta.model_report import AblationRequest, PretrainRequest, RunRequest, RunResponse
from ctta.pretrain_source import pretrain_source
from ctta.run_generalization import run_generalization
from ctta.run_scenario import run_scenario

# Load environment variables from .env file
load_dotenv()
settings.configure_logging()

logger = logging.getLogger(__name__)

app = FastAPI(
    title="Continual Test-Time Adaptation API",
    description="Pretrain source models, run adaptation scenarios and ablations",
    version=__version__,
)

# Configure CORS origins from environment variable
cors_origins_env = os.getenv('CORS_ALLOWED_ORIGINS', '*')
if cors_origins_env == '*':
    cors_origins = ["*"]
else:
    cors_origins = [origin.strip() for origin in cors_origins_env.split(',')]

app.add_middleware(
    CORSMiddleware,
    allow_origins=cors_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def _checkpoint_fingerprint(path: str) -> str:
    try:
        return fingerprint(path)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e


@cached_report("run")
def _run(request: RunRequest, _fingerprint: str) -> dict:
    report = run_scenario(request.checkpoint, request.scenario, request.config, request.baseline, request.seed)
    return report.model_dump(mode="json")


def _failure(operation: str, e: Exception) -> RunResponse:
    logger.warning("%s failed: %s: %s", operation, type(e).__name__, e)
    return RunResponse(success=False, message=f"{type(e).__name__}: {e}")


@app.get("/health")
async def health():
    return {"status": "ok"}


@app.post("/pretrain", response_model=RunResponse)
def pretrain_endpoint(request: PretrainRequest):
    """
    Fit a source model and write its checkpoint. Clears the report cache.
    """
    try:
        output = Path(request.output_dir or settings.OUTPUT_DIR) / "checkpoint.json"
        result = pretrain_source(request.task, request.model, request.pretrain, request.seed, output)
        invalidate_report_cache()
        return RunResponse(
            success=result.passed,
            message=result.diagnostic,
            data={
                "checkpoint": str(result.checkpoint_path),
                "source_error": result.source_error,
                "loss_trace": result.loss_trace,
            },
        )
    except (ValueError, ArithmeticError, RuntimeError, OSError) as e:
        return _failure("pretrain", e)


@app.post("/run", response_model=RunResponse)
def run_endpoint(request: RunRequest):
    """
    Adapt online over the scenario. Repeated identical requests come from the report cache.
    """
    try:
        report = _run(request, _checkpoint_fingerprint(request.checkpoint))
        return RunResponse(success=True, message=f"mean error {report['mean_error']:.4f}", data=report)
    except (ValueError, ArithmeticError, RuntimeError, OSError) as e:
        return _failure("run", e)


@app.post("/generalize", response_model=RunResponse)
def generalize_endpoint(request: RunRequest):
    try:
        report = run_generalization(request.checkpoint, request.scenario, request.config, request.baseline,
                                    request.seed)
        return RunResponse(success=True, message=f"mean error {report.mean_error:.4f}",
                           data=report.model_dump(mode="json"))
    except (ValueError, ArithmeticError, RuntimeError, OSError) as e:
        return _failure("generalize", e)


@app.post("/ablate", response_model=RunResponse)
def ablate_endpoint(request: AblationRequest):
    try:
        table = run_ablation(request.checkpoint, request.scenario, request.config, request.seeds)
        return RunResponse(success=True, message=f"{len(table.rows)} rows over {len(table.seeds)} seeds",
                           data=table.model_dump(mode="json"))
    except (ValueError, ArithmeticError, RuntimeError, OSError) as e:
        return _failure("ablate", e)


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
