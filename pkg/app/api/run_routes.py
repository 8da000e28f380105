# app/api/run_routes.py
import logging

import numpy as np
from fastapi import APIRouter, HTTPException, Response
from pydantic import BaseModel, Field

from app.core.errors import (
    ConfigurationError,
    ExpressionParseError,
    NoModelError,
    ShapeRegressionError,
    UnknownInstanceError,
)
from app.services.audit import audit_feasibility
from app.services.experiment import RunSpec, execute_run
from app.services.expression import parse_infix
from app.services.problems import get_instance

logger = logging.getLogger(__name__)

router = APIRouter()


class AuditRequest(BaseModel):
    instance: str
    model: str
    samples: int = Field(default=10_000, ge=1)
    seed: int = 0


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, UnknownInstanceError):
        return HTTPException(status_code=404, detail=str(e))
    if isinstance(e, NoModelError):
        return HTTPException(status_code=422, detail=str(e))
    return HTTPException(status_code=400, detail=str(e))


@router.post("/runs")
def create_run(spec: RunSpec):
    """Run one algorithm on one instance synchronously and return its record."""
    try:
        record = execute_run(spec)
    except ShapeRegressionError as e:
        logger.warning("Run request failed: %s", e)
        raise _http_error(e)
    # unbounded penalties are written as Infinity
    return Response(content=record.model_dump_json(), media_type="application/json")


@router.post("/audit")
def audit_model(request: AuditRequest):
    try:
        instance = get_instance(request.instance)
        tree = parse_infix(request.model, names=instance.names, n_variables=instance.n_variables)
    except (ConfigurationError, ExpressionParseError) as e:
        raise _http_error(e)
    verdict = audit_feasibility(tree, instance, n_samples=request.samples, rng=np.random.default_rng(request.seed))
    return {"instance": instance.name, "model": str(tree), "verdict": str(verdict), **verdict.model_dump()}
