# app/api/instance_routes.py
import math

from fastapi import APIRouter, HTTPException

from app.core.errors import UnknownInstanceError
from app.services.problems import ProblemInstance, builtin_instances, get_instance

router = APIRouter()


def _bound(value: float):
    return value if math.isfinite(value) else None


def describe_instance(instance: ProblemInstance, names=None) -> dict:
    names = names or instance.names
    return {
        "name": instance.name,
        "expression": instance.expression,
        "variables": [{"name": v.name, "domain": [v.domain.lo, v.domain.hi]} for v in instance.variables],
        "extrapolation_fraction": instance.extrapolation_fraction,
        "constraints": [
            {
                "kind": c.kind.value,
                "variable": None if c.variable is None else names[c.variable],
                "target": [_bound(c.target.lo), _bound(c.target.hi)],
                "region": [[i.lo, i.hi] for i in c.region],
                "label": c.label(names),
            }
            for c in instance.constraints
        ],
    }


@router.get("")
def list_instances():
    """Built-in benchmark instances"""
    return [
        {"name": i.name, "expression": i.expression, "n_variables": i.n_variables, "n_constraints": len(i.constraints)}
        for i in builtin_instances()
    ]


@router.get("/{name}")
def instance_detail(name: str):
    try:
        return describe_instance(get_instance(name))
    except UnknownInstanceError as e:
        raise HTTPException(status_code=404, detail=str(e))
