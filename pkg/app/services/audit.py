# app/services/audit.py
import logging
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from app.core.config import settings
from app.services.constraints import ConstraintKind, ConstraintSet, ShapeConstraint, derivative_tree
from app.services.expression import ExpressionTree, evaluate_batch

if TYPE_CHECKING:
    from app.services.problems import ProblemInstance

logger = logging.getLogger(__name__)

ClosedForm = Callable[[np.ndarray], np.ndarray]


class AuditVerdict(BaseModel):
    feasible: bool
    violated: List[str] = []
    samples: int = 0

    def __str__(self) -> str:
        if self.feasible:
            return "feasible"
        return "infeasible(" + "; ".join(self.violated) + ")"


class TreeModel:
    """Point evaluation of a tree and its symbolic partial derivatives."""

    def __init__(self, tree: ExpressionTree):
        self.tree = tree

    def values(self, X: np.ndarray) -> np.ndarray:
        return evaluate_batch(self.tree, X)

    def derivative(self, X: np.ndarray, variable: int, order: int) -> np.ndarray:
        return evaluate_batch(derivative_tree(self.tree, variable, order), X)


class ClosedFormModel:
    """Closed-form evaluator with central finite-difference derivatives (for ground truths outside the tree vocabulary)."""

    def __init__(self, function: ClosedForm, step: float = 1e-6):
        self.function = function
        self.step = step

    def values(self, X: np.ndarray) -> np.ndarray:
        with np.errstate(all="ignore"):
            return np.asarray(self.function(X), dtype=float)

    def derivative(self, X: np.ndarray, variable: int, order: int) -> np.ndarray:
        h = (self.step if order == 1 else self.step * 100) * (1.0 + np.abs(X[:, variable]))
        forward, backward = X.copy(), X.copy()
        forward[:, variable] += h
        backward[:, variable] -= h
        if order == 1:
            return (self.values(forward) - self.values(backward)) / (2.0 * h)
        return (self.values(forward) - 2.0 * self.values(X) + self.values(backward)) / (h * h)


def as_point_model(model: Union[ExpressionTree, ClosedForm, TreeModel, ClosedFormModel]):
    if isinstance(model, (TreeModel, ClosedFormModel)):
        return model
    if isinstance(model, ExpressionTree):
        return TreeModel(model)
    return ClosedFormModel(model)


def audit_constraints(
    model,
    constraints: ConstraintSet,
    rng: np.random.Generator,
    n_samples: Optional[int] = None,
    tolerance: Optional[float] = None,
    names: Optional[Sequence[str]] = None,
) -> AuditVerdict:
    n_samples = settings.audit_samples if n_samples is None else n_samples
    tolerance = settings.audit_tolerance if tolerance is None else tolerance
    point_model = as_point_model(model)
    violated = []
    for constraint in constraints:
        X = constraint.region.sample(n_samples, rng)
        if not _constraint_holds(point_model, constraint, X, tolerance):
            violated.append(constraint.label(names))
    verdict = AuditVerdict(feasible=not violated, violated=violated, samples=n_samples)
    logger.debug("audit: %s", verdict)
    return verdict


def _constraint_holds(point_model, constraint: ShapeConstraint, X: np.ndarray, tolerance: float) -> bool:
    values = point_model.values(X)
    if not np.all(np.isfinite(values)):
        return False  # the model leaves its domain inside the region
    if constraint.kind is not ConstraintKind.IMAGE:
        values = point_model.derivative(X, constraint.variable, constraint.kind.order)
        if not np.all(np.isfinite(values)):
            return False
    target = constraint.target
    return bool(np.all(values >= target.lo - tolerance) and np.all(values <= target.hi + tolerance))


def audit_feasibility(
    model,
    instance: "ProblemInstance",
    n_samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    tolerance: Optional[float] = None,
) -> AuditVerdict:
    """Uniformly sample every constraint region and check the model pointwise."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return audit_constraints(model, instance.constraints, rng, n_samples, tolerance, instance.names)
