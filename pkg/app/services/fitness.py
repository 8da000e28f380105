# app/services/fitness.py
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import least_squares

from app.core.config import settings
from app.services.constraints import ConstraintSet, ViolationVector, violation
from app.services.expression import (
    ExpressionTree,
    FunctionSymbol,
    ParameterNode,
    evaluate_batch,
    get_parameters,
    make_node,
    parameter_jacobian,
    set_parameters,
)
from app.services.metrics import nmse
from app.services.problems import Dataset

logger = logging.getLogger(__name__)

# residual assigned to non-finite predictions while optimizing
_RESIDUAL_CAP = 1e10


class FitnessMode(str, Enum):
    PLAIN = "plain"  # NMSE only
    HARD = "hard"  # infeasible models get the rejection sentinel
    SOFT = "soft"  # NMSE plus one penalty objective per constraint


def scaled_tree(tree: ExpressionTree, slope: float, intercept: float) -> ExpressionTree:
    root = make_node(FunctionSymbol.MUL, ParameterNode(float(slope)), tree.root)
    return ExpressionTree(make_node(FunctionSymbol.ADD, root, ParameterNode(float(intercept))))


@dataclass(frozen=True, eq=False)
class EvaluatedIndividual:
    tree: ExpressionTree
    nmse_train: float
    objectives: Tuple[float, ...]
    feasible: Optional[bool] = None
    scaling: Tuple[float, float] = (1.0, 0.0)
    raw_nmse: float = 0.0
    violation: Optional[ViolationVector] = None

    @property
    def model(self) -> ExpressionTree:
        """The tree with its linear scaling applied."""
        return scaled_tree(self.tree, *self.scaling)

    @property
    def total_violation(self) -> float:
        return float(sum(self.objectives[1:]))


def linear_scale(predictions: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """OLS (slope, intercept) mapping predictions onto targets; degenerate predictions get (0, mean(y))."""
    predictions = np.asarray(predictions, dtype=float)
    y = np.asarray(y, dtype=float)
    y_mean = float(np.mean(y))
    if not np.all(np.isfinite(predictions)):
        return 0.0, y_mean
    with np.errstate(all="ignore"):
        dp = predictions - np.mean(predictions)
        denominator = float(np.dot(dp, dp))
        if not np.isfinite(denominator) or denominator == 0.0:
            return 0.0, y_mean
        slope = float(np.dot(dp, y - y_mean)) / denominator
        intercept = y_mean - slope * float(np.mean(predictions))
    if not (np.isfinite(slope) and np.isfinite(intercept)):
        return 0.0, y_mean
    return slope, intercept


def local_optimize(tree: ExpressionTree, data: Dataset, iterations: Optional[int] = None) -> ExpressionTree:
    """Levenberg-Marquardt on the numeric parameters; the structure never changes."""
    iterations = settings.local_opt_iterations if iterations is None else iterations
    theta0 = get_parameters(tree)
    if theta0.size == 0 or iterations <= 0:
        return tree
    X, y = data.X, data.y

    def residuals(theta):
        r = evaluate_batch(set_parameters(tree, theta), X) - y
        return np.where(np.isfinite(r), r, _RESIDUAL_CAP)

    def jacobian(theta):
        _, J = parameter_jacobian(set_parameters(tree, theta), X)
        return np.where(np.isfinite(J), J, 0.0)

    initial = evaluate_batch(tree, X) - y
    if not np.all(np.isfinite(initial)):
        return tree
    # MINPACK's LM needs at least as many residuals as parameters
    method = "lm" if theta0.size <= len(y) else "trf"
    try:
        result = least_squares(residuals, theta0, jac=jacobian, method=method, max_nfev=iterations)
    except (ValueError, np.linalg.LinAlgError) as exc:
        logger.debug("local optimization failed for %s: %s", tree, exc)
        return tree
    if not np.all(np.isfinite(result.x)) or 2.0 * result.cost > float(np.dot(initial, initial)):
        return tree
    return set_parameters(tree, result.x)


class FitnessEvaluator:
    """Scores trees on one training partition and counts every evaluation."""

    def __init__(
        self,
        data: Dataset,
        constraints: ConstraintSet,
        mode: FitnessMode = FitnessMode.PLAIN,
        local_opt_iterations: int = 0,
        check_before_scaling: bool = False,
        sentinel: Optional[float] = None,
    ):
        self.data = data
        self.constraints = constraints
        self.mode = mode
        self.local_opt_iterations = local_opt_iterations
        self.check_before_scaling = check_before_scaling and local_opt_iterations > 0
        self.sentinel = settings.rejection_sentinel if sentinel is None else sentinel
        self.evaluations = 0

    def __call__(self, tree: ExpressionTree) -> EvaluatedIndividual:
        self.evaluations += 1
        # check-before-optimize ordering: feasibility of the unscaled, unoptimized tree
        early = violation(tree, self.constraints) if self.check_before_scaling and self.mode is not FitnessMode.PLAIN else None
        if self.local_opt_iterations > 0:
            tree = local_optimize(tree, self.data, self.local_opt_iterations)

        predictions = evaluate_batch(tree, self.data.X)
        finite = bool(np.all(np.isfinite(predictions)))
        slope, intercept = linear_scale(predictions, self.data.y) if finite else (1.0, 0.0)
        raw = nmse(self.data.y, slope * predictions + intercept, self.sentinel) if finite else self.sentinel

        if self.mode is FitnessMode.PLAIN:
            return EvaluatedIndividual(tree, raw, (raw,), None, (slope, intercept), raw)

        vector = early if early is not None else violation(scaled_tree(tree, slope, intercept), self.constraints)
        if self.mode is FitnessMode.HARD:
            score = raw if vector.feasible else self.sentinel
            return EvaluatedIndividual(tree, score, (score,), vector.feasible, (slope, intercept), raw, vector)

        penalties = tuple(min(p, self.sentinel) for p in vector.penalties)
        return EvaluatedIndividual(tree, raw, (raw,) + penalties, vector.feasible, (slope, intercept), raw, vector)


def fitness(
    tree: ExpressionTree,
    data: Dataset,
    constraints: ConstraintSet,
    mode: FitnessMode = FitnessMode.PLAIN,
    local_opt_iterations: int = 0,
    check_before_scaling: bool = False,
) -> EvaluatedIndividual:
    return FitnessEvaluator(data, constraints, mode, local_opt_iterations, check_before_scaling)(tree)
