# app/test_fitness.py
import math

import numpy as np
import pytest

from app.services.constraints import ConstraintKind, ConstraintSet, ShapeConstraint
from app.services.expression import (
    ExpressionTree,
    FunctionNode,
    FunctionSymbol as S,
    ParameterNode,
    VariableNode,
    evaluate_batch,
    get_parameters,
)
from app.services.fitness import FitnessEvaluator, FitnessMode, linear_scale, local_optimize, scaled_tree
from app.services.interval import Box, Interval
from app.services.problems import Dataset

BOX = Box.from_bounds([(0.0, 1.0)])
X = np.linspace(0.0, 1.0, 100)[:, None]
EXP_DATA = Dataset(X, np.exp(X[:, 0]))

RISING = ConstraintSet((
    ShapeConstraint(ConstraintKind.IMAGE, Interval(0.0, math.inf), BOX),
    ShapeConstraint(ConstraintKind.FIRST_DERIVATIVE, Interval(0.0, math.inf), BOX, 0),
))
NON_POSITIVE = ConstraintSet((ShapeConstraint(ConstraintKind.IMAGE, Interval(-math.inf, 0.0), BOX),))


@pytest.mark.parametrize("predictions, y, expected", [
    ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], (1.0, 0.0)),
    ([1.0, 2.0, 3.0], [-1.0, -0.5, 0.0], (0.5, -1.5)),
    ([4.0, 4.0, 4.0], [1.0, 2.0, 6.0], (0.0, 3.0)),
])
def test_linear_scale(predictions, y, expected):
    slope, intercept = linear_scale(np.array(predictions), np.array(y))
    assert slope == pytest.approx(expected[0], abs=1e-12)
    assert intercept == pytest.approx(expected[1], abs=1e-12)


def test_linear_scale_with_non_finite_predictions():
    assert linear_scale(np.array([1.0, np.inf, 2.0]), np.array([1.0, 2.0, 3.0])) == (0.0, 2.0)


def test_scaled_tree_folds_unit_scaling():
    tree = ExpressionTree(VariableNode(0))
    assert scaled_tree(tree, 1.0, 0.0) == tree


def test_local_optimize_linear_weight():
    data = Dataset(X, 3.0 * X[:, 0])
    fitted = local_optimize(ExpressionTree(VariableNode(0, 1.0)), data, iterations=10)
    np.testing.assert_allclose(evaluate_batch(fitted, X), data.y, atol=1e-6)


def test_local_optimize_inside_exp():
    data = Dataset(X, np.exp(2.0 * X[:, 0]))
    tree = ExpressionTree(FunctionNode(S.EXP, (VariableNode(0, 1.0),)))
    fitted = local_optimize(tree, data, iterations=50)
    assert get_parameters(fitted)[0] == pytest.approx(2.0, abs=1e-3)


def test_local_optimize_keeps_structure():
    tree = ExpressionTree(FunctionNode(S.ADD, (FunctionNode(S.SIN, (VariableNode(0, 0.5),)), ParameterNode(0.1))))
    fitted = local_optimize(tree, EXP_DATA, iterations=20)
    assert fitted.symbols() == tree.symbols()
    assert fitted.length == tree.length


def test_local_optimize_skips_non_finite_start():
    tree = ExpressionTree(FunctionNode(S.LOG, (FunctionNode(S.SUB, (VariableNode(0), ParameterNode(0.5))),)))
    assert local_optimize(tree, EXP_DATA, iterations=10) is tree


def test_local_optimize_without_parameters_or_iterations():
    tree = ExpressionTree(FunctionNode(S.EXP, (VariableNode(0),)))
    assert local_optimize(tree, EXP_DATA, iterations=0) is tree


def test_exact_model_scores_zero_and_is_feasible():
    evaluator = FitnessEvaluator(EXP_DATA, RISING, FitnessMode.HARD)
    result = evaluator(ExpressionTree(FunctionNode(S.EXP, (VariableNode(0),))))
    assert result.nmse_train == pytest.approx(0.0, abs=1e-8)
    assert result.feasible
    assert result.objectives == (result.nmse_train,)
    assert evaluator.evaluations == 1


def test_constant_scores_100_with_zero_penalties():
    result = FitnessEvaluator(EXP_DATA, RISING, FitnessMode.SOFT)(ExpressionTree(ParameterNode(3.0)))
    assert result.scaling[0] == 0.0
    assert result.objectives[0] == pytest.approx(100.0, rel=1e-9)
    assert result.objectives[1:] == (0.0, 0.0)
    assert result.feasible
    assert result.total_violation == 0.0


def test_hard_mode_rejects_infeasible_model():
    result = FitnessEvaluator(EXP_DATA, NON_POSITIVE, FitnessMode.HARD, sentinel=1e7)(ExpressionTree(VariableNode(0)))
    assert not result.feasible
    assert result.nmse_train == 1e7
    assert result.raw_nmse < 10.0


def test_soft_mode_reports_penalty_per_constraint():
    result = FitnessEvaluator(EXP_DATA, NON_POSITIVE, FitnessMode.SOFT)(ExpressionTree(VariableNode(0)))
    assert len(result.objectives) == 2
    assert result.objectives[1] > 0.0
    assert result.nmse_train == result.raw_nmse


def test_plain_mode_skips_constraints():
    result = FitnessEvaluator(EXP_DATA, NON_POSITIVE, FitnessMode.PLAIN)(ExpressionTree(VariableNode(0)))
    assert result.feasible is None
    assert result.violation is None
    assert len(result.objectives) == 1


def test_non_finite_predictions_get_the_sentinel():
    tree = ExpressionTree(FunctionNode(S.LOG, (FunctionNode(S.SUB, (VariableNode(0), ParameterNode(0.5))),)))
    result = FitnessEvaluator(EXP_DATA, RISING, FitnessMode.SOFT, sentinel=1e7)(tree)
    assert result.nmse_train == 1e7
    assert all(p <= 1e7 for p in result.objectives[1:])


def test_early_feasibility_check_uses_the_unoptimized_tree():
    # falling and negative as written; optimization turns it into the rising target
    tree = ExpressionTree(FunctionNode(S.SUB, (ParameterNode(-1.0), VariableNode(0))))
    data = Dataset(X, 1.0 + 2.0 * X[:, 0])
    late = FitnessEvaluator(data, RISING, FitnessMode.HARD, local_opt_iterations=10)(tree)
    early = FitnessEvaluator(data, RISING, FitnessMode.HARD, 10, check_before_scaling=True, sentinel=1e7)(tree)
    assert late.feasible
    assert late.nmse_train == pytest.approx(0.0, abs=1e-8)
    assert not early.feasible
    assert early.raw_nmse == pytest.approx(0.0, abs=1e-8)
    assert early.nmse_train == 1e7
