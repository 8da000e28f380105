# app/test_audit.py
import math

import numpy as np

from app.services.audit import ClosedFormModel, audit_constraints, audit_feasibility
from app.services.constraints import ConstraintKind, ConstraintSet, ShapeConstraint, is_feasible
from app.services.expression import FunctionSet, ModelSpaceConfig, parse_infix
from app.services.interval import Box, Interval
from app.services.problems import get_instance
from app.services.tree_ops import random_population


def test_negative_constant_violates_image():
    instance = get_instance("I.6.20")
    verdict = audit_feasibility(parse_infix("-1", n_variables=2), instance, n_samples=1000)
    assert not verdict.feasible
    assert any(label.startswith("f >= 0") for label in verdict.violated)
    assert str(verdict).startswith("infeasible(")


def test_ground_truth_is_feasible():
    instance = get_instance("II.11.28")
    verdict = audit_feasibility(instance.ground_truth, instance, n_samples=10_000)
    assert verdict.feasible
    assert str(verdict) == "feasible"


def test_domain_exit_is_infeasible():
    box = Box.from_bounds([(-1, 1)])
    constraints = ConstraintSet((ShapeConstraint(ConstraintKind.IMAGE, Interval(-math.inf, math.inf), box),))
    verdict = audit_constraints(parse_infix("log(x0)", n_variables=1), constraints, np.random.default_rng(0), 1000)
    assert not verdict.feasible


def test_closed_form_derivatives():
    model = ClosedFormModel(lambda X: X[:, 0] ** 3)
    X = np.array([[1.0], [2.0]])
    np.testing.assert_allclose(model.derivative(X, 0, 1), [3.0, 12.0], rtol=1e-6)
    np.testing.assert_allclose(model.derivative(X, 0, 2), [6.0, 12.0], rtol=1e-3)


def test_certification_never_contradicted_by_audit():
    # certified models must pass the sampling audit; the converse is not required
    instances = [get_instance(name) for name in ("II.11.28", "I.6.20", "III.10.19", "Kotanchek")]
    rng = np.random.default_rng(4)
    checked = 0
    for instance in instances:
        config = ModelSpaceConfig(function_set=FunctionSet.F4, max_length=15, n_variables=instance.n_variables)
        for model in random_population(config, 250, rng):
            if is_feasible(model, instance.constraints):
                checked += 1
                assert audit_feasibility(model, instance, n_samples=2000, rng=rng).feasible, str(model)
    assert checked > 0
