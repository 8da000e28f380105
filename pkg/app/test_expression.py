# app/test_expression.py
import math

import numpy as np
import pytest

from app.core.errors import ExpressionParseError
from app.services.expression import (
    ExpressionTree,
    FunctionNode,
    FunctionSet,
    FunctionSymbol as S,
    ParameterNode,
    VariableNode,
    differentiate,
    evaluate,
    evaluate_batch,
    get_parameters,
    make_node,
    parameter_jacobian,
    parse_infix,
    set_parameters,
    to_infix,
)


def tree(text, n=3):
    return parse_infix(text, n_variables=n)


def test_length_and_depth():
    t = ExpressionTree(FunctionNode(S.ADD, (VariableNode(0), FunctionNode(S.EXP, (ParameterNode(1.0),)))))
    assert t.length == 4
    assert t.depth == 3
    assert t.n_required_variables == 1


def test_function_sets_nest():
    assert set(FunctionSet.F1.symbols) < set(FunctionSet.F2.symbols) < set(FunctionSet.F3.symbols)
    assert set(FunctionSet.F3.symbols) < set(FunctionSet.F4.symbols)
    assert not any(S.DIV in fs.symbols for fs in FunctionSet)


def test_arity_is_checked():
    with pytest.raises(ValueError):
        FunctionNode(S.ADD, (ParameterNode(1.0),))


def test_evaluate_simple_expression():
    t = tree("2.0 * x0 + exp(x1)")
    assert evaluate(t, [1.5, 0.0, 0.0]) == pytest.approx(4.0)


def test_weighted_variable():
    t = ExpressionTree(VariableNode(1, -2.5))
    assert evaluate(t, [0.0, 2.0]) == pytest.approx(-5.0)


def test_analytic_quotient():
    t = tree("aq(x0, x1)", 2)
    assert evaluate(t, [3.0, 4.0]) == pytest.approx(3.0 / math.sqrt(17.0))


def test_domain_violations_propagate_as_nan():
    t = tree("log(x0) + sqrt(x1)", 2)
    values = evaluate_batch(t, np.array([[-1.0, 1.0], [1.0, -1.0], [1.0, 4.0]]))
    assert math.isnan(values[0]) and math.isnan(values[1])
    assert values[2] == pytest.approx(2.0)


def test_constant_tree_broadcasts():
    values = evaluate_batch(ExpressionTree(ParameterNode(3.0)), np.zeros((5, 2)))
    assert values.shape == (5,)
    assert np.all(values == 3.0)


def test_parse_powers_and_division():
    t = parse_infix("x^4 / (1 + x^4)", names=["x"])
    assert S.DIV in t.symbols()
    assert S.SQUARE in t.symbols()
    assert evaluate(t, [2.0]) == pytest.approx(16.0 / 17.0)


def test_parse_named_variables_and_pi():
    t = parse_infix("exp(-((theta / sigma)^2) / 2) / (sqrt(2 * pi) * sigma)", names=["sigma", "theta"])
    sigma, theta = 1.7, 2.2
    expected = math.exp(-((theta / sigma) ** 2) / 2) / (math.sqrt(2 * math.pi) * sigma)
    assert evaluate(t, [sigma, theta]) == pytest.approx(expected, rel=1e-12)


def test_parse_rejects_unknown_names_and_calls():
    with pytest.raises(ExpressionParseError):
        parse_infix("foo(x0)", n_variables=1)
    with pytest.raises(ExpressionParseError):
        parse_infix("y + 1", n_variables=1)
    with pytest.raises(ExpressionParseError):
        parse_infix("x3", n_variables=2)
    with pytest.raises(ExpressionParseError):
        parse_infix("x0 +", n_variables=1)


def test_infix_round_trip_is_evaluation_equivalent():
    rng = np.random.default_rng(3)
    t = ExpressionTree(
        FunctionNode(S.ADD, (
            VariableNode(0, 2.031),
            FunctionNode(S.EXP, (FunctionNode(S.MUL, (ParameterNode(-0.5), FunctionNode(S.SQUARE, (VariableNode(1, -1.25),)))),)),
        ))
    )
    back = parse_infix(to_infix(t), n_variables=2)
    X = rng.uniform(-2, 2, size=(100, 2))
    np.testing.assert_allclose(evaluate_batch(back, X), evaluate_batch(t, X), rtol=1e-12)
    assert back == t


def test_parameters_round_trip():
    t = tree("3.0 * x0 + sin(0.5 * x1)")
    params = get_parameters(t)
    assert list(params) == [3.0, 0.5]
    moved = set_parameters(t, [1.0, 2.0])
    assert evaluate(moved, [2.0, math.pi / 4, 0.0]) == pytest.approx(2.0 + 1.0)


def test_parameter_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    t = tree("aq(1.5 * x0, 0.7 * x1) + exp(0.3 * x0) * tanh(-0.4 * x1) + sq(0.8 * x1 - 0.2)", 2)
    X = rng.uniform(0.1, 2.0, size=(20, 2))
    yhat, J = parameter_jacobian(t, X)
    np.testing.assert_allclose(yhat, evaluate_batch(t, X), rtol=1e-12)
    theta = get_parameters(t)
    for k in range(theta.size):
        h = 1e-6
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        numeric = (evaluate_batch(set_parameters(t, up), X) - evaluate_batch(set_parameters(t, down), X)) / (2 * h)
        np.testing.assert_allclose(J[:, k], numeric, rtol=1e-5, atol=1e-7)


def test_constant_folding():
    assert make_node(S.ADD, ParameterNode(1.0), ParameterNode(2.0)) == ParameterNode(3.0)
    x = VariableNode(0)
    assert make_node(S.MUL, ParameterNode(0.0), x) == ParameterNode(0.0)
    assert make_node(S.MUL, ParameterNode(1.0), x) == x
    assert make_node(S.ADD, x, ParameterNode(0.0)) == x


@pytest.mark.parametrize("text", [
    "x0 * x1",
    "aq(x0, x1)",
    "aq(sq(x0), sin(x1))",
    "sqrt(sq(x0) + 1) * log(x1 + 2)",
    "exp(0.5 * x0) - tanh(x0 * x1)",
    "sin(2.0 * x0 + x1)",
    "x0 / (1 + sq(x1))",
])
def test_symbolic_derivative_matches_finite_differences(text):
    rng = np.random.default_rng(11)
    t = tree(text, 2)
    X = rng.uniform(0.2, 1.8, size=(50, 2))
    for variable in range(2):
        d = differentiate(t, variable)
        h = 1e-6
        up, down = X.copy(), X.copy()
        up[:, variable] += h
        down[:, variable] -= h
        numeric = (evaluate_batch(t, up) - evaluate_batch(t, down)) / (2 * h)
        np.testing.assert_allclose(evaluate_batch(d, X), numeric, rtol=1e-5, atol=1e-6)


def test_derivative_of_unrelated_variable_is_zero():
    d = differentiate(tree("exp(x0) + sq(x0)", 2), 1)
    assert d.root == ParameterNode(0.0)
