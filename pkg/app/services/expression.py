# app/services/expression.py
import ast
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from app.core.errors import ConfigurationError, ExpressionParseError


class FunctionSymbol(str, Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    AQ = "aq"
    SQRT = "sqrt"
    SQUARE = "sq"
    LOG = "log"
    EXP = "exp"
    SIN = "sin"
    TANH = "tanh"
    # Only used by ground-truth expressions and derivative trees; no function set contains it.
    DIV = "div"

    @property
    def arity(self) -> int:
        return 2 if self in _BINARY else 1


_BINARY = {FunctionSymbol.ADD, FunctionSymbol.SUB, FunctionSymbol.MUL, FunctionSymbol.AQ, FunctionSymbol.DIV}


class FunctionSet(str, Enum):
    F1 = "F1"
    F2 = "F2"
    F3 = "F3"
    F4 = "F4"

    @property
    def symbols(self) -> Tuple[FunctionSymbol, ...]:
        return _FUNCTION_SETS[self]


_F1 = (FunctionSymbol.ADD, FunctionSymbol.SUB, FunctionSymbol.MUL)
_F2 = _F1 + (FunctionSymbol.AQ,)
_F3 = _F2 + (FunctionSymbol.SQRT, FunctionSymbol.SQUARE, FunctionSymbol.LOG, FunctionSymbol.EXP)
_F4 = _F3 + (FunctionSymbol.SIN, FunctionSymbol.TANH)
_FUNCTION_SETS = {FunctionSet.F1: _F1, FunctionSet.F2: _F2, FunctionSet.F3: _F3, FunctionSet.F4: _F4}


@dataclass(frozen=True)
class ParameterNode:
    value: float


@dataclass(frozen=True)
class VariableNode:
    index: int
    weight: float = 1.0


@dataclass(frozen=True)
class FunctionNode:
    symbol: FunctionSymbol
    children: Tuple["Node", ...]

    def __post_init__(self):
        if len(self.children) != self.symbol.arity:
            raise ValueError(f"{self.symbol.value} expects {self.symbol.arity} children, got {len(self.children)}")


Node = Union[FunctionNode, ParameterNode, VariableNode]
Path = Tuple[int, ...]


@dataclass(frozen=True)
class ExpressionTree:
    """Immutable n-ary expression; all editing returns a new tree."""

    root: Node

    @cached_property
    def length(self) -> int:
        return sum(1 for _ in self.iter_nodes())

    @cached_property
    def depth(self) -> int:
        return max(depth for _, _, depth in self.iter_nodes())

    @cached_property
    def n_required_variables(self) -> int:
        indices = [node.index for node, _, _ in self.iter_nodes() if isinstance(node, VariableNode)]
        return max(indices) + 1 if indices else 0

    def iter_nodes(self) -> Iterator[Tuple[Node, Path, int]]:
        """Preorder traversal yielding (node, path, depth); the root has depth 1."""
        stack: List[Tuple[Node, Path, int]] = [(self.root, (), 1)]
        while stack:
            node, path, depth = stack.pop()
            yield node, path, depth
            if isinstance(node, FunctionNode):
                for i in range(len(node.children) - 1, -1, -1):
                    stack.append((node.children[i], path + (i,), depth + 1))

    def symbols(self) -> List[FunctionSymbol]:
        return [node.symbol for node, _, _ in self.iter_nodes() if isinstance(node, FunctionNode)]

    def subtree(self, path: Path) -> Node:
        node = self.root
        for i in path:
            node = node.children[i]
        return node

    def replace(self, path: Path, replacement: Node) -> "ExpressionTree":
        return ExpressionTree(_replace(self.root, path, replacement))

    def __str__(self) -> str:
        return to_infix(self)


def _replace(node: Node, path: Path, replacement: Node) -> Node:
    if not path:
        return replacement
    head, rest = path[0], path[1:]
    children = list(node.children)
    children[head] = _replace(children[head], rest, replacement)
    return FunctionNode(node.symbol, tuple(children))


def node_length(node: Node) -> int:
    return ExpressionTree(node).length


def node_depth(node: Node) -> int:
    return ExpressionTree(node).depth


class ModelSpaceConfig(BaseModel):
    function_set: FunctionSet = FunctionSet.F3
    max_length: int = Field(default=30, ge=3)
    max_depth: int = Field(default=20, ge=2)
    n_variables: int = Field(default=1, ge=1)

    def __init__(self, **values):
        try:
            super().__init__(**values)
        except ValidationError as exc:
            raise ConfigurationError(f"Invalid model space: {exc}") from exc


# ---------------------------------------------------------------------------
# Point evaluation
# ---------------------------------------------------------------------------

def apply_symbol(symbol: FunctionSymbol, *args: np.ndarray) -> np.ndarray:
    """Elementwise semantics of a function symbol; domain violations give nan/inf."""
    with np.errstate(all="ignore"):
        if symbol is FunctionSymbol.ADD:
            return args[0] + args[1]
        if symbol is FunctionSymbol.SUB:
            return args[0] - args[1]
        if symbol is FunctionSymbol.MUL:
            return args[0] * args[1]
        if symbol is FunctionSymbol.DIV:
            return args[0] / args[1]
        if symbol is FunctionSymbol.AQ:
            return args[0] / np.sqrt(1.0 + args[1] * args[1])
        x = args[0]
        if symbol is FunctionSymbol.SQRT:
            return np.sqrt(x)
        if symbol is FunctionSymbol.SQUARE:
            return x * x
        if symbol is FunctionSymbol.LOG:
            return np.log(x)
        if symbol is FunctionSymbol.EXP:
            return np.exp(x)
        if symbol is FunctionSymbol.SIN:
            return np.sin(x)
        if symbol is FunctionSymbol.TANH:
            return np.tanh(x)
    raise ValueError(f"Unknown symbol: {symbol}")


def evaluate_batch(tree: ExpressionTree, X: np.ndarray) -> np.ndarray:
    """Evaluate the tree on every row of X (shape n_samples x n_variables)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.broadcast_to(_evaluate_node(tree.root, X), (X.shape[0],)).astype(float, copy=True)


def _evaluate_node(node: Node, X: np.ndarray) -> np.ndarray:
    if isinstance(node, ParameterNode):
        return np.full(X.shape[0], node.value)
    if isinstance(node, VariableNode):
        with np.errstate(all="ignore"):
            return node.weight * X[:, node.index]
    return apply_symbol(node.symbol, *(_evaluate_node(child, X) for child in node.children))


def evaluate(tree: ExpressionTree, point: Sequence[float]) -> float:
    return float(evaluate_batch(tree, np.asarray(point, dtype=float)[None, :])[0])


# ---------------------------------------------------------------------------
# Numeric parameters
# ---------------------------------------------------------------------------

def get_parameters(tree: ExpressionTree) -> np.ndarray:
    """ParameterNode values and variable weights in preorder."""
    values = []
    for node, _, _ in tree.iter_nodes():
        if isinstance(node, ParameterNode):
            values.append(node.value)
        elif isinstance(node, VariableNode):
            values.append(node.weight)
    return np.asarray(values, dtype=float)


def set_parameters(tree: ExpressionTree, values: Sequence[float]) -> ExpressionTree:
    iterator = iter(float(v) for v in values)

    def rebuild(node: Node) -> Node:
        if isinstance(node, ParameterNode):
            return ParameterNode(next(iterator))
        if isinstance(node, VariableNode):
            return VariableNode(node.index, next(iterator))
        return FunctionNode(node.symbol, tuple(rebuild(child) for child in node.children))

    return ExpressionTree(rebuild(tree.root))


def parameter_jacobian(tree: ExpressionTree, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Predictions and d(prediction)/d(parameter) by reverse accumulation over the tree."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    nodes: List[Node] = []
    child_slots: List[Tuple[int, ...]] = []

    def flatten(node: Node) -> int:
        slot = len(nodes)
        nodes.append(node)
        child_slots.append(())
        if isinstance(node, FunctionNode):
            child_slots[slot] = tuple(flatten(child) for child in node.children)
        return slot

    flatten(tree.root)
    values: List[Optional[np.ndarray]] = [None] * len(nodes)
    param_column = {}
    for slot, node in enumerate(nodes):
        if isinstance(node, (ParameterNode, VariableNode)):
            param_column[slot] = len(param_column)

    with np.errstate(all="ignore"):
        for slot in range(len(nodes) - 1, -1, -1):
            node = nodes[slot]
            if isinstance(node, ParameterNode):
                values[slot] = np.full(n, node.value)
            elif isinstance(node, VariableNode):
                values[slot] = node.weight * X[:, node.index]
            else:
                values[slot] = apply_symbol(node.symbol, *(values[c] for c in child_slots[slot]))

        jacobian = np.zeros((n, len(param_column)))
        adjoint: List[Optional[np.ndarray]] = [None] * len(nodes)
        adjoint[0] = np.ones(n)
        for slot, node in enumerate(nodes):
            g = adjoint[slot]
            if isinstance(node, ParameterNode):
                jacobian[:, param_column[slot]] = g
                continue
            if isinstance(node, VariableNode):
                jacobian[:, param_column[slot]] = g * X[:, node.index]
                continue
            args = [values[c] for c in child_slots[slot]]
            for c, partial in zip(child_slots[slot], _local_partials(node.symbol, args, values[slot])):
                adjoint[c] = g * partial
    return values[0], jacobian


def _local_partials(symbol: FunctionSymbol, args: List[np.ndarray], out: np.ndarray) -> List[np.ndarray]:
    if symbol is FunctionSymbol.ADD:
        return [1.0, 1.0]
    if symbol is FunctionSymbol.SUB:
        return [1.0, -1.0]
    if symbol is FunctionSymbol.MUL:
        return [args[1], args[0]]
    if symbol is FunctionSymbol.DIV:
        return [1.0 / args[1], -args[0] / (args[1] * args[1])]
    if symbol is FunctionSymbol.AQ:
        s = np.sqrt(1.0 + args[1] * args[1])
        return [1.0 / s, -args[0] * args[1] / (s * s * s)]
    a = args[0]
    if symbol is FunctionSymbol.SQRT:
        return [0.5 / out]
    if symbol is FunctionSymbol.SQUARE:
        return [2.0 * a]
    if symbol is FunctionSymbol.LOG:
        return [1.0 / a]
    if symbol is FunctionSymbol.EXP:
        return [out]
    if symbol is FunctionSymbol.SIN:
        return [np.cos(a)]
    if symbol is FunctionSymbol.TANH:
        return [1.0 - out * out]
    raise ValueError(f"Unknown symbol: {symbol}")


# ---------------------------------------------------------------------------
# Symbolic differentiation
# ---------------------------------------------------------------------------

ZERO = ParameterNode(0.0)
ONE = ParameterNode(1.0)


def _is_const(node: Node, value: float) -> bool:
    return isinstance(node, ParameterNode) and node.value == value


def make_node(symbol: FunctionSymbol, *children: Node) -> Node:
    """Build a function node, folding constants."""
    if all(isinstance(child, ParameterNode) for child in children):
        folded = apply_symbol(symbol, *(np.array([child.value]) for child in children))
        return ParameterNode(float(folded[0]))
    if symbol is FunctionSymbol.ADD:
        a, b = children
        if _is_const(a, 0.0):
            return b
        if _is_const(b, 0.0):
            return a
    elif symbol is FunctionSymbol.SUB:
        if _is_const(children[1], 0.0):
            return children[0]
    elif symbol is FunctionSymbol.MUL:
        a, b = children
        if _is_const(a, 0.0) or _is_const(b, 0.0):
            return ZERO
        if _is_const(a, 1.0):
            return b
        if _is_const(b, 1.0):
            return a
    elif symbol is FunctionSymbol.DIV:
        a, b = children
        if _is_const(a, 0.0):
            return ZERO
        if _is_const(b, 1.0):
            return a
    return FunctionNode(symbol, tuple(children))


def differentiate(tree: ExpressionTree, variable: int) -> ExpressionTree:
    """Partial derivative of the tree with respect to input variable `variable`."""
    return ExpressionTree(_derive(tree.root, variable))


def _derive(node: Node, variable: int) -> Node:
    if isinstance(node, ParameterNode):
        return ZERO
    if isinstance(node, VariableNode):
        return ParameterNode(node.weight) if node.index == variable else ZERO

    S = FunctionSymbol
    symbol = node.symbol
    a = node.children[0]
    da = _derive(a, variable)
    if symbol.arity == 2:
        b = node.children[1]
        db = _derive(b, variable)
        if symbol is S.ADD:
            return make_node(S.ADD, da, db)
        if symbol is S.SUB:
            return make_node(S.SUB, da, db)
        if symbol is S.MUL:
            return make_node(S.ADD, make_node(S.MUL, da, b), make_node(S.MUL, a, db))
        if symbol is S.DIV:
            numerator = make_node(S.SUB, make_node(S.MUL, da, b), make_node(S.MUL, a, db))
            return make_node(S.DIV, numerator, make_node(S.SQUARE, b))
        # AQ(a, b) = a (1 + b^2)^(-1/2); AQ applied three times to b gives the (1 + b^2)^(-3/2) factor
        first = make_node(S.AQ, da, b)
        inner = make_node(S.MUL, make_node(S.MUL, a, b), db)
        if _is_const(inner, 0.0):
            return first
        second = make_node(S.AQ, make_node(S.AQ, make_node(S.AQ, inner, b), b), b)
        return make_node(S.SUB, first, second)

    if _is_const(da, 0.0):
        return ZERO
    if symbol is S.SQRT:
        return make_node(S.DIV, da, make_node(S.MUL, ParameterNode(2.0), node))
    if symbol is S.SQUARE:
        return make_node(S.MUL, make_node(S.MUL, ParameterNode(2.0), a), da)
    if symbol is S.LOG:
        return make_node(S.DIV, da, a)
    if symbol is S.EXP:
        return make_node(S.MUL, node, da)
    if symbol is S.SIN:
        cosine = make_node(S.SIN, make_node(S.ADD, a, ParameterNode(math.pi / 2)))
        return make_node(S.MUL, cosine, da)
    if symbol is S.TANH:
        return make_node(S.MUL, make_node(S.SUB, ONE, make_node(S.SQUARE, node)), da)
    raise ValueError(f"Unknown symbol: {symbol}")


# ---------------------------------------------------------------------------
# Infix codec
# ---------------------------------------------------------------------------

_OPERATORS = {FunctionSymbol.ADD: "+", FunctionSymbol.SUB: "-", FunctionSymbol.MUL: "*", FunctionSymbol.DIV: "/"}


def _format_number(value: float) -> str:
    text = repr(float(value))
    return f"({text})" if value < 0 or text.startswith("-") else text


def to_infix(tree: ExpressionTree, names: Optional[Sequence[str]] = None) -> str:
    """Render e.g. `(2.031 * x0) + exp((-0.5) * sq(x1))`; floats use their shortest exact repr."""

    def name_of(index: int) -> str:
        return names[index] if names is not None else f"x{index}"

    def render(node: Node, top: bool) -> str:
        if isinstance(node, ParameterNode):
            return _format_number(node.value)
        if isinstance(node, VariableNode):
            if node.weight == 1.0:
                return name_of(node.index)
            text = f"{_format_number(node.weight)} * {name_of(node.index)}"
            return text if top else f"({text})"
        if node.symbol in _OPERATORS:
            a, b = (render(child, False) for child in node.children)
            text = f"{a} {_OPERATORS[node.symbol]} {b}"
            return text if top else f"({text})"
        args = ", ".join(render(child, True) for child in node.children)
        return f"{node.symbol.value}({args})"

    return render(tree.root, True)


_CALLS = {
    "sqrt": FunctionSymbol.SQRT,
    "sq": FunctionSymbol.SQUARE,
    "log": FunctionSymbol.LOG,
    "exp": FunctionSymbol.EXP,
    "sin": FunctionSymbol.SIN,
    "tanh": FunctionSymbol.TANH,
    "aq": FunctionSymbol.AQ,
}
_CONSTANTS = {"pi": math.pi, "inf": math.inf, "nan": math.nan}
_INDEXED_VARIABLE = re.compile(r"^x(\d+)$")


def parse_infix(text: str, names: Optional[Sequence[str]] = None, n_variables: Optional[int] = None) -> ExpressionTree:
    """Parse the infix format produced by `to_infix`, plus `/`, `^` and named variables."""
    try:
        parsed = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as e:
        raise ExpressionParseError(f"Invalid expression {text!r}: {e.msg}") from e

    lookup = {name: i for i, name in enumerate(names or [])}
    limit = n_variables if n_variables is not None else (len(names) if names else None)

    def variable(identifier: str) -> VariableNode:
        if identifier in lookup:
            return VariableNode(lookup[identifier])
        match = _INDEXED_VARIABLE.match(identifier)
        if match is None:
            raise ExpressionParseError(f"Unknown name {identifier!r}")
        index = int(match.group(1))
        if limit is not None and index >= limit:
            raise ExpressionParseError(f"Variable {identifier!r} out of range for {limit} variables")
        return VariableNode(index)

    def power(base: Node, exponent: float) -> Node:
        if exponent == 0.5:
            return FunctionNode(FunctionSymbol.SQRT, (base,))
        if exponent != int(exponent) or exponent == 0:
            raise ExpressionParseError(f"Unsupported exponent {exponent}")
        n = int(abs(exponent))
        result: Optional[Node] = None
        factor = base
        while n:
            if n & 1:
                result = factor if result is None else FunctionNode(FunctionSymbol.MUL, (result, factor))
            n >>= 1
            if n:
                factor = FunctionNode(FunctionSymbol.SQUARE, (factor,))
        return FunctionNode(FunctionSymbol.DIV, (ONE, result)) if exponent < 0 else result

    def visit(node: ast.AST) -> Node:
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return ParameterNode(float(node.value))
        if isinstance(node, ast.Name):
            if node.id in _CONSTANTS and node.id not in lookup:
                return ParameterNode(_CONSTANTS[node.id])
            return variable(node.id)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            operand = visit(node.operand)
            if isinstance(node.op, ast.UAdd):
                return operand
            if isinstance(operand, ParameterNode):
                return ParameterNode(-operand.value)
            return FunctionNode(FunctionSymbol.MUL, (ParameterNode(-1.0), operand))
        if isinstance(node, ast.BinOp):
            left = visit(node.left)
            if isinstance(node.op, ast.Pow):
                right = visit(node.right)
                if not isinstance(right, ParameterNode):
                    raise ExpressionParseError("Exponents must be numeric literals")
                return power(left, right.value)
            right = visit(node.right)
            if isinstance(node.op, ast.Mult):
                if isinstance(left, ParameterNode) and isinstance(right, VariableNode) and right.weight == 1.0:
                    return VariableNode(right.index, left.value)
                return FunctionNode(FunctionSymbol.MUL, (left, right))
            if isinstance(node.op, ast.Add):
                return FunctionNode(FunctionSymbol.ADD, (left, right))
            if isinstance(node.op, ast.Sub):
                return FunctionNode(FunctionSymbol.SUB, (left, right))
            if isinstance(node.op, ast.Div):
                return FunctionNode(FunctionSymbol.DIV, (left, right))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _CALLS:
            symbol = _CALLS[node.func.id]
            if len(node.args) != symbol.arity or node.keywords:
                raise ExpressionParseError(f"{node.func.id} expects {symbol.arity} argument(s)")
            return FunctionNode(symbol, tuple(visit(arg) for arg in node.args))
        raise ExpressionParseError(f"Unsupported syntax: {ast.unparse(node)}")

    return ExpressionTree(visit(parsed.body))
