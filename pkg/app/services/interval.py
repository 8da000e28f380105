# app/services/interval.py
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence, Tuple, Union

import numpy as np

from app.services.expression import (
    ExpressionTree,
    FunctionNode,
    FunctionSymbol,
    Node,
    ParameterNode,
    VariableNode,
    apply_symbol,
)


@dataclass(frozen=True)
class Interval:
    """Closed interval [lo, hi]; a nan endpoint marks the Undefined interval."""

    lo: float
    hi: float

    @classmethod
    def point(cls, value: float) -> "Interval":
        return cls(value, value)

    @property
    def is_undefined(self) -> bool:
        return math.isnan(self.lo) or math.isnan(self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, value: float, tolerance: float = 0.0) -> bool:
        return not self.is_undefined and self.lo - tolerance <= value <= self.hi + tolerance

    def is_subset(self, other: "Interval") -> bool:
        if self.is_undefined or other.is_undefined:
            return False
        return other.lo <= self.lo and self.hi <= other.hi

    def __contains__(self, value: float) -> bool:
        return self.contains(value)

    def __str__(self) -> str:
        if self.is_undefined:
            return "undefined"
        return f"[{self.lo:g}, {self.hi:g}]"


UNDEFINED = Interval(math.nan, math.nan)
ENTIRE = Interval(-math.inf, math.inf)


@dataclass(frozen=True)
class Box:
    intervals: Tuple[Interval, ...]

    @classmethod
    def from_bounds(cls, bounds: Iterable[Sequence[float]]) -> "Box":
        return cls(tuple(Interval(float(lo), float(hi)) for lo, hi in bounds))

    def __post_init__(self):
        for interval in self.intervals:
            if interval.is_undefined or interval.lo > interval.hi:
                raise ValueError(f"Invalid box interval {interval}")

    def __len__(self) -> int:
        return len(self.intervals)

    def __getitem__(self, index: int) -> Interval:
        return self.intervals[index]

    @property
    def lower(self) -> np.ndarray:
        return np.array([i.lo for i in self.intervals])

    @property
    def upper(self) -> np.ndarray:
        return np.array([i.hi for i in self.intervals])

    def replace(self, index: int, interval: Interval) -> "Box":
        intervals = list(self.intervals)
        intervals[index] = interval
        return Box(tuple(intervals))

    def is_subset(self, other: "Box") -> bool:
        return len(self) == len(other) and all(a.is_subset(b) for a, b in zip(self.intervals, other.intervals))

    def contains_points(self, X: np.ndarray) -> np.ndarray:
        return np.all((X >= self.lower) & (X <= self.upper), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, len(self)))

    def __str__(self) -> str:
        return " x ".join(str(i) for i in self.intervals)


# ---------------------------------------------------------------------------
# Elementary operations. Each computed endpoint is widened outward by one ulp; zero endpoints stay
# as they are since a zero sum, difference or product with a zero factor is exact.
# ---------------------------------------------------------------------------

def _down(x: float) -> float:
    return math.nextafter(x, -math.inf) if math.isfinite(x) and x != 0.0 else x


def _up(x: float) -> float:
    return math.nextafter(x, math.inf) if math.isfinite(x) and x != 0.0 else x


def _outward(lo: float, hi: float) -> Interval:
    return Interval(_down(lo), _up(hi))


def _f(symbol: FunctionSymbol, *args: float) -> float:
    """Scalar endpoint image using the same kernels as point evaluation."""
    return float(apply_symbol(symbol, *(np.array([a], dtype=float) for a in args))[0])


def _mul(a: float, b: float) -> float:
    # inf * 0 resolves to 0 for enclosure purposes
    if a == 0.0 or b == 0.0:
        return 0.0
    return a * b


def _multiply(x: Interval, y: Interval) -> Interval:
    products = [_mul(x.lo, y.lo), _mul(x.lo, y.hi), _mul(x.hi, y.lo), _mul(x.hi, y.hi)]
    return _outward(min(products), max(products))


def _divide(x: Interval, y: Interval) -> Tuple[Interval, bool]:
    if y.lo == 0.0 and y.hi == 0.0:
        return UNDEFINED, True
    if y.lo > 0.0 or y.hi < 0.0:
        with np.errstate(all="ignore"):
            quotients = [x.lo / y.lo, x.lo / y.hi, x.hi / y.lo, x.hi / y.hi]
        if any(math.isnan(q) for q in quotients):
            return ENTIRE, False
        return _outward(min(quotients), max(quotients)), False
    # zero in the denominator: the quotient may leave the domain
    if x.lo == 0.0 and x.hi == 0.0:
        return Interval(0.0, 0.0), True
    if y.lo == 0.0:
        return _multiply(x, Interval(_down(1.0 / y.hi), math.inf)), True
    if y.hi == 0.0:
        return _multiply(x, Interval(-math.inf, _up(1.0 / y.lo))), True
    return ENTIRE, True


def _square(x: Interval) -> Interval:
    if x.lo <= 0.0 <= x.hi:
        return Interval(0.0, _up(max(x.lo * x.lo, x.hi * x.hi)))
    a, b = x.lo * x.lo, x.hi * x.hi
    return Interval(max(0.0, _down(min(a, b))), _up(max(a, b)))


def _sin(x: Interval) -> Interval:
    if not (math.isfinite(x.lo) and math.isfinite(x.hi)) or x.width >= 2.0 * math.pi:
        return Interval(-1.0, 1.0)
    a, b = _f(FunctionSymbol.SIN, x.lo), _f(FunctionSymbol.SIN, x.hi)
    lo, hi = _down(min(a, b)), _up(max(a, b))
    slack = 1e-12 * (1.0 + max(abs(x.lo), abs(x.hi)))
    if _encloses_critical_point(x, math.pi / 2, slack):
        hi = 1.0
    if _encloses_critical_point(x, -math.pi / 2, slack):
        lo = -1.0
    return Interval(max(lo, -1.0), min(hi, 1.0))


def _encloses_critical_point(x: Interval, phase: float, slack: float) -> bool:
    k = math.ceil((x.lo - slack - phase) / (2.0 * math.pi))
    return phase + 2.0 * math.pi * k <= x.hi + slack


def negate(x: Interval) -> Interval:
    if x.is_undefined:
        return UNDEFINED
    return Interval(-x.hi, -x.lo)


def _binary(op: FunctionSymbol, x: Interval, y: Interval) -> Tuple[Interval, bool]:
    if x.is_undefined or y.is_undefined:
        return UNDEFINED, False
    if op is FunctionSymbol.ADD:
        return _outward(x.lo + y.lo, x.hi + y.hi), False
    if op is FunctionSymbol.SUB:
        return _outward(x.lo - y.hi, x.hi - y.lo), False
    if op is FunctionSymbol.MUL:
        return _multiply(x, y), False
    if op is FunctionSymbol.DIV:
        return _divide(x, y)
    if op is FunctionSymbol.AQ:
        squared = _square(y)
        denominator = _unary(FunctionSymbol.SQRT, _outward(1.0 + squared.lo, 1.0 + squared.hi))[0]
        return _divide(x, Interval(max(1.0, denominator.lo), denominator.hi))[0], False
    raise ValueError(f"{op} is not a binary symbol")


def _unary(op: Union[FunctionSymbol, str], x: Interval) -> Tuple[Interval, bool]:
    if x.is_undefined:
        return UNDEFINED, False
    if op == "neg":
        return negate(x), False
    if op is FunctionSymbol.SQUARE:
        return _square(x), False
    if op is FunctionSymbol.SQRT:
        if x.hi < 0.0:
            return UNDEFINED, True
        lo = max(x.lo, 0.0)
        return Interval(max(0.0, _down(_f(op, lo))), _up(_f(op, x.hi))), x.lo < 0.0
    if op is FunctionSymbol.LOG:
        if x.hi <= 0.0:
            return UNDEFINED, True
        lo = -math.inf if x.lo <= 0.0 else _down(_f(op, x.lo))
        return Interval(lo, _up(_f(op, x.hi))), x.lo <= 0.0
    if op is FunctionSymbol.EXP:
        return Interval(max(0.0, _down(_f(op, x.lo))), _up(_f(op, x.hi))), False
    if op is FunctionSymbol.TANH:
        return Interval(max(-1.0, _down(_f(op, x.lo))), min(1.0, _up(_f(op, x.hi)))), False
    if op is FunctionSymbol.SIN:
        return _sin(x), False
    raise ValueError(f"{op} is not a unary symbol")


def interval_binary(op: FunctionSymbol, x: Interval, y: Interval) -> Interval:
    return _binary(op, x, y)[0]


def interval_unary(op: Union[FunctionSymbol, Literal["neg"]], x: Interval) -> Interval:
    return _unary(op, x)[0]


# ---------------------------------------------------------------------------
# Tree enclosure
# ---------------------------------------------------------------------------

def _bounded(x: Interval) -> bool:
    return math.isfinite(x.lo) and math.isfinite(x.hi)


def evaluate_interval_checked(tree: ExpressionTree, box: Box) -> Tuple[Interval, bool]:
    """Enclosure of the tree's image over the box, plus whether it cannot certify finiteness.

    The flag is set when any node needed partial-domain clipping or has an unbounded enclosure.
    """

    def visit(node: Node) -> Tuple[Interval, bool]:
        if isinstance(node, ParameterNode):
            value = Interval.point(node.value)
            return value, not _bounded(value)
        if isinstance(node, VariableNode):
            domain = box[node.index]
            value = domain if node.weight == 1.0 else _multiply(Interval.point(node.weight), domain)
            return value, not _bounded(value)
        results = [visit(child) for child in node.children]
        clipped = any(c for _, c in results)
        if node.symbol.arity == 2:
            value, local = _binary(node.symbol, results[0][0], results[1][0])
        else:
            value, local = _unary(node.symbol, results[0][0])
        return value, clipped or local or not _bounded(value)

    return visit(tree.root)


def evaluate_interval(tree: ExpressionTree, box: Box) -> Interval:
    return evaluate_interval_checked(tree, box)[0]
