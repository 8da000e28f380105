# app/services/constraints.py
import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterator, Optional, Sequence, Tuple

from app.core.errors import ConfigurationError
from app.services.expression import ExpressionTree, differentiate
from app.services.interval import Box, Interval, evaluate_interval_checked

logger = logging.getLogger(__name__)


class ConstraintKind(str, Enum):
    IMAGE = "image"
    FIRST_DERIVATIVE = "first_derivative"
    SECOND_DERIVATIVE = "second_derivative"

    @property
    def order(self) -> int:
        return {"image": 0, "first_derivative": 1, "second_derivative": 2}[self.value]


@dataclass(frozen=True)
class ShapeConstraint:
    kind: ConstraintKind
    target: Interval
    region: Box
    variable: Optional[int] = None

    def __post_init__(self):
        if self.target.is_undefined or self.target.lo > self.target.hi:
            raise ConfigurationError(f"Invalid constraint target {self.target}")
        if self.kind is not ConstraintKind.IMAGE:
            if self.variable is None or not 0 <= self.variable < len(self.region):
                raise ConfigurationError(f"Derivative constraint needs a variable index in [0, {len(self.region)})")

    def label(self, names: Optional[Sequence[str]] = None) -> str:
        if self.kind is ConstraintKind.IMAGE:
            quantity = "f"
        else:
            name = names[self.variable] if names else f"x{self.variable}"
            quantity = f"d/d{name}" if self.kind is ConstraintKind.FIRST_DERIVATIVE else f"d2/d{name}2"
        if math.isinf(self.target.hi) and math.isfinite(self.target.lo):
            text = f"{quantity} >= {self.target.lo:g}"
        elif math.isinf(self.target.lo) and math.isfinite(self.target.hi):
            text = f"{quantity} <= {self.target.hi:g}"
        else:
            text = f"{quantity} in {self.target}"
        return f"{text} on {self.region}"


@dataclass(frozen=True)
class ConstraintSet:
    constraints: Tuple[ShapeConstraint, ...] = ()

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self) -> Iterator[ShapeConstraint]:
        return iter(self.constraints)

    def __getitem__(self, index: int) -> ShapeConstraint:
        return self.constraints[index]


@dataclass(frozen=True)
class ViolationVector:
    penalties: Tuple[float, ...]
    feasible: bool

    @property
    def total(self) -> float:
        return float(sum(self.penalties))


def expand_tuple(range_: Interval, signs: Sequence[int], domain: Box) -> ConstraintSet:
    """Expand `(range, s_1, ..., s_n)`: one image constraint plus one monotonicity constraint per nonzero sign."""
    if len(signs) != len(domain):
        raise ConfigurationError(f"Expected {len(domain)} signs, got {len(signs)}")
    constraints = [ShapeConstraint(ConstraintKind.IMAGE, range_, domain)]
    for index, sign in enumerate(signs):
        if sign not in (-1, 0, 1):
            raise ConfigurationError(f"Monotonicity signs must be -1, 0 or 1, got {sign}")
        if sign == 1:
            constraints.append(ShapeConstraint(ConstraintKind.FIRST_DERIVATIVE, Interval(0.0, math.inf), domain, index))
        elif sign == -1:
            constraints.append(ShapeConstraint(ConstraintKind.FIRST_DERIVATIVE, Interval(-math.inf, 0.0), domain, index))
    return ConstraintSet(tuple(constraints))


@lru_cache(maxsize=8192)
def derivative_tree(model: ExpressionTree, variable: int, order: int) -> ExpressionTree:
    tree = model
    for _ in range(order):
        tree = differentiate(tree, variable)
    return tree


def constraint_tree(model: ExpressionTree, constraint: ShapeConstraint) -> ExpressionTree:
    if constraint.kind is ConstraintKind.IMAGE:
        return model
    return derivative_tree(model, constraint.variable, constraint.kind.order)


def evaluate_constraint(model: ExpressionTree, constraint: ShapeConstraint) -> Interval:
    return evaluate_interval_checked(constraint_tree(model, constraint), constraint.region)[0]


def penalty(enclosure: Interval, target: Interval) -> float:
    """Soft penalty P = P_inf + P_sup; infinite target endpoints never contribute."""
    if enclosure.is_undefined:
        return math.inf
    lower = abs(min(enclosure.lo - target.lo, 0.0)) if math.isfinite(target.lo) else 0.0
    upper = abs(max(enclosure.hi - target.hi, 0.0)) if math.isfinite(target.hi) else 0.0
    return lower + upper


def violation(model: ExpressionTree, constraints: ConstraintSet) -> ViolationVector:
    penalties = []
    certified = True
    for constraint in constraints:
        enclosure, clipped = evaluate_interval_checked(constraint_tree(model, constraint), constraint.region)
        if constraint.kind is not ConstraintKind.IMAGE:
            # the derivative tree may have lost sub-expressions of the model through constant folding
            image, image_clipped = evaluate_interval_checked(model, constraint.region)
            clipped = clipped or image_clipped or image.is_undefined
        p = penalty(enclosure, constraint.target)
        penalties.append(p)
        if clipped or enclosure.is_undefined:
            certified = False
    vector = ViolationVector(tuple(penalties), certified and all(p == 0.0 for p in penalties))
    logger.debug("violation %s -> %s", model, vector)
    return vector


def is_feasible(model: ExpressionTree, constraints: ConstraintSet) -> bool:
    return violation(model, constraints).feasible
