# app/services/problems.py
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.core.errors import ConfigurationError, SamplingError, UnknownInstanceError
from app.services.constraints import ConstraintKind, ConstraintSet, ShapeConstraint, expand_tuple
from app.services.expression import ExpressionTree, evaluate_batch, parse_infix
from app.services.interval import Box, Interval

logger = logging.getLogger(__name__)

PARTITION_SIZE = 100
MAX_DRAWS = 1_000_000
NOISE_LEVELS = (0.0, 0.1, 0.3, 1.0)


class SplitKind(str, Enum):
    IN_DOMAIN = "in-domain"
    OUT_OF_DOMAIN = "out-of-domain"


@dataclass(frozen=True)
class Variable:
    name: str
    domain: Interval


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    name: str
    variables: Tuple[Variable, ...]
    expression: str
    closed_form: Callable[[np.ndarray], np.ndarray]
    constraints: ConstraintSet
    ground_truth: Optional[ExpressionTree] = None
    extrapolation_fraction: float = 0.1

    @property
    def names(self) -> List[str]:
        return [v.name for v in self.variables]

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    @property
    def domain(self) -> Box:
        return Box(tuple(v.domain for v in self.variables))

    def target(self, X: np.ndarray) -> np.ndarray:
        with np.errstate(all="ignore"):
            return np.asarray(self.closed_form(np.atleast_2d(X)), dtype=float)


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: Dataset
    validation: Dataset
    test: Dataset
    noise_level: float
    split: SplitKind
    metadata: Dict[str, object] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Instance definition files
# ---------------------------------------------------------------------------

Bounds = Tuple[Optional[float], Optional[float]]


def _to_interval(bounds: Bounds) -> Interval:
    lo, hi = bounds
    return Interval(-math.inf if lo is None else float(lo), math.inf if hi is None else float(hi))


class VariableDefinition(BaseModel):
    name: str
    domain: Tuple[float, float]

    @field_validator("domain")
    @classmethod
    def ordered(cls, value):
        if not value[0] <= value[1]:
            raise ValueError(f"domain lower bound exceeds upper bound: {value}")
        return value


class ConstraintTuple(BaseModel):
    """`(range, s_1, ..., s_n)`; None endpoints are unbounded."""

    range: Bounds = (0.0, None)
    signs: List[int]


class ConstraintDefinition(BaseModel):
    kind: ConstraintKind
    variable: Optional[str] = None
    target: Bounds
    region: Dict[str, Tuple[float, float]] = {}


class InstanceDefinition(BaseModel):
    name: str
    variables: List[VariableDefinition] = Field(min_length=1)
    expression: str
    constraint_tuple: Optional[ConstraintTuple] = None
    constraints: List[ConstraintDefinition] = []
    extrapolation_fraction: float = Field(default=0.1, gt=0.0, lt=0.5)

    @model_validator(mode="after")
    def one_constraint_form(self):
        if self.constraint_tuple is not None and self.constraints:
            raise ValueError("use either constraint_tuple or constraints, not both")
        return self


def build_instance(
    definition: InstanceDefinition,
    closed_form: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    parse: bool = True,
) -> ProblemInstance:
    variables = tuple(Variable(v.name, Interval(*v.domain)) for v in definition.variables)
    names = [v.name for v in variables]
    domain = Box(tuple(v.domain for v in variables))
    tree = parse_infix(definition.expression, names=names) if parse else None
    if closed_form is None:
        if tree is None:
            raise ConfigurationError(f"{definition.name}: no evaluator for the ground truth")
        closed_form = lambda X, _tree=tree: evaluate_batch(_tree, X)

    if definition.constraint_tuple is not None:
        constraints = expand_tuple(_to_interval(definition.constraint_tuple.range), definition.constraint_tuple.signs, domain)
    else:
        constraints = ConstraintSet(tuple(_build_constraint(c, names, domain) for c in definition.constraints))

    return ProblemInstance(
        name=definition.name,
        variables=variables,
        expression=definition.expression,
        closed_form=closed_form,
        constraints=constraints,
        ground_truth=tree,
        extrapolation_fraction=definition.extrapolation_fraction,
    )


def _build_constraint(definition: ConstraintDefinition, names: List[str], domain: Box) -> ShapeConstraint:
    region = domain
    for name, (lo, hi) in definition.region.items():
        if name not in names:
            raise ConfigurationError(f"Unknown variable {name!r} in constraint region")
        index = names.index(name)
        sub = Interval(float(lo), float(hi))
        if not sub.is_subset(domain[index]):
            raise ConfigurationError(f"Constraint region {sub} for {name} leaves the domain {domain[index]}")
        region = region.replace(index, sub)
    variable = None
    if definition.kind is not ConstraintKind.IMAGE:
        if definition.variable not in names:
            raise ConfigurationError(f"Unknown variable {definition.variable!r} in derivative constraint")
        variable = names.index(definition.variable)
    return ShapeConstraint(definition.kind, _to_interval(definition.target), region, variable)


REGISTRATION_AUDIT_SAMPLES = 10_000


def validate_ground_truth(
    instance: ProblemInstance,
    n_samples: int = REGISTRATION_AUDIT_SAMPLES,
    rng: Optional[np.random.Generator] = None,
) -> None:
    """Raise ConfigurationError unless the ground truth passes its own sampling audit."""
    from app.services.audit import audit_feasibility

    model = instance.ground_truth if instance.ground_truth is not None else instance.closed_form
    verdict = audit_feasibility(model, instance, n_samples=n_samples, rng=rng)
    if not verdict.feasible:
        raise ConfigurationError(f"{instance.name}: ground truth violates its own constraints: {verdict}")


def load_instance_file(path: str, validate_samples: int = REGISTRATION_AUDIT_SAMPLES) -> ProblemInstance:
    """Load a JSON instance; the ground truth must pass its own sampling audit."""
    try:
        definition = InstanceDefinition.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid instance file {path}: {exc}") from exc
    instance = build_instance(definition)
    if validate_samples:
        validate_ground_truth(instance, validate_samples)
    logger.info("Loaded instance %s from %s", instance.name, path)
    return instance


# ---------------------------------------------------------------------------
# Built-in instances
# ---------------------------------------------------------------------------

def _columns(X: np.ndarray, n: int) -> List[np.ndarray]:
    return [X[:, i] for i in range(n)]


def _pagie(X):
    x, y = _columns(X, 2)
    return 1.0 / (1.0 + x ** -4.0) + 1.0 / (1.0 + y ** -4.0)


def _kotanchek(X):
    x1, x2 = _columns(X, 2)
    return np.exp(-((x1 - 1.0) ** 2)) / (1.2 + (x2 - 2.5) ** 2)


def _unwrapped_ball(X):
    return 10.0 / (5.0 + np.sum((X[:, :5] - 3.0) ** 2, axis=1))


_FEYNMAN = [
    # name, variables (name, lo, hi), infix expression, closed form, signs
    ("I.6.20", [("sigma", 1, 3), ("theta", 1, 3)],
     "exp(-((theta / sigma)^2) / 2) / (sqrt(2 * pi) * sigma)",
     lambda X: np.exp(-((X[:, 1] / X[:, 0]) ** 2) / 2) / (np.sqrt(2 * np.pi) * X[:, 0]),
     [0, -1]),
    ("I.9.18", [("x1", 3, 4), ("y1", 3, 4), ("z1", 3, 4), ("m1", 1, 2), ("m2", 1, 2), ("G", 1, 2),
                ("x2", 1, 2), ("y2", 1, 2), ("z2", 1, 2)],
     "G * m1 * m2 / ((x2 - x1)^2 + (y2 - y1)^2 + (z2 - z1)^2)",
     lambda X: X[:, 5] * X[:, 3] * X[:, 4]
     / ((X[:, 6] - X[:, 0]) ** 2 + (X[:, 7] - X[:, 1]) ** 2 + (X[:, 8] - X[:, 2]) ** 2),
     [-1, -1, -1, 1, 1, 1, 1, 1, 1]),
    ("I.15.3x", [("x", 5, 10), ("u", 1, 2), ("t", 1, 2), ("c", 3, 20)],
     "(x - u * t) / sqrt(1 - u^2 / c^2)",
     lambda X: (X[:, 0] - X[:, 1] * X[:, 2]) / np.sqrt(1 - X[:, 1] ** 2 / X[:, 3] ** 2),
     [1, 0, -1, -1]),
    # lambd capped at 2 so that lambd / (n * d) <= 1 over the whole box
    ("I.30.5", [("lambd", 1, 2), ("n", 1, 5), ("d", 2, 5)],
     "asin(lambd / (n * d))",
     lambda X: np.arcsin(X[:, 0] / (X[:, 1] * X[:, 2])),
     [1, -1, -1]),
    ("I.32.17", [("eps", 1, 2), ("c", 1, 2), ("Ef", 1, 2), ("r", 1, 2), ("omega", 1, 2), ("omega0", 3, 5)],
     "0.5 * eps * c * Ef^2 * (8 * pi * r^2 / 3) * (omega^4 / (omega^2 - omega0^2)^2)",
     lambda X: 0.5 * X[:, 0] * X[:, 1] * X[:, 2] ** 2 * (8 * np.pi * X[:, 3] ** 2 / 3)
     * (X[:, 4] ** 4 / (X[:, 4] ** 2 - X[:, 5] ** 2) ** 2),
     [1, 1, 1, 1, 1, -1]),
    ("I.41.16", [("omega", 1, 5), ("T", 1, 5), ("h", 1, 5), ("kb", 1, 5), ("c", 1, 5)],
     "h * omega^3 / (pi^2 * c^2 * (exp(h * omega / (kb * T)) - 1))",
     lambda X: X[:, 2] * X[:, 0] ** 3
     / (np.pi ** 2 * X[:, 4] ** 2 * (np.exp(X[:, 2] * X[:, 0] / (X[:, 3] * X[:, 1])) - 1)),
     [0, 1, -1, 1, -1]),
    ("I.48.20", [("m", 1, 5), ("v", 1, 2), ("c", 3, 20)],
     "m * c^2 / sqrt(1 - v^2 / c^2)",
     lambda X: X[:, 0] * X[:, 2] ** 2 / np.sqrt(1 - X[:, 1] ** 2 / X[:, 2] ** 2),
     [1, 1, 1]),
    ("II.6.15a", [("eps", 1, 3), ("p_d", 1, 3), ("r", 1, 3), ("x", 1, 3), ("y", 1, 3), ("z", 1, 3)],
     "p_d / (4 * pi * eps) * 3 * z / r^5 * sqrt(x^2 + y^2)",
     lambda X: X[:, 1] / (4 * np.pi * X[:, 0]) * 3 * X[:, 5] / X[:, 2] ** 5 * np.sqrt(X[:, 3] ** 2 + X[:, 4] ** 2),
     [-1, 1, -1, 1, 1, 1]),
    ("II.11.27", [("n", 0, 1), ("alpha", 0, 1), ("eps", 1, 2), ("Ef", 1, 2)],
     "n * alpha / (1 - n * alpha / 3) * eps * Ef",
     lambda X: X[:, 0] * X[:, 1] / (1 - X[:, 0] * X[:, 1] / 3) * X[:, 2] * X[:, 3],
     [1, 1, 1, 1]),
    ("II.11.28", [("n", 0, 1), ("alpha", 0, 1)],
     "1 + n * alpha / (1 - n * alpha / 3)",
     lambda X: 1 + X[:, 0] * X[:, 1] / (1 - X[:, 0] * X[:, 1] / 3),
     [1, 1]),
    ("II.35.21", [("n_rho", 1, 5), ("mom", 1, 5), ("B", 1, 5), ("kb", 1, 5), ("T", 1, 5)],
     "n_rho * mom * tanh(mom * B / (kb * T))",
     lambda X: X[:, 0] * X[:, 1] * np.tanh(X[:, 1] * X[:, 2] / (X[:, 3] * X[:, 4])),
     [1, 1, 1, -1, -1]),
    ("III.9.52", [("p_d", 1, 3), ("Ef", 1, 3), ("t", 1, 3), ("h", 1, 3), ("omega", 1, 5), ("omega0", 1, 5)],
     "p_d * Ef * t / h * sin((omega - omega0) * t / 2)^2",
     lambda X: X[:, 0] * X[:, 1] * X[:, 2] / X[:, 3] * np.sin((X[:, 4] - X[:, 5]) * X[:, 2] / 2) ** 2,
     [1, 1, 0, -1, 0, 0]),
    ("III.10.19", [("mom", 1, 5), ("Bx", 1, 5), ("By", 1, 5), ("Bz", 1, 5)],
     "mom * sqrt(Bx^2 + By^2 + Bz^2)",
     lambda X: X[:, 0] * np.sqrt(X[:, 1] ** 2 + X[:, 2] ** 2 + X[:, 3] ** 2),
     [1, 1, 1, 1]),
]

# ground truths outside the tree vocabulary are evaluated by their closed form only
_CLOSED_FORM_ONLY = {"I.30.5"}


def _piecewise_monotone(names: Sequence[str], domains: Sequence[Tuple[float, float]], extremum: Sequence[float]):
    """Non-decreasing below each extremum and non-increasing above it; use `_flip` for the reverse."""
    constraints = []
    for name, (lo, hi), split in zip(names, domains, extremum):
        constraints.append(ConstraintDefinition(kind=ConstraintKind.FIRST_DERIVATIVE, variable=name,
                                                target=(0.0, None), region={name: (lo, split)}))
        constraints.append(ConstraintDefinition(kind=ConstraintKind.FIRST_DERIVATIVE, variable=name,
                                                target=(None, 0.0), region={name: (split, hi)}))
    return constraints


def _flip(constraints: List[ConstraintDefinition]) -> List[ConstraintDefinition]:
    return [c.model_copy(update={"target": (None if c.target[1] is None else -c.target[1],
                                            None if c.target[0] is None else -c.target[0])}) for c in constraints]


def _extrapolation_definitions() -> List[Tuple[InstanceDefinition, Callable]]:
    pagie_domains = [(-5.0, 5.0)] * 2
    pagie = InstanceDefinition(
        name="Pagie",
        variables=[VariableDefinition(name=n, domain=d) for n, d in zip(["x", "y"], pagie_domains)],
        expression="x^4 / (1 + x^4) + y^4 / (1 + y^4)",
        constraints=[ConstraintDefinition(kind=ConstraintKind.IMAGE, target=(0.0, 2.0))]
        + _flip(_piecewise_monotone(["x", "y"], pagie_domains, [0.0, 0.0])),
        extrapolation_fraction=0.3,
    )
    kotanchek_domains = [(-0.2, 4.2)] * 2
    kotanchek = InstanceDefinition(
        name="Kotanchek",
        variables=[VariableDefinition(name=n, domain=d) for n, d in zip(["x1", "x2"], kotanchek_domains)],
        expression="exp(-((x1 - 1)^2)) / (1.2 + (x2 - 2.5)^2)",
        constraints=[ConstraintDefinition(kind=ConstraintKind.IMAGE, target=(0.0, 1.0))]
        + _piecewise_monotone(["x1", "x2"], kotanchek_domains, [1.0, 2.5]),
    )
    ball_names = [f"x{i}" for i in range(1, 6)]
    ball_domains = [(-0.25, 6.35)] * 5
    ball = InstanceDefinition(
        name="UnwrappedBall",
        variables=[VariableDefinition(name=n, domain=d) for n, d in zip(ball_names, ball_domains)],
        expression="10 / (5 + " + " + ".join(f"({n} - 3)^2" for n in ball_names) + ")",
        constraints=[ConstraintDefinition(kind=ConstraintKind.IMAGE, target=(0.0, 2.0))]
        + _piecewise_monotone(ball_names, ball_domains, [3.0] * 5),
    )
    return [(pagie, _pagie), (kotanchek, _kotanchek), (ball, _unwrapped_ball)]


@lru_cache(maxsize=1)
def builtin_instances() -> Tuple[ProblemInstance, ...]:
    instances = []
    for name, variables, expression, closed_form, signs in _FEYNMAN:
        definition = InstanceDefinition(
            name=name,
            variables=[VariableDefinition(name=v, domain=(lo, hi)) for v, lo, hi in variables],
            expression=expression,
            constraint_tuple=ConstraintTuple(range=(0.0, None), signs=signs),
        )
        instances.append(build_instance(definition, closed_form, parse=name not in _CLOSED_FORM_ONLY))
    for definition, closed_form in _extrapolation_definitions():
        instances.append(build_instance(definition, closed_form))
    for instance in instances:
        validate_ground_truth(instance)
    logger.info("Registered %d built-in instances", len(instances))
    return tuple(instances)


def get_instance(name: str) -> ProblemInstance:
    for instance in builtin_instances():
        if instance.name.lower() == name.lower():
            return instance
    raise UnknownInstanceError(f"Unknown instance {name!r}")


def resolve_instance(name_or_path: str) -> ProblemInstance:
    if name_or_path.endswith(".json"):
        return load_instance_file(name_or_path)
    return get_instance(name_or_path)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def in_extrapolation_band(X: np.ndarray, domain: Box, fraction: float) -> np.ndarray:
    """True where any coordinate lies in the first or last `fraction` of its domain range."""
    span = domain.upper - domain.lower
    low_band = X < domain.lower + fraction * span
    high_band = X > domain.upper - fraction * span
    return np.any(low_band | high_band, axis=1)


def sample_dataset(
    instance: ProblemInstance,
    noise_level: float,
    split: SplitKind,
    rng: np.random.Generator,
    size: int = PARTITION_SIZE,
    max_draws: int = MAX_DRAWS,
) -> DatasetSplit:
    """Draw train/validation/test partitions; noise only touches train and validation targets.

    Inputs are drawn before any noise so the same rng state yields identical inputs
    (and test targets) across noise levels.
    """
    if noise_level < 0:
        raise ConfigurationError(f"noise_level must be non-negative, got {noise_level}")
    domain = instance.domain
    if split is SplitKind.IN_DOMAIN:
        X = domain.sample(3 * size, rng)
        X_train, X_val, X_test = X[:size], X[size:2 * size], X[2 * size:]
    else:
        X_train, X_val, X_test = _sample_out_of_domain(instance, size, rng, max_draws)

    y_train, y_val, y_test = (instance.target(X) for X in (X_train, X_val, X_test))
    sigma_y = float(np.std(np.concatenate([y_train, y_val])))
    scale = math.sqrt(noise_level) * sigma_y
    y_train = y_train + rng.normal(0.0, scale, size=len(y_train)) if scale > 0 else y_train
    y_val = y_val + rng.normal(0.0, scale, size=len(y_val)) if scale > 0 else y_val
    logger.debug("Sampled %s (%s, noise %.2f, sigma_y %.4g)", instance.name, split.value, noise_level, sigma_y)
    return DatasetSplit(
        train=Dataset(X_train, y_train),
        validation=Dataset(X_val, y_val),
        test=Dataset(X_test, y_test),
        noise_level=noise_level,
        split=split,
        metadata={"instance": instance.name, "noise_level": noise_level, "split": split.value, "sigma_y": sigma_y},
    )


def _sample_out_of_domain(instance: ProblemInstance, size: int, rng: np.random.Generator, max_draws: int):
    domain = instance.domain
    fraction = instance.extrapolation_fraction
    inner: List[np.ndarray] = []
    outer: List[np.ndarray] = []
    n_inner = n_outer = drawn = 0
    batch = 4 * size
    while n_inner < 2 * size or n_outer < size:
        if drawn >= max_draws:
            raise SamplingError(
                f"{instance.name}: extrapolation split needs {2 * size} inner and {size} outer points, "
                f"got {n_inner} and {n_outer} after {drawn} draws (fraction {fraction})"
            )
        X = domain.sample(batch, rng)
        drawn += batch
        band = in_extrapolation_band(X, domain, fraction)
        inner.append(X[~band])
        outer.append(X[band])
        n_inner += int((~band).sum())
        n_outer += int(band.sum())
    X_inner = np.concatenate(inner)[: 2 * size]
    X_outer = np.concatenate(outer)[:size]
    return X_inner[:size], X_inner[size:], X_outer


def export_dataset(data: DatasetSplit, directory: str, stem: str, seed: Optional[int] = None) -> List[Path]:
    """Write `<stem>_<partition>.csv` files with header `x0,...,xk,y` and a `<stem>.json` sidecar."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for partition in ("train", "validation", "test"):
        part: Dataset = getattr(data, partition)
        frame = pd.DataFrame(part.X, columns=[f"x{i}" for i in range(part.X.shape[1])])
        frame["y"] = part.y
        path = out / f"{stem}_{partition}.csv"
        frame.to_csv(path, index=False)
        written.append(path)
    sidecar = out / f"{stem}.json"
    sidecar.write_text(json.dumps({**data.metadata, "seed": seed}, indent=2), encoding="utf-8")
    written.append(sidecar)
    return written
