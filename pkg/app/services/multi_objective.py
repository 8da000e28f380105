# app/services/multi_objective.py
import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import NoModelError
from app.services.algorithms import AlgorithmConfig, RunResult
from app.services.fitness import EvaluatedIndividual, FitnessEvaluator
from app.services.gp import generation_record
from app.services.problems import Dataset, ProblemInstance
from app.services.tree_ops import mutate, random_population, subtree_crossover

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Dominance
# ---------------------------------------------------------------------------

def dominates(a: Sequence[float], b: Sequence[float], epsilon: float = 0.0) -> bool:
    """`a` is no worse than `b` in every objective and better by more than epsilon in at least one."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.all(a <= b + epsilon) and np.any(a < b - epsilon))


def epsilon_equal(a: Sequence[float], b: Sequence[float], epsilon: float = 0.0) -> bool:
    return bool(np.all(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) <= epsilon))


def _dominance_matrix(objectives: np.ndarray, epsilon: float, dominate_on_equal: bool) -> np.ndarray:
    """D[i, j] is True when individual i dominates individual j."""
    F = np.asarray(objectives, dtype=float)
    no_worse = np.all(F[:, None, :] <= F[None, :, :] + epsilon, axis=2)
    better = np.any(F[:, None, :] < F[None, :, :] - epsilon, axis=2)
    D = no_worse & better
    if dominate_on_equal:
        equal = np.all(np.abs(F[:, None, :] - F[None, :, :]) <= epsilon, axis=2)
        D |= np.triu(equal, k=1)
    np.fill_diagonal(D, False)
    return D


def non_dominated_sort(
    objectives: np.ndarray, epsilon: float = 0.0, dominate_on_equal: bool = False
) -> List[List[int]]:
    """Fast non-dominated sort; returns fronts as index lists, best front first."""
    F = np.asarray(objectives, dtype=float)
    if len(F) == 0:
        return []
    D = _dominance_matrix(F, epsilon, dominate_on_equal)
    counts = D.sum(axis=0)
    fronts = []
    current = [i for i in range(len(F)) if counts[i] == 0]
    assigned = np.zeros(len(F), dtype=bool)
    while current:
        fronts.append(current)
        assigned[current] = True
        following = []
        for i in current:
            for j in np.flatnonzero(D[i]):
                counts[j] -= 1
                if counts[j] == 0:
                    following.append(int(j))
        current = sorted(following)
    # epsilon-dominance is not transitive; anything caught in a cycle goes last
    leftovers = [i for i in range(len(F)) if not assigned[i]]
    if leftovers:
        fronts.append(leftovers)
    return fronts


def crowding_distance(objectives: np.ndarray) -> np.ndarray:
    F = np.array(objectives, dtype=float, copy=True)
    n, m = F.shape
    if n <= 2:
        return np.full(n, math.inf)
    distance = np.zeros(n)
    for k in range(m):
        column = F[:, k]
        finite = np.isfinite(column)
        if not finite.all():
            column[~finite] = (column[finite].max() + 1.0) if finite.any() else 0.0
        order = np.argsort(column, kind="stable")
        distance[order[0]] = distance[order[-1]] = math.inf
        span = column[order[-1]] - column[order[0]]
        if span == 0.0:
            continue
        gaps = (column[order[2:]] - column[order[:-2]]) / span
        distance[order[1:-1]] += gaps
    return distance


def _objective_matrix(population: Sequence[EvaluatedIndividual]) -> np.ndarray:
    return np.array([ind.objectives for ind in population], dtype=float)


# ---------------------------------------------------------------------------
# Pareto archive
# ---------------------------------------------------------------------------

class ParetoArchive:
    """External archive of mutually non-dominated individuals."""

    def __init__(self, capacity: int, epsilon: float = 0.0):
        self.capacity = capacity
        self.epsilon = epsilon
        self.members: List[EvaluatedIndividual] = []

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def add(self, candidate: EvaluatedIndividual) -> bool:
        for member in self.members:
            if dominates(member.objectives, candidate.objectives, self.epsilon) or epsilon_equal(
                member.objectives, candidate.objectives, self.epsilon
            ):
                return False
        self.members = [m for m in self.members if not dominates(candidate.objectives, m.objectives, self.epsilon)]
        self.members.append(candidate)
        if len(self.members) > self.capacity:
            distance = crowding_distance(_objective_matrix(self.members))
            self.members.pop(int(np.argmin(distance)))
        return True

    def update(self, individuals: Sequence[EvaluatedIndividual]) -> None:
        for individual in individuals:
            self.add(individual)


def select_final(members: Sequence[EvaluatedIndividual]) -> EvaluatedIndividual:
    """Minimum NMSE among certified-feasible members, else among the members with the least total violation."""
    members = list(members)
    if not members:
        raise NoModelError("Pareto archive is empty")
    feasible = [ind for ind in members if ind.feasible]
    if feasible:
        return min(feasible, key=lambda ind: ind.objectives[0])
    least = min(ind.total_violation for ind in members)
    return min((ind for ind in members if ind.total_violation == least), key=lambda ind: ind.objectives[0])


# ---------------------------------------------------------------------------
# NSGA-II
# ---------------------------------------------------------------------------

def rank_and_crowding(
    population: Sequence[EvaluatedIndividual], epsilon: float, dominate_on_equal: bool
) -> Tuple[List[List[int]], np.ndarray, np.ndarray]:
    F = _objective_matrix(population)
    fronts = non_dominated_sort(F, epsilon, dominate_on_equal)
    rank = np.zeros(len(population), dtype=int)
    crowding = np.zeros(len(population))
    for level, front in enumerate(fronts):
        rank[front] = level
        crowding[front] = crowding_distance(F[front])
    return fronts, rank, crowding


def _binary_tournament(rank: np.ndarray, crowding: np.ndarray, rng: np.random.Generator) -> int:
    a, b = rng.choice(len(rank), size=2, replace=False)
    if rank[a] != rank[b]:
        return int(a if rank[a] < rank[b] else b)
    if crowding[a] != crowding[b]:
        return int(a if crowding[a] > crowding[b] else b)
    return int(a)


def environmental_selection(
    population: Sequence[EvaluatedIndividual], size: int, epsilon: float, dominate_on_equal: bool
) -> List[EvaluatedIndividual]:
    fronts, _, crowding = rank_and_crowding(population, epsilon, dominate_on_equal)
    survivors: List[int] = []
    for front in fronts:
        if len(survivors) + len(front) <= size:
            survivors.extend(front)
            continue
        by_crowding = sorted(front, key=lambda i: -crowding[i])
        survivors.extend(by_crowding[: size - len(survivors)])
        break
    return [population[i] for i in survivors]


def _offspring(parent_a, parent_b, config: AlgorithmConfig, rng: np.random.Generator):
    child = parent_a.tree
    if rng.random() < config.crossover_probability:
        child = subtree_crossover(child, parent_b.tree, config.model_space, rng)
    if rng.random() < config.mutation_rate:
        child = mutate(child, config.model_space, rng)
    return child


def nsga2_step(
    population: Sequence[EvaluatedIndividual],
    config: AlgorithmConfig,
    evaluator: FitnessEvaluator,
    rng: np.random.Generator,
) -> List[EvaluatedIndividual]:
    _, rank, crowding = rank_and_crowding(population, config.epsilon, config.dominate_on_equal)
    trees = []
    for _ in range(len(population)):
        a = population[_binary_tournament(rank, crowding, rng)]
        b = population[_binary_tournament(rank, crowding, rng)]
        trees.append(_offspring(a, b, config, rng))
    offspring = [evaluator(tree) for tree in trees]
    return environmental_selection(list(population) + offspring, len(population), config.epsilon, config.dominate_on_equal)


def run_nsga2(config: AlgorithmConfig, instance: ProblemInstance, data: Dataset) -> RunResult:
    rng = np.random.default_rng(config.seed)
    evaluator = config.evaluator(instance, data)
    budget = config.evaluation_budget
    size = min(config.population_size, budget)
    archive = ParetoArchive(config.population_size, config.epsilon)

    population = [evaluator(tree) for tree in random_population(config.model_space, size, rng)]
    archive.update(population)
    log = [generation_record(0, population, evaluator.evaluations, len(archive))]
    for generation in range(1, config.effective_generations):
        if evaluator.evaluations + size > budget:
            break
        population = nsga2_step(population, config, evaluator, rng)
        archive.update(population)
        log.append(generation_record(generation, population, evaluator.evaluations, len(archive)))
    return _finish("NSGA-II", archive, log, evaluator)


# ---------------------------------------------------------------------------
# MOEA/D
# ---------------------------------------------------------------------------

def simplex_lattice(n_objectives: int, count: int) -> np.ndarray:
    """Das-Dennis weights with the smallest H giving at least `count` vectors, truncated to `count`."""
    if n_objectives == 1:
        return np.ones((count, 1))
    h = 1
    while math.comb(h + n_objectives - 1, n_objectives - 1) < count:
        h += 1
    weights = []
    for bars in itertools.combinations(range(h + n_objectives - 1), n_objectives - 1):
        edges = (-1,) + bars + (h + n_objectives - 1,)
        weights.append([(edges[i + 1] - edges[i] - 1) / h for i in range(n_objectives)])
        if len(weights) == count:
            break
    return np.array(weights)


def neighborhoods(weights: np.ndarray, size: int) -> np.ndarray:
    distances = np.linalg.norm(weights[:, None, :] - weights[None, :, :], axis=2)
    return np.argsort(distances, axis=1, kind="stable")[:, : min(size, len(weights))]


def tchebycheff(objectives: Sequence[float], weight: np.ndarray, reference: np.ndarray) -> float:
    terms = np.abs(np.asarray(objectives, dtype=float) - reference)
    # zero-weight objectives never contribute, even when unbounded
    return float(np.max(np.where(weight > 0.0, weight * terms, 0.0)))


@dataclass
class MOEADState:
    weights: np.ndarray
    neighbors: np.ndarray
    population: List[EvaluatedIndividual]
    reference: np.ndarray

    def observe(self, individual: EvaluatedIndividual) -> None:
        self.reference = np.minimum(self.reference, np.asarray(individual.objectives, dtype=float))


def init_moead(population: List[EvaluatedIndividual], config: AlgorithmConfig) -> MOEADState:
    F = _objective_matrix(population)
    weights = simplex_lattice(F.shape[1], len(population))
    return MOEADState(weights, neighborhoods(weights, config.neighborhood_size), list(population), F.min(axis=0))


def moead_step(
    state: MOEADState,
    config: AlgorithmConfig,
    evaluator: FitnessEvaluator,
    rng: np.random.Generator,
    archive: Optional[ParetoArchive] = None,
) -> MOEADState:
    for i in range(len(state.population)):
        neighbors = state.neighbors[i]
        a, b = rng.choice(neighbors, size=2, replace=len(neighbors) < 2)
        child = evaluator(_offspring(state.population[a], state.population[b], config, rng))
        state.observe(child)
        if archive is not None:
            archive.add(child)
        replaced = 0
        for j in rng.permutation(neighbors):
            if replaced >= config.replacement_cap:
                break
            weight = state.weights[j]
            incumbent = state.population[j]
            if tchebycheff(child.objectives, weight, state.reference) < tchebycheff(
                incumbent.objectives, weight, state.reference
            ):
                state.population[j] = child
                replaced += 1
    return state


def run_moead(config: AlgorithmConfig, instance: ProblemInstance, data: Dataset) -> RunResult:
    rng = np.random.default_rng(config.seed)
    evaluator = config.evaluator(instance, data)
    budget = config.evaluation_budget
    size = min(config.population_size, budget)
    archive = ParetoArchive(config.population_size, config.epsilon)

    population = [evaluator(tree) for tree in random_population(config.model_space, size, rng)]
    archive.update(population)
    state = init_moead(population, config)
    log = [generation_record(0, state.population, evaluator.evaluations, len(archive))]
    for generation in range(1, config.effective_generations):
        if evaluator.evaluations + size > budget:
            break
        state = moead_step(state, config, evaluator, rng, archive)
        log.append(generation_record(generation, state.population, evaluator.evaluations, len(archive)))
    return _finish("MOEA/D", archive, log, evaluator)


def _finish(name: str, archive: ParetoArchive, log, evaluator: FitnessEvaluator) -> RunResult:
    finite = [ind for ind in archive if ind.raw_nmse < evaluator.sentinel]
    if not finite:
        raise NoModelError(f"{name} ended without any model with finite training error")
    best = select_final(finite)
    logger.info(
        "%s finished after %d evaluations: archive %d, train NMSE %.6g, feasible=%s",
        name, evaluator.evaluations, len(archive), best.raw_nmse, best.feasible,
    )
    return RunResult(best=best, log=log, evaluations=evaluator.evaluations, archive=list(archive))
