# app/services/gp.py
import logging
from typing import List, Sequence

import numpy as np

from app.core.errors import NoModelError
from app.services.algorithms import AlgorithmConfig, GenerationRecord, RunResult
from app.services.fitness import EvaluatedIndividual, FitnessEvaluator
from app.services.problems import Dataset, ProblemInstance
from app.services.tree_ops import mutate, random_population, subtree_crossover

logger = logging.getLogger(__name__)


def tournament_select(
    population: Sequence[EvaluatedIndividual], size: int, rng: np.random.Generator
) -> EvaluatedIndividual:
    """Lowest training fitness wins; ties go to the earliest entrant of a random draw order."""
    contestants = rng.choice(len(population), size=min(size, len(population)), replace=False)
    winner = contestants[0]
    for index in contestants[1:]:
        if population[index].nmse_train < population[winner].nmse_train:
            winner = index
    return population[winner]


def breed(
    population: Sequence[EvaluatedIndividual], count: int, config: AlgorithmConfig, rng: np.random.Generator
) -> List:
    children = []
    for _ in range(count):
        parent = tournament_select(population, config.tournament_size, rng)
        child = parent.tree
        if rng.random() < config.crossover_probability:
            other = tournament_select(population, config.tournament_size, rng)
            child = subtree_crossover(child, other.tree, config.model_space, rng)
        if rng.random() < config.mutation_rate:
            child = mutate(child, config.model_space, rng)
        children.append(child)
    return children


def generation_record(
    generation: int, population: Sequence[EvaluatedIndividual], evaluations: int, front_size=None
) -> GenerationRecord:
    scores = np.array([ind.nmse_train for ind in population])
    feasible = [ind.feasible for ind in population if ind.feasible is not None]
    record = GenerationRecord(
        generation=generation,
        evaluations=evaluations,
        best_nmse=float(scores.min()),
        median_nmse=float(np.median(scores)),
        feasible_fraction=float(np.mean(feasible)) if feasible else 1.0,
        front_size=front_size,
    )
    logger.debug("generation %d: best %.6g median %.6g", generation, record.best_nmse, record.median_nmse)
    return record


def _pick_best(population: Sequence[EvaluatedIndividual], sentinel: float) -> EvaluatedIndividual:
    finite = [ind for ind in population if ind.raw_nmse < sentinel]
    if not finite:
        raise NoModelError("Evolution ended without any model with finite training error")
    accepted = [ind for ind in finite if ind.nmse_train < sentinel]
    pool = accepted or finite
    return min(pool, key=lambda ind: ind.raw_nmse)


def evolve(
    config: AlgorithmConfig, evaluator: FitnessEvaluator, rng: np.random.Generator
) -> RunResult:
    budget = config.evaluation_budget
    size = min(config.population_size, budget)
    population = [evaluator(tree) for tree in random_population(config.model_space, size, rng)]
    log = [generation_record(0, population, evaluator.evaluations)]
    best = min(population, key=lambda ind: ind.nmse_train)

    n_children = size - config.elites
    for generation in range(1, config.effective_generations):
        if evaluator.evaluations + n_children > budget:
            break
        elite = sorted(population, key=lambda ind: ind.nmse_train)[: config.elites]
        trees = breed(population, n_children, config, rng)
        population = elite + [evaluator(tree) for tree in trees]
        log.append(generation_record(generation, population, evaluator.evaluations))
        leader = min(population, key=lambda ind: ind.nmse_train)
        if leader.nmse_train < best.nmse_train:
            best = leader

    # without elitism the final population may have lost the best-so-far model
    best = _pick_best(list(population) + [best], evaluator.sentinel)
    logger.info(
        "GP finished after %d evaluations: train NMSE %.6g, feasible=%s", evaluator.evaluations, best.raw_nmse, best.feasible
    )
    return RunResult(best=best, log=log, evaluations=evaluator.evaluations)


def run_gp(config: AlgorithmConfig, instance: ProblemInstance, data: Dataset) -> RunResult:
    """GP, GPSC, GPOpt and GPOptSC share this generational loop; they differ only in the evaluator."""
    rng = np.random.default_rng(config.seed)
    return evolve(config, config.evaluator(instance, data), rng)
