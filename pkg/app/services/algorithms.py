# app/services/algorithms.py
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator

from app.core.config import ValidatedModel, settings
from app.services.expression import ModelSpaceConfig
from app.services.fitness import EvaluatedIndividual, FitnessEvaluator, FitnessMode
from app.services.problems import Dataset, ProblemInstance

logger = logging.getLogger(__name__)


class Algorithm(str, Enum):
    GP = "GP"
    GPSC = "GPSC"
    GPOPT = "GPOpt"
    GPOPTSC = "GPOptSC"
    NSGA2 = "NSGA2"
    MOEAD = "MOEAD"

    @classmethod
    def _missing_(cls, value):
        # accept `gpsc`, `nsga-ii`, ... from the command line
        if isinstance(value, str):
            key = value.replace("-", "").replace("_", "").lower()
            key = "nsga2" if key == "nsgaii" else key
            for member in cls:
                if member.value.lower() == key:
                    return member
        return None

    @property
    def uses_local_optimization(self) -> bool:
        return self in (Algorithm.GPOPT, Algorithm.GPOPTSC)

    @property
    def is_multi_objective(self) -> bool:
        return self in (Algorithm.NSGA2, Algorithm.MOEAD)

    @property
    def fitness_mode(self) -> FitnessMode:
        if self.is_multi_objective:
            return FitnessMode.SOFT
        if self in (Algorithm.GPSC, Algorithm.GPOPTSC):
            return FitnessMode.HARD
        return FitnessMode.PLAIN


class AlgorithmConfig(ValidatedModel):
    algorithm: Algorithm = Algorithm.GP
    population_size: int = Field(default=1000, ge=2)
    generations: Optional[int] = Field(default=None, ge=1)
    max_evaluations: int = Field(default=500_000, ge=1)
    tournament_size: int = Field(default=5, ge=1)
    crossover_probability: float = Field(default=1.0, ge=0.0, le=1.0)
    mutation_rate: float = Field(default=0.15, ge=0.0, le=1.0)
    local_opt_iterations: int = Field(default_factory=lambda: settings.local_opt_iterations, ge=0)
    elites: int = Field(default=1, ge=0)
    seed: int = 0
    model_space: ModelSpaceConfig = ModelSpaceConfig()
    check_before_scaling: bool = False
    # multi-objective
    epsilon: float = Field(default_factory=lambda: settings.dominance_epsilon, ge=0.0)
    dominate_on_equal: bool = True
    neighborhood_size: int = Field(default=20, ge=2)
    replacement_cap: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def check_sizes(self):
        if self.population_size <= self.tournament_size:
            raise ValueError("population_size must exceed tournament_size")
        if self.elites >= self.population_size:
            raise ValueError("elites must be smaller than population_size")
        return self

    @property
    def effective_generations(self) -> int:
        if self.generations is not None:
            return self.generations
        return 50 if self.algorithm.uses_local_optimization else 500

    @property
    def evaluation_budget(self) -> int:
        return min(self.effective_generations * self.population_size, self.max_evaluations)

    def evaluator(self, instance: ProblemInstance, data: Dataset) -> FitnessEvaluator:
        iterations = self.local_opt_iterations if self.algorithm.uses_local_optimization else 0
        return FitnessEvaluator(data, instance.constraints, self.algorithm.fitness_mode, iterations, self.check_before_scaling)


class GenerationRecord(BaseModel):
    generation: int
    evaluations: int
    best_nmse: float
    median_nmse: float
    feasible_fraction: float
    front_size: Optional[int] = None


@dataclass
class RunResult:
    best: EvaluatedIndividual
    log: List[GenerationRecord]
    evaluations: int
    archive: List[EvaluatedIndividual] = field(default_factory=list)


def run_algorithm(config: AlgorithmConfig, instance: ProblemInstance, data: Dataset) -> RunResult:
    from app.services.gp import run_gp
    from app.services.multi_objective import run_moead, run_nsga2

    if config.model_space.n_variables != instance.n_variables:
        config = config.model_copy(
            update={"model_space": config.model_space.model_copy(update={"n_variables": instance.n_variables})}
        )
    logger.info("Running %s on %s (seed %d)", config.algorithm.value, instance.name, config.seed)
    if config.algorithm is Algorithm.NSGA2:
        return run_nsga2(config, instance, data)
    if config.algorithm is Algorithm.MOEAD:
        return run_moead(config, instance, data)
    return run_gp(config, instance, data)
