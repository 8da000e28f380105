# app/services/experiment.py
import hashlib
import logging
import time
from multiprocessing import Pool
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.config import ValidatedModel, settings
from app.core.errors import ConfigurationError, ShapeRegressionError
from app.services.algorithms import Algorithm, AlgorithmConfig, run_algorithm
from app.services.audit import audit_feasibility
from app.services.constraints import violation
from app.services.expression import FunctionSet, ModelSpaceConfig, evaluate_batch, to_infix
from app.services.metrics import nmse
from app.services.problems import DatasetSplit, SplitKind, resolve_instance, sample_dataset

logger = logging.getLogger(__name__)

RUNS_FILE = "runs.jsonl"


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an arbitrary key; identical across processes and platforms."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def data_seed(master_seed: int, instance: str, split: SplitKind, repetition: int) -> int:
    # noise level is deliberately not part of the key: inputs and test targets are shared across noise levels
    return derive_seed(master_seed, instance, split.value, repetition, "data")


class RunRecord(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    instance: str
    algorithm: str
    noise_level: float
    split: SplitKind
    max_length: int
    function_set: FunctionSet
    seed: int
    repetition: int = 0
    model: Optional[str] = None
    nmse_train: Optional[float] = None
    nmse_validation: Optional[float] = None
    nmse_test: Optional[float] = None
    audit: Optional[str] = None
    audit_feasible: Optional[bool] = None
    violated: List[str] = []
    violation: List[float] = []
    certified_feasible: Optional[bool] = None
    wall_time: float = 0.0
    evaluations: int = 0
    check_before_scaling: bool = False
    incumbent_test_nmse: Optional[float] = None
    error: Optional[str] = None


class RunSpec(ValidatedModel):
    instance: str
    algorithm: Algorithm
    noise_level: float = Field(default=0.0, ge=0.0)
    split: SplitKind = SplitKind.IN_DOMAIN
    max_length: int = Field(default=30, ge=3)
    function_set: FunctionSet = FunctionSet.F3
    seed: int = 0
    data_seed: Optional[int] = None
    repetition: int = 0
    population_size: int = Field(default=1000, ge=6)
    generations: Optional[int] = Field(default=None, ge=1)
    max_evaluations: int = Field(default=500_000, ge=1)
    check_before_scaling: bool = False
    audit_samples: int = Field(default_factory=lambda: settings.audit_samples, ge=1)

    def algorithm_config(self, n_variables: int, seed: Optional[int] = None) -> AlgorithmConfig:
        return AlgorithmConfig.create(
            algorithm=self.algorithm,
            population_size=self.population_size,
            generations=self.generations,
            max_evaluations=self.max_evaluations,
            seed=self.seed if seed is None else seed,
            check_before_scaling=self.check_before_scaling,
            model_space=ModelSpaceConfig(
                function_set=self.function_set, max_length=self.max_length, n_variables=n_variables
            ),
        )

    def dataset(self, instance) -> DatasetSplit:
        seed = self.data_seed if self.data_seed is not None else data_seed(self.seed, instance.name, self.split, 0)
        return sample_dataset(instance, self.noise_level, self.split, np.random.default_rng(seed))


def _score(model, partition, sentinel: float) -> float:
    return nmse(partition.y, evaluate_batch(model, partition.X), sentinel)


def execute_run(spec: RunSpec, data: Optional[DatasetSplit] = None, seed: Optional[int] = None) -> RunRecord:
    """Train on the training partition, score every partition and audit the returned model."""
    instance = resolve_instance(spec.instance)
    data = data if data is not None else spec.dataset(instance)
    config = spec.algorithm_config(instance.n_variables, seed)
    started = time.perf_counter()
    result = run_algorithm(config, instance, data.train)
    wall_time = time.perf_counter() - started

    model = result.best.model
    sentinel = settings.rejection_sentinel
    verdict = audit_feasibility(
        model, instance, n_samples=spec.audit_samples, rng=np.random.default_rng(derive_seed(config.seed, "audit"))
    )
    vector = violation(model, instance.constraints)
    record = RunRecord(
        instance=instance.name,
        algorithm=spec.algorithm.value,
        noise_level=spec.noise_level,
        split=spec.split,
        max_length=spec.max_length,
        function_set=spec.function_set,
        seed=config.seed,
        repetition=spec.repetition,
        model=to_infix(model),
        nmse_train=_score(model, data.train, sentinel),
        nmse_validation=_score(model, data.validation, sentinel),
        nmse_test=_score(model, data.test, sentinel),
        audit=str(verdict),
        audit_feasible=verdict.feasible,
        violated=verdict.violated,
        violation=list(vector.penalties),
        certified_feasible=vector.feasible,
        wall_time=wall_time,
        evaluations=result.evaluations,
        check_before_scaling=spec.check_before_scaling,
    )
    logger.info(
        "%s/%s noise=%.2f seed=%d: test NMSE %.4g, %s",
        record.instance, record.algorithm, record.noise_level, record.seed, record.nmse_test, record.audit,
    )
    return record


def failed_record(spec: RunSpec, error: BaseException) -> RunRecord:
    return RunRecord(
        instance=spec.instance,
        algorithm=spec.algorithm.value,
        noise_level=spec.noise_level,
        split=spec.split,
        max_length=spec.max_length,
        function_set=spec.function_set,
        seed=spec.seed,
        repetition=spec.repetition,
        check_before_scaling=spec.check_before_scaling,
        error=f"{type(error).__name__}: {error}",
    )


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

class GridSpec(ValidatedModel):
    max_lengths: List[int] = [10, 20, 30, 40, 50]
    function_sets: List[FunctionSet] = list(FunctionSet)

    @field_validator("max_lengths", "function_sets")
    @classmethod
    def non_empty(cls, value):
        if not value:
            raise ValueError("grid dimensions must be non-empty")
        return value

    def cells(self) -> List[Tuple[int, FunctionSet]]:
        return [(length, fs) for length in self.max_lengths for fs in self.function_sets]


class CellSummary(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    max_length: int
    function_set: FunctionSet
    runs: int
    failures: int
    median_validation_nmse: Optional[float] = None
    feasible_fraction: float = 0.0


class GridResult(BaseModel):
    best_cell: CellSummary
    cells: List[CellSummary]
    records: List[RunRecord]


def _summarize_cell(max_length: int, function_set: FunctionSet, records: List[RunRecord]) -> CellSummary:
    completed = [r for r in records if r.error is None]
    return CellSummary(
        max_length=max_length,
        function_set=function_set,
        runs=len(records),
        failures=len(records) - len(completed),
        median_validation_nmse=float(np.median([r.nmse_validation for r in completed])) if completed else None,
        feasible_fraction=float(np.mean([bool(r.certified_feasible) for r in completed])) if completed else 0.0,
    )


def _cell_key(cell: CellSummary):
    # fully feasible cells first, then validation error
    return (cell.feasible_fraction < 1.0, cell.median_validation_nmse)


def grid_search(base: RunSpec, grid: GridSpec, seeds: Iterable[int], master_seed: int = 0) -> GridResult:
    """Pick the cell with the best validation NMSE, then re-train each seed with a fresh seed in that cell."""
    instance = resolve_instance(base.instance)
    seeds = list(seeds)
    datasets = {s: sample_dataset(instance, base.noise_level, base.split,
                                  np.random.default_rng(data_seed(master_seed, instance.name, base.split, s)))
                for s in seeds}

    cells: List[CellSummary] = []
    incumbents = {}
    for max_length, function_set in grid.cells():
        cell_records = []
        for s in seeds:
            spec = base.model_copy(update={"max_length": max_length, "function_set": function_set, "repetition": s})
            cell_seed = derive_seed(master_seed, instance.name, base.algorithm.value, base.noise_level,
                                    max_length, function_set.value, s)
            try:
                record = execute_run(spec, datasets[s], cell_seed)
            except ShapeRegressionError as exc:
                record = failed_record(spec, exc)
            cell_records.append(record)
            incumbents[(max_length, function_set, s)] = record
        cells.append(_summarize_cell(max_length, function_set, cell_records))

    completed = [c for c in cells if c.median_validation_nmse is not None]
    if not completed:
        table = "; ".join(f"{c.max_length}/{c.function_set.value}: {c.failures} failures" for c in cells)
        raise ShapeRegressionError(f"Every grid cell failed ({table})")
    best = min(completed, key=_cell_key)
    logger.info("Grid winner for %s/%s: length %d, %s", instance.name, base.algorithm.value,
                best.max_length, best.function_set.value)

    final = []
    for s in seeds:
        spec = base.model_copy(update={"max_length": best.max_length, "function_set": best.function_set, "repetition": s})
        retrain_seed = derive_seed(master_seed, instance.name, base.algorithm.value, base.noise_level, "retrain", s)
        try:
            record = execute_run(spec, datasets[s], retrain_seed)
        except ShapeRegressionError as exc:
            record = failed_record(spec, exc)
        incumbent = incumbents[(best.max_length, best.function_set, s)]
        record.incumbent_test_nmse = incumbent.nmse_test
        final.append(record)
    return GridResult(best_cell=best, cells=cells, records=final)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

class ExperimentConfig(ValidatedModel):
    instances: List[str]
    algorithms: List[Algorithm]
    noise_levels: List[float] = [0.0, 0.1, 0.3, 1.0]
    split: SplitKind = SplitKind.IN_DOMAIN
    repetitions: int = Field(default=30, ge=1)
    master_seed: int = 0
    max_length: int = Field(default=30, ge=3)
    function_set: FunctionSet = FunctionSet.F3
    population_size: int = Field(default=1000, ge=6)
    generations: Optional[int] = Field(default=None, ge=1)
    max_evaluations: int = Field(default=500_000, ge=1)
    check_before_scaling: bool = False
    audit_samples: int = Field(default_factory=lambda: settings.audit_samples, ge=1)

    @field_validator("instances", "algorithms", "noise_levels")
    @classmethod
    def non_empty(cls, value):
        if not value:
            raise ValueError("experiment dimensions must be non-empty")
        return value

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        try:
            return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigurationError(f"Invalid experiment file {path}: {exc}") from exc

    def jobs(self) -> List[RunSpec]:
        specs = []
        for name in self.instances:
            for algorithm in self.algorithms:
                for noise in self.noise_levels:
                    for repetition in range(self.repetitions):
                        specs.append(RunSpec(
                            instance=name,
                            algorithm=algorithm,
                            noise_level=noise,
                            split=self.split,
                            max_length=self.max_length,
                            function_set=self.function_set,
                            seed=derive_seed(self.master_seed, name, algorithm.value, noise,
                                             self.max_length, self.function_set.value, repetition),
                            data_seed=data_seed(self.master_seed, name, self.split, repetition),
                            repetition=repetition,
                            population_size=self.population_size,
                            generations=self.generations,
                            max_evaluations=self.max_evaluations,
                            check_before_scaling=self.check_before_scaling,
                            audit_samples=self.audit_samples,
                        ))
        return specs


def run_job(spec: RunSpec) -> RunRecord:
    """Worker entry point: failures become records so a sweep never aborts."""
    try:
        return execute_run(spec)
    except Exception as exc:  # noqa: BLE001
        logger.warning("Run %s/%s seed %d failed: %s", spec.instance, spec.algorithm.value, spec.seed, exc)
        return failed_record(spec, exc)


def experiment(config: ExperimentConfig, out_dir: Optional[str] = None, workers: Optional[int] = None) -> List[RunRecord]:
    workers = settings.workers if workers is None else workers
    jobs = config.jobs()
    for name in config.instances:
        resolve_instance(name)  # fail fast on unknown instances
    logger.info("Experiment: %d runs on %d worker(s)", len(jobs), workers)

    out_path = Path(out_dir or settings.results_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    runs_file = out_path / RUNS_FILE
    records: List[RunRecord] = []
    with runs_file.open("w", encoding="utf-8") as handle:
        if workers > 1:
            with Pool(processes=workers) as pool:
                # imap keeps job order, so the log is deterministic regardless of scheduling
                for record in pool.imap(run_job, jobs):
                    handle.write(record.model_dump_json() + "\n")
                    records.append(record)
        else:
            for record in map(run_job, jobs):
                handle.write(record.model_dump_json() + "\n")
                records.append(record)

    from app.services.tables import write_tables

    write_tables(records, out_path)
    return records


def save_records(records: Iterable[RunRecord], path: str) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.model_dump_json() + "\n")


def load_records(path: str) -> List[RunRecord]:
    source = Path(path)
    if source.is_dir():
        source = source / RUNS_FILE
    with source.open(encoding="utf-8") as handle:
        return [RunRecord.model_validate_json(line) for line in handle if line.strip()]
