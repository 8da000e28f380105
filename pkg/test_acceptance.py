# test_acceptance.py
"""Reduced-budget end-to-end checks. Run with `pytest -m slow`."""
import math

import numpy as np
import pytest
from scipy.stats import binomtest

from app.services.algorithms import Algorithm
from app.services.audit import audit_feasibility
from app.services.expression import FunctionSet, ModelSpaceConfig, differentiate, evaluate_batch, parse_infix
from app.services.experiment import ExperimentConfig, RunSpec, execute_run, experiment
from app.services.interval import Box, evaluate_interval
from app.services.multi_objective import crowding_distance, dominates, non_dominated_sort
from app.services.problems import SplitKind, builtin_instances, get_instance, sample_dataset
from app.services.tree_ops import ptc2_random_tree

pytestmark = pytest.mark.slow

F4_TREES = ModelSpaceConfig(function_set=FunctionSet.F4, max_length=30, n_variables=3)


def _trees(count, seed):
    rng = np.random.default_rng(seed)
    return [ptc2_random_tree(F4_TREES, int(rng.integers(1, F4_TREES.max_length + 1)), rng) for _ in range(count)]


def test_interval_soundness_suite():
    rng = np.random.default_rng(100)
    for tree in _trees(1000, seed=101):
        lower = rng.uniform(-3, 3, size=3)
        box = Box.from_bounds(zip(lower, lower + rng.uniform(0, 2, size=3)))
        enclosure = evaluate_interval(tree, box)
        values = evaluate_batch(tree, box.sample(1000, rng))
        finite = values[np.isfinite(values)]
        if finite.size:
            assert np.all(finite >= enclosure.lo) and np.all(finite <= enclosure.hi), str(tree)
    dependency = evaluate_interval(parse_infix("x0 - x0", n_variables=1), Box.from_bounds([(1, 2)]))
    assert dependency.lo == pytest.approx(-1.0) and dependency.hi == pytest.approx(1.0)


def test_symbolic_derivatives_match_finite_differences():
    rng = np.random.default_rng(200)
    for tree in _trees(1000, seed=201):
        variable = int(rng.integers(3))
        X = rng.uniform(1, 2, size=(20, 3))
        step = np.zeros(3)
        step[variable] = 1e-5
        coarse = (evaluate_batch(tree, X + step) - evaluate_batch(tree, X - step)) / 2e-5
        fine = (evaluate_batch(tree, X + step / 2) - evaluate_batch(tree, X - step / 2)) / 1e-5
        symbolic = evaluate_batch(differentiate(tree, variable), X)
        # only where the difference quotient itself has converged
        smooth = np.isfinite(coarse) & np.isfinite(fine) & (np.abs(coarse - fine) <= 1e-7 * (1 + np.abs(fine)))
        smooth &= (np.abs(fine) < 1e6) & np.isfinite(symbolic)
        np.testing.assert_allclose(symbolic[smooth], fine[smooth], rtol=1e-4, atol=1e-6, err_msg=str(tree))


def _brute_force_fronts(F):
    remaining = set(range(len(F)))
    fronts = []
    while remaining:
        front = {i for i in remaining if not any(dominates(F[j], F[i]) for j in remaining if j != i)}
        fronts.append(front)
        remaining -= front
    return fronts


def _brute_force_crowding(F):
    n, m = F.shape
    distance = np.zeros(n)
    if n <= 2:
        return np.full(n, math.inf)
    for k in range(m):
        order = sorted(range(n), key=lambda i: F[i, k])
        distance[order[0]] = distance[order[-1]] = math.inf
        span = F[order[-1], k] - F[order[0], k]
        for position in range(1, n - 1):
            if span > 0:
                distance[order[position]] += (F[order[position + 1], k] - F[order[position - 1], k]) / span
    return distance


def test_non_dominated_sorting_oracle():
    rng = np.random.default_rng(300)
    for _ in range(1000):
        n, m = int(rng.integers(1, 101)), int(rng.integers(2, 6))
        F = rng.uniform(size=(n, m)) if rng.random() < 0.5 else rng.integers(0, 4, size=(n, m)).astype(float)
        fronts = non_dominated_sort(F)
        assert [set(f) for f in fronts] == _brute_force_fronts(F)
        for front in fronts:
            np.testing.assert_allclose(crowding_distance(F[front]), _brute_force_crowding(F[front]))


@pytest.mark.parametrize("level", [0.1, 0.3, 1.0])
def test_noise_statistics(level):
    instance = get_instance("III.10.19")
    clean = sample_dataset(instance, 0.0, SplitKind.IN_DOMAIN, np.random.default_rng(7), size=5000)
    noisy = sample_dataset(instance, level, SplitKind.IN_DOMAIN, np.random.default_rng(7), size=5000)
    sigma_y = np.std(np.concatenate([clean.train.y, clean.validation.y]))
    noise = np.concatenate([noisy.train.y - clean.train.y, noisy.validation.y - clean.validation.y])
    assert np.std(noise) == pytest.approx(math.sqrt(level) * sigma_y, rel=0.1)
    assert np.array_equal(clean.test.X, noisy.test.X) and np.array_equal(clean.test.y, noisy.test.y)


@pytest.mark.parametrize("instance", builtin_instances(), ids=lambda i: i.name)
def test_ground_truths_pass_full_audit(instance):
    model = instance.ground_truth if instance.ground_truth is not None else instance.closed_form
    assert audit_feasibility(model, instance, n_samples=100_000, rng=np.random.default_rng(8)).feasible


@pytest.mark.parametrize("name", ["I.6.20", "II.11.28", "I.48.20", "II.35.21"])
@pytest.mark.parametrize("noise", [0.0, 1.0])
def test_gpsc_models_always_pass_the_audit(name, noise):
    for repetition in range(10):
        record = execute_run(RunSpec.create(instance=name, algorithm=Algorithm.GPSC, noise_level=noise,
                                            seed=repetition, population_size=200, generations=100))
        assert record.certified_feasible
        assert record.audit_feasible, record.audit


@pytest.mark.parametrize("algorithm", [Algorithm.GP, Algorithm.GPSC])
def test_exact_recovery_of_relativistic_energy(algorithm):
    scores = [
        execute_run(RunSpec.create(instance="I.48.20", algorithm=algorithm, seed=seed, population_size=500,
                                   generations=200, function_set=FunctionSet.F3, audit_samples=1000)).nmse_test
        for seed in range(10)
    ]
    assert np.median(scores) <= 0.1


def test_constraints_help_extrapolation_on_pagie():
    wins = 0
    for seed in range(10):
        common = dict(instance="Pagie", noise_level=0.1, split=SplitKind.OUT_OF_DOMAIN, seed=seed,
                      population_size=200, generations=100, audit_samples=1000)
        gp = execute_run(RunSpec.create(algorithm=Algorithm.GP, **common))
        gpsc = execute_run(RunSpec.create(algorithm=Algorithm.GPSC, **common))
        wins += gpsc.nmse_test < gp.nmse_test
    assert binomtest(wins, 10, alternative="greater").pvalue < 0.1


def test_experiment_tables_are_reproducible(tmp_path):
    config = ExperimentConfig.create(instances=["I.6.20", "II.11.28"], algorithms=["GP", "GPSC"],
                                     noise_levels=[0.1], repetitions=2, master_seed=42, population_size=50,
                                     generations=10, audit_samples=2000)
    experiment(config, str(tmp_path / "a"), workers=2)
    experiment(config, str(tmp_path / "b"), workers=1)
    for table in ("median_nmse.csv", "infeasible_fraction.csv"):
        assert (tmp_path / "a" / table).read_bytes() == (tmp_path / "b" / table).read_bytes()
