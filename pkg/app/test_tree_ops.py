# app/test_tree_ops.py
import numpy as np
import pytest

from app.core.errors import ConfigurationError
from app.services.expression import (
    ExpressionTree,
    FunctionNode,
    FunctionSet,
    ModelSpaceConfig,
    ParameterNode,
    VariableNode,
)
from app.services.tree_ops import (
    MUTATION_OPERATORS,
    change_symbol,
    mutate,
    ptc2_random_tree,
    random_population,
    shake_all_parameters,
    shake_one_parameter,
    subtree_crossover,
    within_limits,
)

CONFIG = ModelSpaceConfig(function_set=FunctionSet.F3, max_length=20, max_depth=8, n_variables=3)


def test_ptc2_respects_target_length_and_limits():
    rng = np.random.default_rng(0)
    for target in range(1, CONFIG.max_length + 1):
        tree = ptc2_random_tree(CONFIG, target, rng)
        assert tree.length <= target
        assert tree.depth <= CONFIG.max_depth
        assert all(s in CONFIG.function_set.symbols for s in tree.symbols())


def test_ptc2_rejects_bad_target():
    with pytest.raises(ConfigurationError):
        ptc2_random_tree(CONFIG, CONFIG.max_length + 1, np.random.default_rng(0))


def test_random_population_is_seed_deterministic():
    a = random_population(CONFIG, 50, np.random.default_rng(7))
    b = random_population(CONFIG, 50, np.random.default_rng(7))
    assert a == b


def test_crossover_and_mutation_stay_within_limits():
    rng = np.random.default_rng(1)
    population = random_population(CONFIG, 100, rng)
    for a, b in zip(population, population[1:]):
        child = subtree_crossover(a, b, CONFIG, rng)
        assert within_limits(child, CONFIG)
        assert within_limits(mutate(child, CONFIG, rng), CONFIG)
    for operator in MUTATION_OPERATORS.values():
        for tree in population[:20]:
            mutant = operator(tree, CONFIG, rng)
            assert mutant.n_required_variables <= CONFIG.n_variables


def test_change_symbol_keeps_arity():
    rng = np.random.default_rng(2)
    for tree in random_population(CONFIG, 50, rng):
        mutant = change_symbol(tree, CONFIG, rng)
        assert mutant.length == tree.length
        assert [s.arity for s in mutant.symbols()] == [s.arity for s in tree.symbols()]


def test_shake_one_parameter_changes_one_value():
    rng = np.random.default_rng(3)
    tree = ptc2_random_tree(CONFIG, 15, rng)
    tree = tree.replace((), FunctionNode(FunctionSet.F1.symbols[0], (tree.root, ParameterNode(1.0))))
    mutant = shake_one_parameter(tree, CONFIG, rng)
    before = [n.value for n, _, _ in tree.iter_nodes() if isinstance(n, ParameterNode)]
    after = [n.value for n, _, _ in mutant.iter_nodes() if isinstance(n, ParameterNode)]
    assert len(before) == len(after)
    assert sum(a != b for a, b in zip(before, after)) == 1


def _leaves(tree):
    return {node for node, _, _ in tree.iter_nodes() if not isinstance(node, FunctionNode)}


def test_model_space_without_variables_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        ModelSpaceConfig(n_variables=0)
    with pytest.raises(ConfigurationError):
        ModelSpaceConfig(max_length=1)


def test_ptc2_rejects_a_space_without_variables():
    empty = CONFIG.model_copy(update={"n_variables": 0})
    with pytest.raises(ConfigurationError):
        ptc2_random_tree(empty, 5, np.random.default_rng(0))


def test_ptc2_single_leaf_and_function_set_closure():
    rng = np.random.default_rng(4)
    assert ptc2_random_tree(CONFIG, 1, rng).length == 1
    f1 = CONFIG.model_copy(update={"function_set": FunctionSet.F1})
    for tree in random_population(f1, 200, rng):
        assert set(tree.symbols()) <= set(FunctionSet.F1.symbols)


def test_ptc2_mean_length_tracks_the_target():
    config = ModelSpaceConfig(max_length=30, n_variables=3)
    rng = np.random.default_rng(5)
    lengths = [ptc2_random_tree(config, 20, rng).length for _ in range(10_000)]
    assert 15 <= np.mean(lengths) <= 25


def test_crossover_of_single_leaves():
    rng = np.random.default_rng(6)
    a, b = ExpressionTree(ParameterNode(1.5)), ExpressionTree(VariableNode(0, 2.0))
    for _ in range(20):
        assert subtree_crossover(a, b, CONFIG, rng) in (a, b)


def test_self_crossover_introduces_no_new_material():
    rng = np.random.default_rng(7)
    for a in random_population(CONFIG, 200, rng):
        child = subtree_crossover(a, a, CONFIG, rng)
        assert set(child.symbols()) <= set(a.symbols())
        assert _leaves(child) <= _leaves(a)


def test_crossover_and_mutation_size_limits_over_many_trials():
    rng = np.random.default_rng(8)
    population = random_population(CONFIG, 200, rng)
    for _ in range(10_000):
        a = population[int(rng.integers(len(population)))]
        b = population[int(rng.integers(len(population)))]
        child = subtree_crossover(a, b, CONFIG, rng)
        assert child.length <= CONFIG.max_length and child.depth <= CONFIG.max_depth
        mutant = mutate(a, CONFIG, rng)
        assert mutant.length <= CONFIG.max_length and mutant.depth <= CONFIG.max_depth


def test_shaking_all_parameters_without_parameters_is_a_no_op():
    tree = ExpressionTree(FunctionNode(FunctionSet.F1.symbols[0], (VariableNode(0, 1.5), VariableNode(1, -0.5))))
    assert shake_all_parameters(tree, CONFIG, np.random.default_rng(9)) == tree
