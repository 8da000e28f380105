# app/services/tree_ops.py
from typing import Callable, Dict, List, Optional

import numpy as np

from app.core.errors import ConfigurationError
from app.services.expression import (
    ExpressionTree,
    FunctionNode,
    ModelSpaceConfig,
    Node,
    ParameterNode,
    VariableNode,
    node_length,
)

CROSSOVER_ATTEMPTS = 10


def random_leaf(config: ModelSpaceConfig, rng: np.random.Generator) -> Node:
    if rng.random() < 0.5:
        return ParameterNode(float(rng.normal()))
    return VariableNode(int(rng.integers(config.n_variables)), float(rng.normal()))


class _Slot:
    __slots__ = ("depth", "symbol", "children")

    def __init__(self, depth: int):
        self.depth = depth
        self.symbol = None
        self.children: List["_Slot"] = []


def _grow(config: ModelSpaceConfig, target_length: int, max_depth: int, rng: np.random.Generator) -> Node:
    """PTC2: expand random frontier slots until the target size is reached, then close the frontier with leaves."""
    symbols = config.function_set.symbols
    root = _Slot(1)
    frontier = [root]
    size = 1
    while frontier and size < target_length:
        slot = frontier.pop(int(rng.integers(len(frontier))))
        if slot.depth >= max_depth:
            continue
        fitting = [s for s in symbols if size + s.arity <= target_length]
        if not fitting:
            continue
        slot.symbol = fitting[int(rng.integers(len(fitting)))]
        slot.children = [_Slot(slot.depth + 1) for _ in range(slot.symbol.arity)]
        frontier.extend(slot.children)
        size += slot.symbol.arity

    def freeze(slot: _Slot) -> Node:
        if slot.symbol is None:
            return random_leaf(config, rng)
        return FunctionNode(slot.symbol, tuple(freeze(child) for child in slot.children))

    return freeze(root)


def ptc2_random_tree(
    config: ModelSpaceConfig,
    target_length: int,
    rng: np.random.Generator,
    max_depth: Optional[int] = None,
) -> ExpressionTree:
    if config.n_variables < 1:
        raise ConfigurationError("Model space needs at least one variable")
    if not 1 <= target_length <= config.max_length:
        raise ConfigurationError(f"target_length must be in [1, {config.max_length}], got {target_length}")
    return ExpressionTree(_grow(config, target_length, max_depth or config.max_depth, rng))


def random_population(config: ModelSpaceConfig, size: int, rng: np.random.Generator) -> List[ExpressionTree]:
    return [ptc2_random_tree(config, int(rng.integers(1, config.max_length + 1)), rng) for _ in range(size)]


def within_limits(tree: ExpressionTree, config: ModelSpaceConfig) -> bool:
    return tree.length <= config.max_length and tree.depth <= config.max_depth


def subtree_crossover(
    a: ExpressionTree,
    b: ExpressionTree,
    config: ModelSpaceConfig,
    rng: np.random.Generator,
) -> ExpressionTree:
    """Replace a random subtree of `a` with a random subtree of `b`; returns `a` if no size-valid child is found."""
    cut_points = [path for _, path, _ in a.iter_nodes()]
    donors = [node for node, _, _ in b.iter_nodes()]
    for _ in range(CROSSOVER_ATTEMPTS):
        cut = cut_points[int(rng.integers(len(cut_points)))]
        donor = donors[int(rng.integers(len(donors)))]
        child = a.replace(cut, donor)
        if within_limits(child, config):
            return child
    return a


# ---------------------------------------------------------------------------
# Mutation
# ---------------------------------------------------------------------------

def replace_branch(tree: ExpressionTree, config: ModelSpaceConfig, rng: np.random.Generator) -> ExpressionTree:
    nodes = list(tree.iter_nodes())
    node, path, depth = nodes[int(rng.integers(len(nodes)))]
    budget = config.max_length - (tree.length - node_length(node))
    target = int(rng.integers(1, max(budget, 1) + 1))
    branch = _grow(config, target, max(config.max_depth - depth + 1, 1), rng)
    return tree.replace(path, branch)


def change_symbol(tree: ExpressionTree, config: ModelSpaceConfig, rng: np.random.Generator) -> ExpressionTree:
    functions = [(node, path) for node, path, _ in tree.iter_nodes() if isinstance(node, FunctionNode)]
    if not functions:
        return tree
    node, path = functions[int(rng.integers(len(functions)))]
    alternatives = [s for s in config.function_set.symbols if s.arity == node.symbol.arity and s is not node.symbol]
    if not alternatives:
        return tree
    symbol = alternatives[int(rng.integers(len(alternatives)))]
    return tree.replace(path, FunctionNode(symbol, node.children))


def shake_all_parameters(tree: ExpressionTree, config: ModelSpaceConfig, rng: np.random.Generator) -> ExpressionTree:
    result = tree
    for node, path, _ in tree.iter_nodes():
        if isinstance(node, ParameterNode):
            result = result.replace(path, ParameterNode(node.value + float(rng.normal())))
    return result


def shake_one_parameter(tree: ExpressionTree, config: ModelSpaceConfig, rng: np.random.Generator) -> ExpressionTree:
    parameters = [(node, path) for node, path, _ in tree.iter_nodes() if isinstance(node, ParameterNode)]
    if not parameters:
        return tree
    node, path = parameters[int(rng.integers(len(parameters)))]
    return tree.replace(path, ParameterNode(node.value + float(rng.normal())))


MUTATION_OPERATORS: Dict[str, Callable[[ExpressionTree, ModelSpaceConfig, np.random.Generator], ExpressionTree]] = {
    "replace_branch": replace_branch,
    "change_symbol": change_symbol,
    "shake_all_parameters": shake_all_parameters,
    "shake_one_parameter": shake_one_parameter,
}


def mutate(tree: ExpressionTree, config: ModelSpaceConfig, rng: np.random.Generator) -> ExpressionTree:
    operators = list(MUTATION_OPERATORS.values())
    mutant = operators[int(rng.integers(len(operators)))](tree, config, rng)
    return mutant if within_limits(mutant, config) else tree
