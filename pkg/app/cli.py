# app/cli.py
"""Command-line entry point: `python -m app.cli <command> ...`."""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from app.core.config import settings
from app.core.errors import ShapeRegressionError
from app.services.algorithms import Algorithm
from app.services.audit import audit_feasibility
from app.services.experiment import (
    ExperimentConfig,
    GridSpec,
    RunSpec,
    data_seed,
    execute_run,
    experiment,
    grid_search,
    load_records,
    save_records,
)
from app.services.expression import FunctionSet, parse_infix
from app.services.problems import SplitKind, export_dataset, resolve_instance, sample_dataset
from app.services.tables import TableStyle, build_table

logger = logging.getLogger("app.cli")


def parse_seeds(text: str) -> List[int]:
    """`1..30` (inclusive) or a comma-separated list."""
    if ".." in text:
        first, last = text.split("..", 1)
        return list(range(int(first), int(last) + 1))
    return [int(part) for part in text.split(",") if part.strip()]


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--instance", required=True, help="built-in instance name or a .json instance file")
    parser.add_argument("--algorithm", required=True, type=Algorithm)
    parser.add_argument("--noise", type=float, default=0.0)
    parser.add_argument("--split", type=SplitKind, default=SplitKind.IN_DOMAIN)
    parser.add_argument("--population-size", type=int, default=1000)
    parser.add_argument("--generations", type=int, default=None)
    parser.add_argument("--max-evaluations", type=int, default=500_000)
    parser.add_argument("--audit-samples", type=int, default=settings.audit_samples)
    _add_ordering_option(parser)


def _add_ordering_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--paper-faithful", "--check-before-scaling", dest="check_before_scaling", action="store_true",
                        help="check feasibility before parameter optimization and scaling")


def _spec(args, **overrides) -> RunSpec:
    return RunSpec.create(
        instance=args.instance,
        algorithm=args.algorithm,
        noise_level=args.noise,
        split=args.split,
        population_size=args.population_size,
        generations=args.generations,
        max_evaluations=args.max_evaluations,
        check_before_scaling=args.check_before_scaling,
        audit_samples=args.audit_samples,
        **overrides,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scsr", description="Shape-constrained symbolic regression")
    parser.add_argument("--log-level", default=settings.log_level)
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="single run")
    _add_run_options(run)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--max-length", type=int, default=30)
    run.add_argument("--function-set", type=FunctionSet, default=FunctionSet.F3)
    run.add_argument("--out", help="append the record to this JSONL file")

    grid = commands.add_parser("gridsearch", help="grid search over max length and function set")
    _add_run_options(grid)
    grid.add_argument("--seeds", type=parse_seeds, default=parse_seeds("1..30"))
    grid.add_argument("--master-seed", type=int, default=0)
    grid.add_argument("--max-lengths", type=lambda s: [int(v) for v in s.split(",")], default=[10, 20, 30, 40, 50])
    grid.add_argument("--function-sets", type=lambda s: [FunctionSet(v) for v in s.split(",")], default=list(FunctionSet))
    grid.add_argument("--out", help="directory for the cell table and final records")

    exp = commands.add_parser("experiment", help="multi-run experiment from a JSON config")
    exp.add_argument("--config", required=True)
    exp.add_argument("--out", default=settings.results_dir)
    exp.add_argument("--workers", type=int, default=settings.workers)
    _add_ordering_option(exp)

    audit = commands.add_parser("audit", help="sampling feasibility audit of a model")
    audit.add_argument("--model", required=True, help="infix expression or a file containing one")
    audit.add_argument("--instance", required=True)
    audit.add_argument("--samples", type=int, default=settings.audit_samples)
    audit.add_argument("--seed", type=int, default=0)

    table = commands.add_parser("table", help="summary tables from persisted run records")
    table.add_argument("--in", dest="source", required=True)
    table.add_argument("--style", type=TableStyle, default=TableStyle.MEDIAN_NMSE)
    table.add_argument("--out", help="CSV output path (stdout if omitted)")

    export = commands.add_parser("export", help="export a sampled dataset as CSV")
    export.add_argument("--instance", required=True)
    export.add_argument("--noise", type=float, default=0.0)
    export.add_argument("--split", type=SplitKind, default=SplitKind.IN_DOMAIN)
    export.add_argument("--seed", type=int, default=0)
    export.add_argument("--out", default=settings.results_dir)
    return parser


def cmd_run(args) -> int:
    spec = _spec(args, seed=args.seed, max_length=args.max_length, function_set=args.function_set)
    record = execute_run(spec)
    print(record.model_dump_json(indent=2))
    if args.out:
        with Path(args.out).open("a", encoding="utf-8") as handle:
            handle.write(record.model_dump_json() + "\n")
    return 0


def cmd_gridsearch(args) -> int:
    grid = GridSpec.create(max_lengths=args.max_lengths, function_sets=args.function_sets)
    result = grid_search(_spec(args), grid, args.seeds, args.master_seed)
    for cell in result.cells:
        print(f"{cell.max_length:>4} {cell.function_set.value}  median val NMSE {cell.median_validation_nmse}  "
              f"feasible {cell.feasible_fraction:.2f}  failures {cell.failures}")
    best = result.best_cell
    print(f"best cell: max_length={best.max_length} function_set={best.function_set.value}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid_cells.json").write_text(
            json.dumps([c.model_dump(mode="json") for c in result.cells], indent=2), encoding="utf-8"
        )
        save_records(result.records, str(out / "runs.jsonl"))
    return 0


def cmd_experiment(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.check_before_scaling:
        config = config.model_copy(update={"check_before_scaling": True})
    records = experiment(config, args.out, args.workers)
    failed = sum(1 for r in records if r.error)
    print(f"{len(records)} runs written to {args.out} ({failed} failed)")
    return 0


def cmd_audit(args) -> int:
    instance = resolve_instance(args.instance)
    text = args.model
    if Path(text).is_file():
        text = Path(text).read_text(encoding="utf-8").strip()
    tree = parse_infix(text, names=instance.names, n_variables=instance.n_variables)
    verdict = audit_feasibility(tree, instance, n_samples=args.samples, rng=np.random.default_rng(args.seed))
    print(verdict)
    return 0


def cmd_table(args) -> int:
    table = build_table(load_records(args.source), args.style)
    index = args.style is not TableStyle.PARTIAL_DEPENDENCE
    if args.out:
        table.to_csv(args.out, index=index, float_format="%.6g")
    else:
        print(table.to_csv(index=index, float_format="%.6g"))
    return 0


def cmd_export(args) -> int:
    instance = resolve_instance(args.instance)
    seed = data_seed(args.seed, instance.name, args.split, 0)
    data = sample_dataset(instance, args.noise, args.split, np.random.default_rng(seed))
    stem = f"{instance.name}_{args.split.value}_noise{args.noise:g}"
    for path in export_dataset(data, args.out, stem, seed):
        print(path)
    return 0


COMMANDS = {
    "run": cmd_run,
    "gridsearch": cmd_gridsearch,
    "experiment": cmd_experiment,
    "audit": cmd_audit,
    "table": cmd_table,
    "export": cmd_export,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ShapeRegressionError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
