# app/services/tables.py
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.services.expression import evaluate_batch, parse_infix
from app.services.experiment import RunRecord
from app.services.problems import ProblemInstance, resolve_instance

logger = logging.getLogger(__name__)

PARTIAL_DEPENDENCE_POINTS = 101


class TableStyle(str, Enum):
    MEDIAN_NMSE = "median-nmse"
    INFEASIBLE_FRACTION = "infeasible-fraction"
    PARTIAL_DEPENDENCE = "partial-dependence"


def records_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([r.model_dump(mode="json") for r in records])
    if frame.empty:
        return frame
    frame["order"] = range(len(frame))
    return frame


def _completed(records: Sequence[RunRecord]) -> pd.DataFrame:
    frame = records_frame(records)
    if frame.empty:
        return frame
    return frame[frame["error"].isna()]


def _instance_order(frame: pd.DataFrame) -> List[str]:
    return list(dict.fromkeys(frame.sort_values("order")["instance"]))


def median_nmse_table(records: Sequence[RunRecord], partition: str = "test") -> pd.DataFrame:
    """Rows are instances, columns (noise level, algorithm), values the median NMSE over repetitions."""
    frame = _completed(records)
    if frame.empty:
        return pd.DataFrame()
    table = frame.pivot_table(
        index="instance", columns=["noise_level", "algorithm"], values=f"nmse_{partition}", aggfunc="median"
    )
    return table.reindex(_instance_order(frame))


def infeasible_fraction_table(records: Sequence[RunRecord]) -> pd.DataFrame:
    """Percentage of runs per instance and algorithm whose final model failed the sampling audit."""
    frame = _completed(records)
    if frame.empty:
        return pd.DataFrame()
    frame = frame.assign(infeasible=100.0 * (~frame["audit_feasible"].astype(bool)))
    table = frame.pivot_table(
        index="instance", columns=["noise_level", "algorithm"], values="infeasible", aggfunc="mean"
    )
    return table.reindex(_instance_order(frame))


def partial_dependence(model, instance: ProblemInstance, points: int = PARTIAL_DEPENDENCE_POINTS) -> pd.DataFrame:
    """Sweep each variable over its domain with the others fixed at their domain midpoints."""
    domain = instance.domain
    midpoint = (domain.lower + domain.upper) / 2.0
    rows = []
    for index, name in enumerate(instance.names):
        grid = np.linspace(domain[index].lo, domain[index].hi, points)
        X = np.tile(midpoint, (points, 1))
        X[:, index] = grid
        prediction = evaluate_batch(model, X)
        truth = instance.target(X)
        rows.append(pd.DataFrame({"variable": name, "x": grid, "model": prediction, "ground_truth": truth}))
    return pd.concat(rows, ignore_index=True)


def partial_dependence_table(records: Sequence[RunRecord], points: int = PARTIAL_DEPENDENCE_POINTS) -> pd.DataFrame:
    """Partial dependence of the median-test-NMSE run per (instance, algorithm, noise level)."""
    frame = _completed(records)
    if frame.empty:
        return pd.DataFrame()
    instances: Dict[str, ProblemInstance] = {}
    sweeps = []
    for (name, algorithm, noise), group in frame.groupby(["instance", "algorithm", "noise_level"], sort=False):
        group = group.sort_values(["nmse_test", "order"])
        representative = group.iloc[(len(group) - 1) // 2]
        instance = instances.setdefault(name, resolve_instance(name))
        model = parse_infix(representative["model"], n_variables=instance.n_variables)
        sweep = partial_dependence(model, instance, points)
        sweep.insert(0, "noise_level", noise)
        sweep.insert(0, "algorithm", algorithm)
        sweep.insert(0, "instance", name)
        sweeps.append(sweep)
    return pd.concat(sweeps, ignore_index=True)


def build_table(records: Sequence[RunRecord], style: TableStyle) -> pd.DataFrame:
    if style is TableStyle.MEDIAN_NMSE:
        return median_nmse_table(records)
    if style is TableStyle.INFEASIBLE_FRACTION:
        return infeasible_fraction_table(records)
    return partial_dependence_table(records)


def write_tables(records: Sequence[RunRecord], out_dir, styles: Optional[Sequence[TableStyle]] = None) -> List[Path]:
    styles = styles or (TableStyle.MEDIAN_NMSE, TableStyle.INFEASIBLE_FRACTION)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for style in styles:
        table = build_table(records, style)
        path = out / f"{style.value.replace('-', '_')}.csv"
        table.to_csv(path, index=style is not TableStyle.PARTIAL_DEPENDENCE, float_format="%.6g")
        written.append(path)
        logger.info("Wrote %s", path)
    return written
