# app/services/metrics.py
from typing import Optional

import numpy as np

from app.core.config import settings
from app.core.errors import MetricError


def nmse(y: np.ndarray, yhat: np.ndarray, sentinel: Optional[float] = None) -> float:
    """Normalized MSE in percent, 100 / (var(y) N) * sum (y - yhat)^2, with population variance."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size < 2:
        raise MetricError(f"nmse needs two equal-length vectors of at least 2 values, got {y.shape} and {yhat.shape}")
    variance = float(np.var(y))
    if not variance > 0.0:
        raise MetricError("Target variance is zero")
    sentinel = settings.rejection_sentinel if sentinel is None else sentinel
    if not np.all(np.isfinite(yhat)):
        return sentinel
    with np.errstate(over="ignore"):
        value = 100.0 * float(np.mean((y - yhat) ** 2)) / variance
    return value if np.isfinite(value) else sentinel
