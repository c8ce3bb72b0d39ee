"""Series metrics used by the reports."""

from __future__ import annotations

import numpy as np

from ..errors import EmptySeries, LengthMismatch

TRAJ_METRICS = ("r0", "r1", "d10", "dc1", "wastage")


def moving_average(series, window: int) -> np.ndarray:
    """Trailing mean over the last ``min(window, t + 1)`` points."""
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise EmptySeries("moving average of an empty series")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    out = np.empty_like(x)
    for t in range(x.size):
        lo = max(0, t - window + 1)
        out[t] = x[lo : t + 1].mean()
    return out


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"series lengths differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise EmptySeries("comparison of empty series")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def column(rows, name) -> np.ndarray:
    return np.array([float(r[name]) for r in rows])


def normalized_revenue(rows, raw_price: float) -> float:
    """Mean total reward less the raw-material cost of wastage."""
    if not rows:
        raise EmptySeries("no trajectory rows")
    total = column(rows, "r0") + column(rows, "r1")
    return float(total.mean() - raw_price * column(rows, "wastage").mean())


def averages(rows, raw_price: float) -> dict:
    if not rows:
        raise EmptySeries("no trajectory rows")
    out = {m: float(column(rows, m).mean()) for m in TRAJ_METRICS}
    out["revenue"] = normalized_revenue(rows, raw_price)
    return out


def relative_gain(better, worse) -> float:
    """Percent by which ``better`` exceeds ``worse``, relative to |worse|."""
    if worse == 0:
        return float("inf") if better != worse else 0.0
    return float((better - worse) / abs(worse) * 100.0)
