"""Small Monte Carlo summary helpers."""

from dataclasses import dataclass
import math

import numpy as np

# Pass/fail rules throughout the toolkit use four standard errors.
Z_HALFWIDTH = 4.0


@dataclass(frozen=True)
class Estimate:
    """A Monte Carlo mean with its standard error."""

    value: float
    stderr: float
    n: int = 0

    @property
    def halfwidth(self):
        return Z_HALFWIDTH * self.stderr

    def covers(self, target, extra=0.0):
        return abs(self.value - target) <= self.halfwidth + extra

    def to_dict(self):
        return {"value": self.value, "stderr": self.stderr, "halfwidth": self.halfwidth, "n": self.n}


def mean_estimate(samples):
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return Estimate(float(np.mean(x)), se, n)


def loglog_slope(x, y):
    """Least-squares slope of log y against log x (positive entries only)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)
    return float(slope)
