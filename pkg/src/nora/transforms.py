"""Parameter-space and output-value transformations.

All internal modelling happens on the unit hypercube; user-facing parameter
values live in a rectangular prior box. Log-posterior values are standardized
to zero mean and unit standard deviation before GP fitting, and the scaler is
refit every time the training set grows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PriorBox", "OutputScaler", "to_unit", "from_unit", "fit_scaler"]


@dataclass(frozen=True)
class PriorBox:
    """Axis-aligned box of valid parameter values, in user units."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.ndim != 1 or lower.shape != upper.shape:
            raise ValueError("lower and upper must be 1-d arrays of equal length")
        if lower.size < 1:
            raise ValueError("box must have at least one dimension")
        if not np.all(upper > lower):
            bad = int(np.argmin(upper - lower))
            raise ValueError(f"upper must exceed lower in every dimension (dim {bad})")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower


@dataclass(frozen=True)
class OutputScaler:
    """Affine standardization of log-posterior values.

    `mean` and `scale` are the sample mean and (population, divide-by-N)
    standard deviation of the values the scaler was fit on. A degenerate
    scale is clamped to 1 so flat early training sets cannot divide by zero.
    """

    mean: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def standardize(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.mean) / self.scale

    def unstandardize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.scale + self.mean


def to_unit(x, box: PriorBox) -> np.ndarray:
    """Map user-space points into the unit hypercube.

    Accepts a single point of shape (d,) or a batch of shape (n, d); raises
    a ValueError naming the offending coordinate for out-of-box input.
    """
    x = np.asarray(x, dtype=float)
    lo, wid = box.lower, box.widths
    below = x < lo
    above = x > box.upper
    if np.any(below) or np.any(above):
        bad = np.argwhere(below | above)
        dim = int(bad[0][-1])
        raise ValueError(f"point outside the prior box in coordinate {dim}")
    return (x - lo) / wid


def from_unit(u, box: PriorBox) -> np.ndarray:
    """Map unit-hypercube points back to user space (inverse of to_unit)."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0.0) or np.any(u > 1.0):
        bad = np.argwhere((u < 0.0) | (u > 1.0))
        dim = int(bad[0][-1])
        raise ValueError(f"unit coordinate {dim} outside [0, 1]")
    return box.lower + u * box.widths


def fit_scaler(y) -> OutputScaler:
    """Fit an OutputScaler to raw log-posterior values.

    Uses the population (divide-by-N) standard deviation. Requires at least
    two values; if the values are (nearly) identical the scale is clamped
    to 1 so standardization stays well defined.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size < 2:
        raise ValueError("need at least 2 values to fit a scaler")
    if not np.all(np.isfinite(y)):
        raise ValueError("scaler input must be finite")
    mean = float(np.mean(y))
    scale = float(np.std(y))
    if scale < 1e-12 * max(1.0, abs(mean)):
        scale = 1.0
    return OutputScaler(mean=mean, scale=scale)
