"""Acquisition function over GP surrogates.

The score is ``2 * zeta * (mu - p_max) + log(sigma)``: an exploitation term
pulling toward the current best training value, balanced against a
log-uncertainty exploration term by the dimensional factor zeta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SIGMA_FLOOR",
    "AcquisitionParams",
    "default_zeta",
    "acquisition_values",
    "acquisition_objective",
]

# Absolute lower limit for the sigma sentinel check; the effective floor is
# the surrogate's noise_floor, which is always larger in practice.
SIGMA_FLOOR = 1e-15


def default_zeta(d: int) -> float:
    """Dimensional regularization factor d**-0.85."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return float(d) ** -0.85


@dataclass(frozen=True)
class AcquisitionParams:
    """zeta and the current maximum standardized training value."""

    zeta: float
    p_max: float

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")

    @classmethod
    def from_training(cls, surrogate, zeta: float | None = None) -> "AcquisitionParams":
        d = surrogate.dim
        return cls(
            zeta=default_zeta(d) if zeta is None else zeta,
            p_max=float(np.max(surrogate.training.std_values)),
        )


def acquisition_values(surrogate, xs, params: AcquisitionParams) -> np.ndarray:
    """Acquisition at each row of xs, in one vectorized mean + std pass.

    Points whose predictive sigma is at or below the surrogate's noise floor
    (already-observed locations, Kriging-believer ghosts) get a -inf
    sentinel so ranking logic can discard them uniformly.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    mu = surrogate.predict_mean(xs)
    sigma = surrogate.predict_std(xs)
    floor = max(SIGMA_FLOOR, surrogate.noise_floor)
    known = sigma <= floor
    values = np.empty(xs.shape[0])
    values[known] = -np.inf
    live = ~known
    values[live] = 2.0 * params.zeta * (mu[live] - params.p_max) + np.log(sigma[live])
    return values


def acquisition_objective(surrogate, x, params: AcquisitionParams) -> float:
    """Smooth scalar acquisition for numerical optimizers.

    Identical to ``acquisition_values`` except that sub-floor sigmas are
    clamped to the floor instead of mapped to -inf, so gradients stay finite
    near training points.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    mu = surrogate.predict_mean(x)[0]
    sigma = surrogate.predict_std(x)[0]
    floor = max(SIGMA_FLOOR, surrogate.noise_floor)
    return 2.0 * params.zeta * (mu - params.p_max) + float(np.log(max(sigma, floor)))
