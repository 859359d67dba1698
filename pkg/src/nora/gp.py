"""Gaussian-process surrogate of the standardized log-posterior.

The surrogate lives on the unit hypercube and models standardized values:
a product-RBF kernel with per-dimension length scales, hyperparameters fit
by maximizing the log marginal likelihood inside fixed prior bounds, and
cheap Kriging-believer conditioning (adding a "ghost" observation equal to
the current mean prediction, which leaves the mean untouched and only
shrinks the predictive uncertainty).

All surrogates are immutable after construction and safe to share across
worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .parallel import parallel_map

__all__ = [
    "OUTPUT_SCALE_BOUNDS",
    "LENGTH_SCALE_BOUNDS",
    "DEFAULT_NOISE",
    "MAX_NOISE",
    "DUPLICATE_TOL",
    "FitError",
    "KernelHyperparams",
    "TrainingSet",
    "FittedSurrogate",
    "ConditionedSurrogate",
    "kernel_eval",
    "log_marginal_likelihood",
    "fit",
]

# Hyperparameter prior box (length scales in units of the prior width).
OUTPUT_SCALE_BOUNDS = (1e-3, 1e4)
LENGTH_SCALE_BOUNDS = (1e-2, 1.0)

# Fixed observation noise (standardized output units); escalated x10 on
# factorization failure up to MAX_NOISE.
DEFAULT_NOISE = 1e-8
MAX_NOISE = 1e-4

# Two locations closer than this (euclidean, unit coordinates) are duplicates.
DUPLICATE_TOL = 1e-8


class FitError(RuntimeError):
    """Raised when no valid surrogate could be constructed."""


@dataclass(frozen=True)
class KernelHyperparams:
    """Product-RBF kernel parameters: output scale, per-dimension length scales, noise."""

    output_scale: float
    length_scales: np.ndarray
    noise: float = DEFAULT_NOISE

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        object.__setattr__(self, "length_scales", ls)
        c = self.output_scale
        if not (OUTPUT_SCALE_BOUNDS[0] <= c <= OUTPUT_SCALE_BOUNDS[1]):
            raise ValueError(f"output_scale {c} outside {OUTPUT_SCALE_BOUNDS}")
        if np.any(ls < LENGTH_SCALE_BOUNDS[0]) or np.any(ls > LENGTH_SCALE_BOUNDS[1]):
            raise ValueError(f"length scales outside {LENGTH_SCALE_BOUNDS}")
        if not self.noise > 0:
            raise ValueError("noise must be positive")

    @property
    def dim(self) -> int:
        return self.length_scales.size


@dataclass(frozen=True)
class TrainingSet:
    """Evaluated locations (unit coordinates) with raw and standardized values."""

    locations: np.ndarray
    raw_values: np.ndarray
    std_values: np.ndarray

    def __post_init__(self):
        locs = np.atleast_2d(np.asarray(self.locations, dtype=float))
        raw = np.asarray(self.raw_values, dtype=float)
        std = np.asarray(self.std_values, dtype=float)
        if locs.shape[0] != raw.size or raw.size != std.size:
            raise ValueError("locations and values disagree in length")
        if np.any(locs < 0.0) or np.any(locs > 1.0):
            raise ValueError("training locations must lie in the unit hypercube")
        if locs.shape[0] > 1:
            d2 = _sq_distances(locs, locs)
            d2[np.diag_indices_from(d2)] = np.inf
            if np.min(d2) < DUPLICATE_TOL**2:
                i, j = np.unravel_index(np.argmin(d2), d2.shape)
                raise ValueError(f"duplicate training locations {i} and {j}")
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "raw_values", raw)
        object.__setattr__(self, "std_values", std)

    @property
    def size(self) -> int:
        return self.locations.shape[0]

    @property
    def dim(self) -> int:
        return self.locations.shape[1]


def _sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances between rows of a and b."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kernel_eval(a, b, hp: KernelHyperparams) -> float:
    """Covariance between two single locations."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    z = (a - b) / hp.length_scales
    return float(hp.output_scale * np.exp(-0.5 * np.dot(z, z)))


def _kernel_cross(a: np.ndarray, b: np.ndarray, hp: KernelHyperparams) -> np.ndarray:
    """Kernel matrix between row sets a (n,d) and b (m,d), without noise."""
    sa = a / hp.length_scales
    sb = b / hp.length_scales
    d2 = (
        np.sum(sa * sa, axis=1)[:, None]
        + np.sum(sb * sb, axis=1)[None, :]
        - 2.0 * sa @ sb.T
    )
    np.maximum(d2, 0.0, out=d2)
    return hp.output_scale * np.exp(-0.5 * d2)


def _chol_with_escalation(kn: np.ndarray, noise: float):
    """Cholesky of kn + noise^2 I, escalating the noise x10 up to MAX_NOISE.

    Returns (factor, noise_used); raises FitError if even MAX_NOISE fails.
    """
    n = kn.shape[0]
    level = noise
    while True:
        try:
            factor = np.linalg.cholesky(kn + level**2 * np.eye(n))
            return factor, level
        except np.linalg.LinAlgError:
            if level >= MAX_NOISE:
                raise FitError(
                    f"kernel matrix not positive definite at jitter {level:g}"
                ) from None
            level = min(level * 10.0, MAX_NOISE)


def log_marginal_likelihood(hp: KernelHyperparams, ts: TrainingSet):
    """Log marginal likelihood of the training values and its gradient.

    Returns ``(value, gradient)`` where the gradient is taken with respect
    to the log-hyperparameters ``[log C, log l_1, ..., log l_d]``. The noise
    term is fixed and carries no gradient component.
    """
    if ts.size < 1:
        raise ValueError("training set is empty")
    x = ts.locations
    y = ts.std_values
    n = ts.size
    kn = _kernel_cross(x, x, hp)
    factor, noise = _chol_with_escalation(kn, hp.noise)
    alpha = sla.cho_solve((factor, True), y)
    value = (
        -0.5 * float(y @ alpha)
        - float(np.sum(np.log(np.diag(factor))))
        - 0.5 * n * np.log(2.0 * np.pi)
    )
    kinv = sla.cho_solve((factor, True), np.eye(n))
    # d(lml)/d(theta) = 0.5 tr((aa^T - K^-1) dK/dtheta); dK/dlogC = kn and
    # dK/dlog l_i = kn * sq_diff_i / l_i^2.
    a_mat = np.outer(alpha, alpha) - kinv
    p = a_mat * kn
    grad_logc = 0.5 * float(np.sum(p))
    r = np.sum(p, axis=1)
    px = p @ x
    per_dim = r @ (x * x) - np.sum(x * px, axis=0)
    grad_logl = per_dim / hp.length_scales**2
    return value, np.concatenate([[grad_logc], grad_logl])


class _SurrogateBase:
    """Prediction interface shared by fitted and conditioned surrogates."""

    @property
    def hyperparams(self) -> KernelHyperparams:
        raise NotImplementedError

    @property
    def all_locations(self) -> np.ndarray:
        """Training locations plus any ghost locations, in conditioning order."""
        raise NotImplementedError

    @property
    def noise_floor(self) -> float:
        """Predictive sigma at or below this level means 'already observed'.

        Covers both the fixed noise level and the round-off floor of the
        variance computation (cancellation of order eps * output_scale).
        """
        hp = self.hyperparams
        return max(10.0 * self._noise_used, 1e-6 * np.sqrt(hp.output_scale))

    def predict_mean(self, xs) -> np.ndarray:
        raise NotImplementedError

    def predict_std(self, xs) -> np.ndarray:
        """Predictive standard deviation at each row of xs (vectorized)."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        kx = _kernel_cross(self.all_locations, xs, self.hyperparams)
        v = sla.solve_triangular(self._factor, kx, lower=True)
        var = self.hyperparams.output_scale - np.einsum("ij,ij->j", v, v)
        np.maximum(var, 0.0, out=var)
        return np.sqrt(var)

    def condition_on(self, x) -> "ConditionedSurrogate":
        """Add a Kriging-believer ghost observation at x.

        The returned surrogate predicts the same mean everywhere and a
        reduced standard deviation; hyperparameters are never refit and the
        receiver is not modified. Conditioning on a location that duplicates
        an existing (training or ghost) one returns an equivalent surrogate
        flagged with ``duplicate=True``.
        """
        x = np.asarray(x, dtype=float).reshape(-1)
        locs = self.all_locations
        root = self if isinstance(self, FittedSurrogate) else self._root
        ghosts = (
            np.empty((0, locs.shape[1]))
            if isinstance(self, FittedSurrogate)
            else self._ghosts
        )
        d2 = np.sum((locs - x) ** 2, axis=1)
        if d2.size and np.min(d2) < DUPLICATE_TOL**2:
            return ConditionedSurrogate(root, ghosts, self._factor, duplicate=True)
        hp = self.hyperparams
        kvec = _kernel_cross(locs, x[None, :], hp)[:, 0]
        w = sla.solve_triangular(self._factor, kvec, lower=True)
        s2 = hp.output_scale + self._noise_used**2 - float(w @ w)
        s2 = max(s2, self._noise_used**2)
        n = locs.shape[0]
        factor = np.zeros((n + 1, n + 1))
        factor[:n, :n] = self._factor
        factor[n, :n] = w
        factor[n, n] = np.sqrt(s2)
        return ConditionedSurrogate(root, np.vstack([ghosts, x[None, :]]), factor)


class FittedSurrogate(_SurrogateBase):
    """Immutable GP state after hyperparameter fitting.

    Holds the lower-triangular factor of (K + noise^2 I) over the training
    locations and the dual weights used for mean prediction.
    """

    def __init__(self, hyperparams: KernelHyperparams, training: TrainingSet):
        if training.dim != hyperparams.dim:
            raise ValueError("hyperparameter/training dimensionality mismatch")
        self._hp = hyperparams
        self._training = training
        kn = _kernel_cross(training.locations, training.locations, hyperparams)
        self._factor, self._noise_used = _chol_with_escalation(kn, hyperparams.noise)
        self._alpha = sla.cho_solve((self._factor, True), training.std_values)

    @property
    def hyperparams(self) -> KernelHyperparams:
        return self._hp

    @property
    def training(self) -> TrainingSet:
        return self._training

    @property
    def noise_used(self) -> float:
        return self._noise_used

    @property
    def all_locations(self) -> np.ndarray:
        return self._training.locations

    @property
    def dim(self) -> int:
        return self._training.dim

    def predict_mean(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return _kernel_cross(xs, self._training.locations, self._hp) @ self._alpha


class ConditionedSurrogate(_SurrogateBase):
    """A surrogate with ghost observations layered over a fitted base.

    Ghost values equal the base mean prediction, so the mean is identical to
    the base everywhere; only the factorization (and hence the predictive
    standard deviation) changes. Layers share the immutable root surrogate.
    """

    def __init__(self, root: FittedSurrogate, ghosts: np.ndarray, factor: np.ndarray,
                 duplicate: bool = False):
        self._root = root
        self._ghosts = ghosts
        self._factor = factor
        self.duplicate = duplicate

    @property
    def hyperparams(self) -> KernelHyperparams:
        return self._root.hyperparams

    @property
    def base(self) -> FittedSurrogate:
        return self._root

    @property
    def ghost_locations(self) -> np.ndarray:
        return self._ghosts

    @property
    def _noise_used(self) -> float:
        return self._root.noise_used

    @property
    def all_locations(self) -> np.ndarray:
        return np.vstack([self._root.all_locations, self._ghosts])

    @property
    def dim(self) -> int:
        return self._root.dim

    def predict_mean(self, xs) -> np.ndarray:
        return self._root.predict_mean(xs)


def _fit_single(ts: TrainingSet, noise: float, theta0: np.ndarray,
                bounds: list) -> tuple:
    """One bounded L-BFGS-B run over log-hyperparameters; returns (value, theta)."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(theta):
        # L-BFGS-B may probe epsilon outside its bounds, and the exp/log
        # round-trip itself can overshoot the linear bounds.
        hp = KernelHyperparams(
            output_scale=float(np.clip(np.exp(theta[0]), *OUTPUT_SCALE_BOUNDS)),
            length_scales=np.clip(np.exp(theta[1:]), *LENGTH_SCALE_BOUNDS),
            noise=noise,
        )
        try:
            value, grad = log_marginal_likelihood(hp, ts)
        except FitError:
            return 1e25, np.zeros_like(theta)
        return -value, -grad

    res = minimize(
        objective,
        theta0,
        method="L-BFGS-B",
        jac=True,
        bounds=bounds,
        options={"maxiter": 200, "ftol": 1e-9},
    )
    return float(res.fun), np.clip(np.asarray(res.x), lo, hi)


def fit(ts: TrainingSet, restarts: int | None = None, seed: int = 0,
        workers: int = 1, initial: KernelHyperparams | None = None) -> FittedSurrogate:
    """Fit kernel hyperparameters by restarted marginal-likelihood maximization.

    Parameters
    ----------
    ts : TrainingSet
        At least two points, standardized values.
    restarts : int, optional
        Number of random starts drawn uniformly in log-space of the
        hyperparameter prior box. Defaults to ``2 * (d + 1)``.
    seed : int
        Seed for the restart draw.
    workers : int
        Restarts are independent and run in parallel when > 1.
    initial : KernelHyperparams, optional
        Extra warm start (e.g. the previous iteration's fit); the best
        result over all starts wins.
    """
    if ts.size < 2:
        raise ValueError("need at least 2 training points to fit")
    d = ts.dim
    if restarts is None:
        restarts = 2 * (d + 1)
    log_bounds = [tuple(np.log(OUTPUT_SCALE_BOUNDS))] + [
        tuple(np.log(LENGTH_SCALE_BOUNDS))
    ] * d
    lo = np.array([b[0] for b in log_bounds])
    hi = np.array([b[1] for b in log_bounds])
    rng = np.random.default_rng(seed)
    starts = [lo + rng.random(d + 1) * (hi - lo) for _ in range(restarts)]
    if initial is not None:
        theta = np.concatenate(
            [[np.log(initial.output_scale)], np.log(initial.length_scales)]
        )
        starts.append(np.clip(theta, lo, hi))
    results = parallel_map(
        _fit_single,
        [(ts, DEFAULT_NOISE, theta0, log_bounds) for theta0 in starts],
        workers=workers,
    )
    best_value, best_theta = min(results, key=lambda r: r[0])
    if best_value >= 1e25:
        raise FitError("no restart produced a valid factorization")
    hp = KernelHyperparams(
        output_scale=float(np.clip(np.exp(best_theta[0]), *OUTPUT_SCALE_BOUNDS)),
        length_scales=np.clip(np.exp(best_theta[1:]), *LENGTH_SCALE_BOUNDS),
        noise=DEFAULT_NOISE,
    )
    return FittedSurrogate(hp, ts)
