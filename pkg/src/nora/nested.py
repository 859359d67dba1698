"""Nested sampling over the unit hypercube.

A controller owns the live-point set and repeatedly discards a small batch
of the worst points, replacing them with the endpoints of whitened
slice-sampling chains constrained to the current target threshold. Chains
are seeded per (run seed, global step index), so the emitted dead-point
stream is identical for every worker count; workers only execute chains
concurrently.

Volume bookkeeping uses the deterministic expectation of the order
statistics: discarding the worst of ``m`` live points shrinks ``ln X`` by
``1/m`` (the familiar ``X_k = exp(-k/n_live)`` when batches have size one).
The same rule thins the oversized initial prior sample down to ``n_live``
and flushes the final live set.

The target is a batched callable: it receives an ``(m, d)`` array of unit
coordinates and returns ``m`` log-density values; ``-inf`` marks zero
likelihood, while NaN or ``+inf`` abort the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .parallel import persistent_pool

__all__ = [
    "DEFAULT_BASE_PRECISION",
    "SamplerError",
    "NsSettings",
    "DeadPointSample",
    "scaled_settings",
    "run",
    "posterior_resample",
]

# PolyChord-convention stopping criterion before the x5 relaxation.
DEFAULT_BASE_PRECISION = 1e-3

_MAX_EXPANSIONS = 16
_MAX_SHRINKS = 200
_MAX_RESEEDS = 5


class SamplerError(RuntimeError):
    """Raised when the sampler cannot make progress."""


@dataclass(frozen=True)
class NsSettings:
    """Precision parameters of one nested-sampling run."""

    n_live: int
    precision_criterion: float = DEFAULT_BASE_PRECISION
    num_repeats: int = 5
    n_prior: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_live < 2:
            raise ValueError("n_live must be >= 2")
        if not 0.0 < self.precision_criterion < 1.0:
            raise ValueError("precision_criterion must be in (0, 1)")
        if self.num_repeats < 1:
            raise ValueError("num_repeats must be >= 1")
        n_prior = self.n_prior if self.n_prior is not None else 2 * self.n_live
        if n_prior < self.n_live:
            raise ValueError("n_prior must be >= n_live")
        object.__setattr__(self, "n_prior", n_prior)


@dataclass(frozen=True)
class DeadPointSample:
    """Weighted dead points plus the evidence estimate.

    ``log_target`` is non-decreasing in emission order; ``log_weights`` are
    unnormalized (they sum, in linear space, to the evidence estimate).
    """

    locations: np.ndarray
    log_target: np.ndarray
    log_weights: np.ndarray
    log_evidence: float
    log_evidence_error: float
    n_target_evals: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.log_target.size


def scaled_settings(n_train: int, d: int, base: NsSettings | None = None) -> NsSettings:
    """Precision parameters scaled to the current training-set size.

    Live points are 3x the training size, capped at 25x the dimensionality
    (and floored at 2x the dimensionality to keep the sampler well posed);
    slice chains run 5x the dimensionality; the stopping criterion is
    relaxed by a factor of 5 from the base value.
    """
    if n_train < 1 or d < 1:
        raise ValueError("n_train and d must be >= 1")
    base_precision = base.precision_criterion if base is not None else DEFAULT_BASE_PRECISION
    seed = base.seed if base is not None else 0
    n_live = max(2 * d, min(3 * n_train, 25 * d))
    return NsSettings(
        n_live=n_live,
        precision_criterion=5.0 * base_precision,
        num_repeats=5 * d,
        n_prior=2 * n_live,
        seed=seed,
    )


def _check_values(values: np.ndarray, points: np.ndarray):
    bad = np.isnan(values) | (values == np.inf)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise SamplerError(
            f"target returned {values[idx]} at {points[idx].tolist()}"
        )


def _line_box_range(x: np.ndarray, v: np.ndarray):
    """Parameter range t such that x + t*v stays inside the unit cube."""
    t_lo, t_hi = -np.inf, np.inf
    for xi, vi in zip(x, v):
        if vi > 0:
            t_lo = max(t_lo, (0.0 - xi) / vi)
            t_hi = min(t_hi, (1.0 - xi) / vi)
        elif vi < 0:
            t_lo = max(t_lo, (1.0 - xi) / vi)
            t_hi = min(t_hi, (0.0 - xi) / vi)
    return t_lo, t_hi


def _slice_chain(target, x0, f0, threshold, white, num_repeats, rng, live, live_values):
    """One constrained slice-sampling chain; returns (x, value, nevals, reseeds).

    Each repeat updates along one random whitened direction with linear
    step-out and shrinkage, under the hard constraint target >= threshold
    (and the unit box). If step-out exhausts its expansion budget the chain
    is re-seeded from a random live point.
    """
    d = x0.size
    x, fx = np.array(x0), f0
    nevals = 0
    reseeds = 0

    def evaluate(point):
        nonlocal nevals
        nevals += 1
        val = float(np.asarray(target(point[None, :]))[0])
        if np.isnan(val) or val == np.inf:
            raise SamplerError(f"target returned {val} at {point.tolist()}")
        return val

    rep = 0
    while rep < num_repeats:
        e = rng.standard_normal(d)
        e /= np.linalg.norm(e)
        v = white @ e
        t_min, t_max = _line_box_range(x, v)
        u = rng.random()
        lo = max(-u, t_min)
        hi = min(1.0 - u, t_max)
        expansions = 0
        while lo > t_min and expansions < _MAX_EXPANSIONS:
            if evaluate(x + lo * v) < threshold:
                break
            lo = max(lo - 1.0, t_min)
            expansions += 1
        while hi < t_max and expansions < _MAX_EXPANSIONS:
            if evaluate(x + hi * v) < threshold:
                break
            hi = min(hi + 1.0, t_max)
            expansions += 1
        if expansions >= _MAX_EXPANSIONS:
            reseeds += 1
            if reseeds > _MAX_RESEEDS:
                rep += 1
                continue
            i = int(rng.integers(live.shape[0]))
            x, fx = np.array(live[i]), live_values[i]
            continue
        for _ in range(_MAX_SHRINKS):
            if hi - lo < 1e-14:
                break
            t = rng.uniform(lo, hi)
            y = x + t * v
            val = evaluate(y)
            if val >= threshold:
                x, fx = y, val
                break
            if t < 0:
                lo = t
            else:
                hi = t
        # On shrink exhaustion the bracket has collapsed onto x, which
        # already satisfies the constraint; keeping x is valid.
        rep += 1
    return x, fx, nevals, reseeds


def _chain_group(live, live_values, threshold, white, starts, seed_keys,
                 num_repeats, target):
    """Run a contiguous group of chains; returns list of chain results."""
    out = []
    for start_idx, key in zip(starts, seed_keys):
        rng = np.random.default_rng(np.random.SeedSequence(key))
        out.append(
            _slice_chain(target, live[start_idx], live_values[start_idx],
                         threshold, white, num_repeats, rng, live, live_values)
        )
    return out


def _log_diff_exp(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -np.inf:
        return a
    return a + np.log1p(-np.exp(min(b - a, 0.0)))


def run(target, dim: int, settings: NsSettings, workers: int = 1) -> DeadPointSample:
    """Nested-sample the target over the unit hypercube.

    Parameters
    ----------
    target : callable
        Batched log-density: maps an (m, dim) array to m values. Must be
        finite or -inf almost everywhere; NaN or +inf raise SamplerError.
    dim : int
        Dimensionality of the hypercube.
    settings : NsSettings
        Live-point count, stopping criterion, chain length, prior-sample
        size and seed.
    workers : int
        Chains of one discard round run concurrently across this many
        processes. The emitted sample is identical for every worker count.

    Returns
    -------
    DeadPointSample
        Weighted dead points (ascending target value), evidence estimate
        with its error, the evaluation count, and diagnostics.
    """
    if settings.n_live < 2 * dim:
        raise ValueError("n_live must be >= 2 * dim")
    n_live = settings.n_live
    controller = np.random.default_rng(np.random.SeedSequence((settings.seed, 0)))

    points = controller.random((settings.n_prior, dim))
    values = np.asarray(target(points), dtype=float)
    _check_values(values, points)
    n_evals = settings.n_prior
    if not np.any(values > -np.inf):
        raise SamplerError(
            f"no prior point with finite target after {settings.n_prior} draws"
        )

    order = np.argsort(values, kind="stable")
    points, values = points[order], values[order]

    dead_locs: list[np.ndarray] = []
    dead_vals: list[float] = []
    dead_logw: list[float] = []
    log_x = 0.0
    log_z = -np.inf

    def emit(loc, val, m):
        """Discard one point from a live set of size m."""
        nonlocal log_x, log_z
        new_log_x = log_x - 1.0 / m
        logw = val + _log_diff_exp(log_x, new_log_x)
        dead_locs.append(loc)
        dead_vals.append(val)
        dead_logw.append(logw)
        log_x = new_log_x
        log_z = np.logaddexp(log_z, logw)

    # Thin the prior sample down to n_live: the worst points are proper
    # dead points of a shrinking live set with no replacement.
    m = settings.n_prior
    while m > n_live:
        emit(points[0], values[0], m)
        points, values = points[1:], values[1:]
        m -= 1

    batch = max(1, n_live // 4)
    step = 0
    rounds = 0
    reseeds_total = 0
    with persistent_pool(_chain_group, workers) as pmap:
        while True:
            with np.errstate(over="ignore"):
                log_z_live = logsumexp(values) - np.log(n_live) + log_x
            if log_z > -np.inf:
                frac = log_z_live - np.logaddexp(log_z, log_z_live)
                if frac < np.log(settings.precision_criterion):
                    break
            if log_x < -690.0:  # volume underflow; cannot happen before
                break            # termination for any sane precision

            order = np.argsort(values, kind="stable")
            points, values = points[order], values[order]
            threshold = values[batch - 1]
            survivors = points[batch:]
            survivor_values = values[batch:]
            for j in range(batch):
                emit(points[j], values[j], n_live - j)

            if survivors.shape[0] >= 2:
                cov = np.cov(survivors, rowvar=False).reshape(dim, dim)
            else:
                cov = 0.01 * np.eye(dim)
            white = np.linalg.cholesky(cov + 1e-10 * np.eye(dim))
            starts = controller.integers(survivors.shape[0], size=batch)
            seed_keys = [(settings.seed, 1, step + j) for j in range(batch)]
            groups = np.array_split(np.arange(batch), min(workers, batch) or 1)
            args = [
                (survivors, survivor_values, threshold, white, starts[g],
                 [seed_keys[j] for j in g], settings.num_repeats, target)
                for g in groups if g.size
            ]
            results = [res for group in pmap(args) for res in group]
            new_points = np.array([r[0] for r in results])
            new_values = np.array([r[1] for r in results])
            n_evals += sum(r[2] for r in results)
            reseeds_total += sum(r[3] for r in results)
            points = np.vstack([survivors, new_points])
            values = np.concatenate([values[batch:], new_values])
            step += batch
            rounds += 1

    # Flush the remaining live points: equal shells of the leftover volume.
    order = np.argsort(values, kind="stable")
    points, values = points[order], values[order]
    shell = log_x - np.log(n_live)
    for j in range(n_live):
        logw = values[j] + shell
        dead_locs.append(points[j])
        dead_vals.append(values[j])
        dead_logw.append(logw)
        log_z = np.logaddexp(log_z, logw)

    log_weights = np.array(dead_logw)
    log_targets = np.array(dead_vals)
    with np.errstate(invalid="ignore"):
        w_norm = np.exp(log_weights - log_z)
        info_terms = np.where(w_norm > 0, w_norm * (log_targets - log_z), 0.0)
    information = float(np.sum(info_terms[np.isfinite(info_terms)]))
    log_z_err = float(np.sqrt(max(information, 0.0) / n_live))

    return DeadPointSample(
        locations=np.array(dead_locs),
        log_target=log_targets,
        log_weights=log_weights,
        log_evidence=float(log_z),
        log_evidence_error=log_z_err,
        n_target_evals=int(n_evals),
        diagnostics={"rounds": rounds, "steps": step, "reseeds": reseeds_total},
    )


def posterior_resample(dp: DeadPointSample, n: int, seed: int = 0) -> np.ndarray:
    """Draw n locations with probability proportional to the dead-point weights."""
    if dp.size == 0:
        raise ValueError("empty dead-point sample")
    finite = dp.log_weights > -np.inf
    if not np.any(finite):
        raise ValueError("all dead-point weights are zero")
    logw = dp.log_weights - np.max(dp.log_weights[finite])
    w = np.exp(logw)
    w[~finite] = 0.0
    w /= w.sum()
    rng = np.random.default_rng(seed)
    idx = rng.choice(dp.size, size=n, p=w)
    return dp.locations[idx]
