"""The active-learning loop.

Each iteration refits the surrogate on all finite evaluations, acquires a
batch of new locations (nested sampling of the surrogate mean plus ranked
conditioning, or the sequential-optimization baseline), evaluates the true
target at the batch in parallel, and appends the results. A fixed budget of
true-target evaluations is the only stopping rule; the final partial batch
is truncated to hit it exactly. After the loop a final surrogate is fit and
nested-sampled to produce the output chain and metrics for either strategy.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import metrics as metrics_mod
from . import nested
from .acquisition import AcquisitionParams, acquisition_objective, acquisition_values
from .gp import DUPLICATE_TOL, FittedSurrogate, TrainingSet, fit
from .parallel import parallel_map
from .ranked_pool import rank_sample_split
from .targets import ProtocolError, Target
from .transforms import fit_scaler, from_unit, to_unit

log = logging.getLogger(__name__)

__all__ = ["DriverError", "RunConfig", "RunRecord", "initial_design", "run"]

STRATEGIES = ("nora", "seqopt")


class DriverError(RuntimeError):
    """Unrecoverable run failure; carries the partial record when available."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass
class RunConfig:
    """Control constants of one active-learning run."""

    target: Target
    budget: int
    strategy: str = "nora"
    batch_size: int | None = None      # default: dimensionality
    initial_count: int | None = None   # default: 3 * dimensionality
    seqopt_restarts: int | None = None  # default: 5 * dimensionality
    gp_restarts: int | None = None     # default: 2 * (dimensionality + 1)
    zeta: float | None = None          # default: d ** -0.85
    ns_base_precision: float = nested.DEFAULT_BASE_PRECISION
    workers: int = 1
    seed: int = 0
    metrics_every: int = 0             # 0: metrics at the final state only

    def __post_init__(self):
        d = self.target.box.dim
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.batch_size is None:
            self.batch_size = d
        if self.initial_count is None:
            self.initial_count = 3 * d
        if self.seqopt_restarts is None:
            self.seqopt_restarts = 5 * d
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.initial_count < 2:
            raise ValueError("initial_count must be >= 2")
        if self.budget < self.initial_count:
            raise ValueError("budget must cover the initial design")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def dim(self) -> int:
        return self.target.box.dim


@dataclass
class RunRecord:
    """Outcome of a run: per-iteration log, final state, and timings.

    ``iterations`` and ``final`` hold only deterministic JSON-ready fields;
    wall-clock timings live in ``timings`` (mirrored into the summary, which
    is not byte-compared across runs).
    """

    config: RunConfig
    iterations: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    final_surrogate: FittedSurrogate | None = None
    final_dead: nested.DeadPointSample | None = None
    chain_weights: np.ndarray | None = None
    chain_log_target: np.ndarray | None = None
    chain_locations: np.ndarray | None = None

    @property
    def n_evaluations(self) -> int:
        return self.final.get("n_evaluations", 0)


def _derived_seed(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *tags)))


def _evaluate_true(target: Target, unit_locs: np.ndarray) -> np.ndarray:
    """Evaluate the true target at unit-cube locations, with one retry."""
    user = from_unit(unit_locs, target.box)
    try:
        values = target.log_density(user)
    except ProtocolError as err:
        log.warning("target evaluation failed (%s); restarting and retrying once", err)
        restart = getattr(target, "restart", None)
        if restart is not None:
            restart()
        values = target.log_density(user)
    values = np.asarray(values, dtype=float)
    if np.any(np.isnan(values) | (values == np.inf)):
        bad = int(np.argmax(np.isnan(values) | (values == np.inf)))
        raise DriverError(f"target returned non-finite value at {user[bad].tolist()}")
    return values


def initial_design(config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Uniform seeded prior draw evaluated on the true target.

    Returns (unit locations, raw values); -inf values are retained (they are
    excluded from GP fits but consulted by the duplicate filter).
    """
    rng = _derived_seed(config.seed, 101)
    locs = rng.random((config.initial_count, config.dim))
    values = _evaluate_true(config.target, locs)
    if not np.any(values > -np.inf):
        raise DriverError("all initial design points have zero likelihood")
    return locs, values


def _dedupe(batch: np.ndarray, existing: np.ndarray) -> np.ndarray:
    """Drop batch rows within duplicate tolerance of existing rows or each other."""
    keep = []
    for row in batch:
        pool = existing if not keep else np.vstack([existing, np.array(keep)])
        if pool.size and np.min(np.sum((pool - row) ** 2, axis=1)) < DUPLICATE_TOL**2:
            continue
        keep.append(row)
    return np.array(keep) if keep else np.empty((0, batch.shape[1]))


def nora_iteration(surrogate: FittedSurrogate, params: AcquisitionParams,
                   capacity: int, settings: nested.NsSettings, workers: int,
                   existing: np.ndarray):
    """One acquisition step: nested-sample the mean, rank, return the batch.

    Returns (batch, dead-point sample, info dict). Falls back to the single
    highest-uncertainty dead point if the pool comes back empty.
    """
    dead = nested.run(surrogate.predict_mean, surrogate.dim, settings, workers=workers)
    a_uncond = acquisition_values(surrogate, dead.locations, params)
    pool = rank_sample_split(surrogate, params, dead.locations, a_uncond,
                             capacity, workers=workers)
    batch = _dedupe(pool.batch(), existing)
    info = {"pool_size": len(pool), "fallback": False}
    if batch.shape[0] == 0:
        log.warning("ranked pool empty; falling back to the highest-sigma dead point")
        sigma = surrogate.predict_std(dead.locations)
        batch = dead.locations[[int(np.argmax(sigma))]]
        batch = _dedupe(batch, existing)
        info["fallback"] = True
        if batch.shape[0] == 0:
            raise DriverError("no acquirable location found")
    return batch, dead, info


def _seqopt_single(surrogate, params, x0, bounds):
    res = minimize(
        lambda x: -acquisition_objective(surrogate, np.clip(x, 0.0, 1.0), params),
        x0,
        method="L-BFGS-B",
        bounds=bounds,
    )
    return float(res.fun), np.clip(np.asarray(res.x), 0.0, 1.0)


def seqopt_iteration(surrogate: FittedSurrogate, params: AcquisitionParams,
                     capacity: int, restarts: int, seed_rng: np.random.Generator,
                     workers: int, existing: np.ndarray) -> np.ndarray:
    """Sequential-optimization baseline: repeated conditioned maximization.

    Each repetition maximizes the acquisition with multi-start L-BFGS-B
    (uniform restarts plus one start at the best training point), then
    conditions the surrogate on the argmax. An argmax that duplicates a
    known location triggers one re-randomized attempt, after which it is
    accepted with a warning (the duplicate filter drops it later).
    """
    d = surrogate.dim
    bounds = [(0.0, 1.0)] * d
    best_idx = int(np.argmax(surrogate.training.std_values))
    best_loc = surrogate.training.locations[best_idx]
    s = surrogate
    chosen: list[np.ndarray] = []
    conditioned_values: list[float] = []
    for _ in range(capacity):
        known = np.vstack([existing] + [c[None, :] for c in chosen]) if chosen else existing
        picked = None
        for attempt in range(2):
            starts = [seed_rng.random(d) for _ in range(restarts)]
            if attempt == 0:
                starts.append(best_loc)
            results = parallel_map(
                _seqopt_single, [(s, params, x0, bounds) for x0 in starts],
                workers=workers,
            )
            neg, loc = min(results, key=lambda r: r[0])
            if known.size and np.min(np.sum((known - loc) ** 2, axis=1)) < DUPLICATE_TOL**2:
                if attempt == 0:
                    continue
                log.warning("seqopt argmax duplicates a known location; accepting")
            picked = (loc, -neg)
            break
        loc, value = picked
        chosen.append(loc)
        conditioned_values.append(value)
        s = s.condition_on(loc)
    return np.array(chosen), conditioned_values


class _TruthMetrics:
    """Cached reference sample and KL computations against the truth."""

    def __init__(self, target: Target):
        self.target = target
        self._sample = None

    @property
    def available(self) -> bool:
        ref = self.target.reference
        return ref is not None and ref.sample_factory is not None

    def reference_sample(self):
        if self._sample is None:
            self._sample = self.target.reference.make_sample(4096, seed=9)
        return self._sample

    def compute(self, surrogate, scaler, dead: nested.DeadPointSample) -> dict:
        ref = self.reference_sample()
        user_locs = from_unit(dead.locations, self.target.box)
        emu = metrics_mod.WeightedSample(
            user_locs, dead.log_weights, scaler.unstandardize(dead.log_target)
        )
        log_q_at_p = self.target.log_density(user_locs)
        ref_unit = to_unit(ref.locations, self.target.box)
        log_p_at_q = scaler.unstandardize(surrogate.predict_mean(ref_unit))
        kl = metrics_mod.kl_mc(emu, log_q_at_p, ref, log_p_at_q)
        out = {"kl_sym_mc": float(kl)}
        try:
            mean_p, cov_p = metrics_mod.moments(emu)
            tref = self.target.reference
            if tref.mean is not None and tref.cov is not None:
                mean_q, cov_q = tref.mean, tref.cov
            else:
                mean_q, cov_q = metrics_mod.moments(ref)
            out["kl_sym_gauss"] = float(
                metrics_mod.kl_gaussian(mean_p, cov_p, mean_q, cov_q)
            )
        except (ValueError, np.linalg.LinAlgError):
            out["kl_sym_gauss"] = None
        return out


def _hyperparams_dict(surrogate: FittedSurrogate) -> dict:
    hp = surrogate.hyperparams
    return {
        "output_scale": float(hp.output_scale),
        "length_scales": [float(v) for v in hp.length_scales],
        "noise": float(surrogate.noise_used),
    }


def _raw_log_evidence(scaler, dead: nested.DeadPointSample) -> float:
    """Evidence of the raw-scale surrogate over the unit cube."""
    log_shell = dead.log_weights - dead.log_target
    raw = scaler.unstandardize(dead.log_target)
    return float(logsumexp(raw + log_shell))


def run(config: RunConfig) -> RunRecord:
    """Execute the active-learning loop until the budget is spent."""
    record = RunRecord(config=config)
    target = config.target
    d = config.dim
    truth = _TruthMetrics(target)

    t0 = time.perf_counter()
    locs, values = initial_design(config)
    record.timings.append(
        {"phase": "initial", "evaluate_seconds": time.perf_counter() - t0}
    )
    n_evals = locs.shape[0]

    prev_hp = None
    iteration = 0
    while n_evals < config.budget:
        finite = values > -np.inf
        if int(finite.sum()) < 2:
            raise DriverError("fewer than two finite training values", record)
        scaler = fit_scaler(values[finite])
        ts = TrainingSet(locs[finite], values[finite],
                         scaler.standardize(values[finite]))
        t_fit = time.perf_counter()
        surrogate = fit(
            ts,
            restarts=config.gp_restarts,
            seed=int(_derived_seed(config.seed, 201, iteration).integers(2**31)),
            workers=config.workers,
            initial=prev_hp,
        )
        fit_seconds = time.perf_counter() - t_fit
        prev_hp = surrogate.hyperparams
        params = AcquisitionParams.from_training(surrogate, config.zeta)
        capacity = min(config.batch_size, config.budget - n_evals)

        t_acq = time.perf_counter()
        entry: dict = {
            "iteration": iteration,
            "n_evals_before": int(n_evals),
            "n_train": int(ts.size),
            "hyperparams": _hyperparams_dict(surrogate),
        }
        if config.strategy == "nora":
            settings = nested.scaled_settings(
                ts.size, d,
                base=nested.NsSettings(
                    n_live=max(2 * d, 2),
                    precision_criterion=config.ns_base_precision,
                    seed=int(_derived_seed(config.seed, 301, iteration).integers(2**31)),
                ),
            )
            batch, dead, info = nora_iteration(
                surrogate, params, capacity, settings, config.workers, locs
            )
            entry["ns"] = {
                "n_live": settings.n_live,
                "n_dead": int(dead.size),
                "n_target_evals": int(dead.n_target_evals),
                "log_evidence_std": float(dead.log_evidence),
            }
            entry["pool"] = info
        else:
            rng = _derived_seed(config.seed, 401, iteration)
            batch, cond_values = seqopt_iteration(
                surrogate, params, capacity, config.seqopt_restarts, rng,
                config.workers, locs,
            )
            dead = None
            entry["seqopt"] = {
                "conditioned_acquisitions": [float(v) for v in cond_values]
            }
        acquisition_seconds = time.perf_counter() - t_acq

        t_eval = time.perf_counter()
        batch_values = _evaluate_true(target, batch)
        evaluate_seconds = time.perf_counter() - t_eval
        n_evals += batch.shape[0]

        fresh = _dedupe(batch, locs)
        if fresh.shape[0] != batch.shape[0]:
            log.warning("dropping %d duplicate batch points from the training set",
                        batch.shape[0] - fresh.shape[0])
            keep = [i for i, row in enumerate(batch)
                    if any(np.array_equal(row, f) for f in fresh)]
            locs = np.vstack([locs, batch[keep]])
            values = np.concatenate([values, batch_values[keep]])
        else:
            locs = np.vstack([locs, batch])
            values = np.concatenate([values, batch_values])

        entry["batch"] = from_unit(batch, target.box).tolist()
        entry["batch_logp"] = [float(v) for v in batch_values]
        entry["n_evals_after"] = int(n_evals)
        if (config.metrics_every and truth.available
                and iteration % config.metrics_every == 0
                and config.strategy == "nora"):
            entry["metrics"] = truth.compute(surrogate, scaler, dead)
        elif config.metrics_every and truth.available and config.strategy == "seqopt":
            msettings = nested.scaled_settings(
                ts.size, d,
                base=nested.NsSettings(
                    n_live=max(2 * d, 2),
                    precision_criterion=config.ns_base_precision,
                    seed=int(_derived_seed(config.seed, 301, iteration).integers(2**31)),
                ),
            )
            mdead = nested.run(surrogate.predict_mean, d, msettings,
                               workers=config.workers)
            entry["metrics"] = truth.compute(surrogate, scaler, mdead)
        record.iterations.append(entry)
        record.timings.append({
            "iteration": iteration,
            "fit_seconds": fit_seconds,
            "acquisition_seconds": acquisition_seconds,
            "evaluate_seconds": evaluate_seconds,
        })
        iteration += 1

    # Final state: refit on everything and sample the final emulation.
    finite = values > -np.inf
    if int(finite.sum()) < 2:
        raise DriverError("fewer than two finite training values", record)
    scaler = fit_scaler(values[finite])
    ts = TrainingSet(locs[finite], values[finite], scaler.standardize(values[finite]))
    surrogate = fit(
        ts,
        restarts=config.gp_restarts,
        seed=int(_derived_seed(config.seed, 201, iteration).integers(2**31)),
        workers=config.workers,
        initial=prev_hp,
    )
    settings = nested.scaled_settings(
        ts.size, d,
        base=nested.NsSettings(
            n_live=max(2 * d, 2),
            precision_criterion=config.ns_base_precision,
            seed=int(_derived_seed(config.seed, 301, iteration).integers(2**31)),
        ),
    )
    dead = nested.run(surrogate.predict_mean, d, settings, workers=config.workers)

    record.final_surrogate = surrogate
    record.final_dead = dead
    logw = dead.log_weights
    record.chain_weights = np.exp(logw - logsumexp(logw))
    record.chain_log_target = scaler.unstandardize(dead.log_target)
    record.chain_locations = from_unit(dead.locations, target.box)

    record.final = {
        "n_evaluations": int(n_evals),
        "budget": int(config.budget),
        "n_iterations": iteration,
        "target": target.name,
        "strategy": config.strategy,
        "seed": int(config.seed),
        "workers": int(config.workers),
        "n_train_final": int(ts.size),
        "hyperparams": _hyperparams_dict(surrogate),
        "log_evidence_raw": _raw_log_evidence(scaler, dead),
        "log_evidence_error": float(dead.log_evidence_error),
    }
    if truth.available:
        record.final["metrics"] = truth.compute(surrogate, scaler, dead)
    return record
