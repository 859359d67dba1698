"""Symmetric Kullback-Leibler divergence estimators and weighted moments.

Two estimators of the symmetric (Jeffreys) divergence: a weighted
Monte Carlo form over samples with known (possibly unnormalized)
log-densities, and a closed-form Gaussian approximation from means and
covariances. Densities only ever enter through differences plus a
log-mean-exp normalization estimate, so constant offsets cancel exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

log = logging.getLogger(__name__)

__all__ = [
    "WeightedSample",
    "kl_mc",
    "kl_gaussian",
    "kl_mc_from_sample",
    "moments",
    "effective_sample_size",
]


@dataclass(frozen=True)
class WeightedSample:
    """Locations with log-weights and the owning density's log-values."""

    locations: np.ndarray
    log_weights: np.ndarray
    log_p: np.ndarray

    def __post_init__(self):
        locs = np.atleast_2d(np.asarray(self.locations, dtype=float))
        logw = np.asarray(self.log_weights, dtype=float)
        logp = np.asarray(self.log_p, dtype=float)
        if locs.shape[0] != logw.size or logw.size != logp.size:
            raise ValueError("locations, weights and densities disagree in length")
        if not np.any(logw > -np.inf):
            raise ValueError("sample has no finite weight")
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "log_weights", logw)
        object.__setattr__(self, "log_p", logp)

    @property
    def size(self) -> int:
        return self.log_weights.size

    def normalized_weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - np.max(self.log_weights[np.isfinite(self.log_weights)]))
        w[~np.isfinite(w)] = 0.0
        return w / w.sum()


def effective_sample_size(log_weights) -> float:
    logw = np.asarray(log_weights, dtype=float)
    finite = logw > -np.inf
    if not np.any(finite):
        return 0.0
    return float(np.exp(2.0 * logsumexp(logw[finite]) - logsumexp(2.0 * logw[finite])))


def _directed_kl(sample: WeightedSample, log_q: np.ndarray) -> float:
    """D(P || Q) from a weighted P-sample with q known up to a constant.

    The unknown normalization ratio is estimated on the same sample as the
    log-mean-exp of the density ratios, which also makes the estimate exact
    for P == Q and non-negative up to round-off (Jensen).
    """
    log_q = np.asarray(log_q, dtype=float)
    w = sample.normalized_weights()
    live = w > 0
    if np.any(log_q[live] == -np.inf):
        offenders = np.nonzero(live & (log_q == -np.inf))[0]
        log.warning(
            "kl_mc: q vanishes at %d sample points with nonzero weight "
            "(first indices %s); divergence is +inf",
            offenders.size, offenders[:5].tolist(),
        )
        return np.inf
    diff = sample.log_p[live] - log_q[live]
    mean_diff = float(np.dot(w[live], diff))
    log_ratio = float(logsumexp(-diff, b=w[live]))
    return mean_diff + log_ratio


def kl_mc(p_sample: WeightedSample, log_q_at_p, q_sample: WeightedSample,
          log_p_at_q) -> float:
    """Symmetric KL divergence from two weighted samples.

    Parameters
    ----------
    p_sample, q_sample : WeightedSample
        Monte Carlo samples of the two distributions, carrying each
        distribution's own log-density at its sample points (any constant
        offset is allowed).
    log_q_at_p, log_p_at_q : arrays
        The other distribution's log-density evaluated at the respective
        sample's locations.

    Returns
    -------
    float
        0.5 * (D(P||Q) + D(Q||P)); +inf if either density vanishes on a
        point of nonzero weight of the other sample.
    """
    d_pq = _directed_kl(p_sample, log_q_at_p)
    d_qp = _directed_kl(q_sample, log_p_at_q)
    return 0.5 * (d_pq + d_qp)


def kl_mc_from_sample(p_sample: WeightedSample, log_q_at_p) -> float:
    """Symmetric KL estimated from the P sample alone.

    The reverse direction D(Q||P) is computed by self-normalized importance
    reweighting of the P sample with weights proportional to q/p. Accurate
    when P and Q overlap well; used where only one sample is available
    (e.g. comparing a stored chain against an analytic density).
    """
    log_q_at_p = np.asarray(log_q_at_p, dtype=float)
    d_pq = _directed_kl(p_sample, log_q_at_p)
    w = p_sample.normalized_weights()
    live = w > 0
    log_wq = np.full(w.size, -np.inf)
    log_wq[live] = np.log(w[live]) + log_q_at_p[live] - p_sample.log_p[live]
    q_like = WeightedSample(p_sample.locations, log_wq, log_q_at_p)
    d_qp = _directed_kl(q_like, p_sample.log_p)
    return 0.5 * (d_pq + d_qp)


def _directed_kl_gaussian(mean_p, cov_p, mean_q, cov_q) -> float:
    d = mean_p.size
    try:
        chol_q = np.linalg.cholesky(cov_q)
        chol_p = np.linalg.cholesky(cov_p)
    except np.linalg.LinAlgError as err:
        raise ValueError("covariance matrices must be positive definite") from err
    solved = sla.cho_solve((chol_q, True), cov_p)
    trace = float(np.trace(solved))
    delta = mean_q - mean_p
    maha = float(delta @ sla.cho_solve((chol_q, True), delta))
    logdet = 2.0 * float(
        np.sum(np.log(np.diag(chol_q))) - np.sum(np.log(np.diag(chol_p)))
    )
    return 0.5 * (trace - d + maha + logdet)


def kl_gaussian(mean_p, cov_p, mean_q, cov_q) -> float:
    """Symmetric KL divergence of two Gaussian approximations."""
    mean_p = np.atleast_1d(np.asarray(mean_p, dtype=float))
    mean_q = np.atleast_1d(np.asarray(mean_q, dtype=float))
    cov_p = np.atleast_2d(np.asarray(cov_p, dtype=float))
    cov_q = np.atleast_2d(np.asarray(cov_q, dtype=float))
    if mean_p.shape != mean_q.shape or cov_p.shape != cov_q.shape:
        raise ValueError("moment shapes disagree")
    d_pq = _directed_kl_gaussian(mean_p, cov_p, mean_q, cov_q)
    d_qp = _directed_kl_gaussian(mean_q, cov_q, mean_p, cov_p)
    return 0.5 * (d_pq + d_qp)


def moments(sample: WeightedSample):
    """Weighted mean and covariance of a sample.

    Raises if the effective sample size is below 2 (no meaningful spread).
    """
    ess = effective_sample_size(sample.log_weights)
    if ess < 2.0:
        raise ValueError(f"effective sample size {ess:.3g} < 2")
    w = sample.normalized_weights()
    mean = w @ sample.locations
    centered = sample.locations - mean
    cov = (w[:, None] * centered).T @ centered
    return mean, cov
