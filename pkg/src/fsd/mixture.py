"""Diagonal-covariance Gaussian mixtures fitted by EM on standardized features."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateComponent, DimensionMismatch, InvariantViolation, TooFewSamples
from .kmeans import kmeans_plusplus, sq_distances

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
VAR_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureStats":
        x = np.asarray(features, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean


@dataclass
class GaussianMixture:
    """Mixture in standardized coordinates; ``log_likelihood`` reports raw-space densities."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    stats: FeatureStats
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.validate()

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self) -> None:
        c = self.weights.shape[0]
        if self.means.ndim != 2 or self.means.shape[0] != c or self.variances.shape != self.means.shape:
            raise InvariantViolation("weights, means and variances disagree in shape")
        if self.stats.mean.shape != (self.means.shape[1],) or self.stats.std.shape != (self.means.shape[1],):
            raise InvariantViolation("feature statistics dimension does not match the mixture")
        arrays = (self.weights, self.means, self.variances, self.stats.mean, self.stats.std)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise InvariantViolation("mixture parameters must be finite")
        if np.any(self.weights < 0) or abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise InvariantViolation("mixture weights must lie on the simplex (sum to 1)")
        if np.any(self.variances < self.var_floor * (1 - 1e-12)):
            raise InvariantViolation(f"variances must be >= the floor {self.var_floor}")
        if np.any(self.stats.std < STD_FLOOR * (1 - 1e-12)):
            raise InvariantViolation(f"feature std must be >= {STD_FLOOR}")

    def component_log_prob(self, z: np.ndarray) -> np.ndarray:
        """(N, C) log of ``pi_l * N(z; mu_l, diag(var_l))`` for standardized rows ``z``."""
        z = np.atleast_2d(z)
        quad = np.empty((z.shape[0], self.n_components))
        for j in range(self.n_components):
            diff = z - self.means[j]
            quad[:, j] = np.sum(diff * diff / self.variances[j], axis=1)
        log_det = np.sum(np.log(self.variances), axis=1)
        return np.log(self.weights) - 0.5 * (self.dim * LOG_2PI + log_det + quad)

    def score_standardized(self, z: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return logsumexp(self.component_log_prob(z), axis=1)

    def score_samples(self, x: np.ndarray) -> np.ndarray:
        """Raw-space log densities for the rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"expected {self.dim} features, got {x.shape[1]}")
        jacobian = float(np.sum(np.log(self.stats.std)))
        return self.score_standardized(self.stats.transform(x)) - jacobian

    def log_likelihood(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise DimensionMismatch("log_likelihood scores a single vector; use score_samples for batches")
        return float(self.score_samples(x[None])[0])

    def raw_means(self) -> np.ndarray:
        return self.stats.inverse(self.means)

    def raw_variances(self) -> np.ndarray:
        return self.variances * self.stats.std**2


@dataclass
class EMConfig:
    max_iter: int = 200
    tol: float = 1e-6
    var_floor: float = VAR_FLOOR
    seed: int = 0


@dataclass
class EMResult:
    model: GaussianMixture
    ll_trace: list = field(default_factory=list)
    converged: bool = False
    reseeds: int = 0


def _m_step(z, resp, var_floor):
    nk = resp.sum(axis=0)
    means = (resp.T @ z) / nk[:, None]
    var = np.empty_like(means)
    for j in range(means.shape[0]):
        diff = z - means[j]
        var[j] = (resp[:, j] @ (diff * diff)) / nk[j]
    return nk / nk.sum(), means, np.maximum(var, var_floor)


def fit_gmm(features, n_components: int = 8, cfg: EMConfig = EMConfig(), stats: FeatureStats | None = None) -> EMResult:
    """Fit a diagonal GMM with EM.

    Features are standardized (with ``stats`` if given, else their own), means
    are seeded by k-means++ and one Lloyd pass, and EM runs until the relative
    change in mean log-likelihood falls below ``cfg.tol``.  ``ll_trace`` holds
    the mean standardized-space log-likelihood at each E-step.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise TooFewSamples("features must be a non-empty N x D matrix")
    n, _ = x.shape
    c = n_components
    if c < 1 or n < c:
        raise TooFewSamples(f"need at least {c} samples for {c} components, got {n}")
    stats = stats or FeatureStats.fit(x)
    z = stats.transform(x)
    rng = np.random.default_rng(cfg.seed)

    centers = kmeans_plusplus(z, c, rng)
    labels = np.argmin(sq_distances(z, centers), axis=1)
    resp = np.zeros((n, c))
    resp[np.arange(n), labels] = 1.0
    # empty k-means cells get a uniform sliver so the first M-step is defined
    resp[:, resp.sum(axis=0) == 0] = 1.0 / n
    resp /= resp.sum(axis=1, keepdims=True)
    weights, means, var = _m_step(z, resp, cfg.var_floor)

    tiny = 10.0 * np.finfo(float).eps * n
    model = GaussianMixture(weights, means, var, stats, cfg.var_floor)
    result = EMResult(model)
    prev = None
    for _ in range(cfg.max_iter):
        logp = model.component_log_prob(z)
        lse = logsumexp(logp, axis=1)
        ll = float(lse.mean())
        result.ll_trace.append(ll)
        if prev is not None and abs(ll - prev) <= cfg.tol * max(abs(prev), 1e-300):
            result.converged = True
            break
        prev = ll
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        for j in np.flatnonzero(nk < tiny):
            result.reseeds += 1
            if result.reseeds >= c:
                raise DegenerateComponent(f"components collapsed {result.reseeds} times")
            worst = int(np.argmin(lse))
            log.warning("re-seeding collapsed component %d at sample %d", j, worst)
            resp[worst] = 0.0
            resp[worst, j] = 1.0
            lse[worst] = np.inf
            nk = resp.sum(axis=0)
        weights, means, var = _m_step(z, resp, cfg.var_floor)
        model = GaussianMixture(weights, means, var, stats, cfg.var_floor)
    result.model = model
    return result
