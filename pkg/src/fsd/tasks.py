"""Zero-shot detection, open-set attribution and source clustering heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyValidation, InvariantViolation, TooFewSamples
from .kmeans import ClusterAssignment, kmeans, silhouette  # noqa: F401  (re-exported)
from .mixture import EMConfig, FeatureStats, GaussianMixture, fit_gmm

UNKNOWN = "unknown"


@dataclass
class DetectorModel:
    gmm: GaussianMixture
    threshold: float
    quantile: float = 0.05
    n_validation: int = 0

    def __post_init__(self):
        if not np.isfinite(self.threshold):
            raise InvariantViolation("detector threshold must be finite")


@dataclass
class Detection:
    label: str
    score: float


def calibrate_detector(gmm: GaussianMixture, validation_reals, quantile: float = 0.05) -> DetectorModel:
    """Set the real-image threshold at a lower quantile of validation log-likelihoods."""
    val = np.atleast_2d(np.asarray(validation_reals, dtype=np.float64))
    if val.size == 0 or val.shape[0] == 0:
        raise EmptyValidation("threshold calibration needs at least one validation image")
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must lie in [0, 1]")
    scores = gmm.score_samples(val)
    return DetectorModel(gmm, float(np.quantile(scores, quantile)), quantile, int(val.shape[0]))


def threshold_from_scores(scores, quantile: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyValidation("no validation scores")
    return float(np.quantile(scores, quantile))


def detect(model: DetectorModel, x) -> Detection:
    """Real iff the log-likelihood reaches the threshold (inclusive)."""
    score = model.gmm.log_likelihood(np.asarray(x, dtype=np.float64))
    return Detection("real" if score >= model.threshold else "synthetic", score)


def detect_scores(model: DetectorModel, features) -> np.ndarray:
    return model.gmm.score_samples(features)


@dataclass
class AttributorModel:
    """Per-source mixtures in label order, plus the rejection threshold."""

    sources: Dict[str, GaussianMixture]
    threshold: float = -np.inf

    def __post_init__(self):
        if not self.sources:
            raise InvariantViolation("an attributor needs at least one known source")
        dims = {g.dim for g in self.sources.values()}
        if len(dims) != 1:
            raise InvariantViolation("all source models must share one feature dimension")
        if any(not label or label == UNKNOWN for label in self.sources):
            raise InvariantViolation(f"source labels must be non-empty and not {UNKNOWN!r}")

    @property
    def labels(self) -> list:
        return list(self.sources)

    @property
    def dim(self) -> int:
        return next(iter(self.sources.values())).dim

    def score_matrix(self, features) -> np.ndarray:
        """(N, S) log-likelihoods, columns in label order."""
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"expected {self.dim} features, got {x.shape[1]}")
        return np.column_stack([g.score_samples(x) for g in self.sources.values()])


@dataclass
class Attribution:
    source: str
    scores: list
    max_ll: float
    candidate: str = ""


def _argmax_label(labels: Sequence[str], scores: np.ndarray) -> int:
    best = np.max(scores)
    tied = [i for i, s in enumerate(scores) if s == best]
    return min(tied, key=lambda i: labels[i])


def attribute(model: AttributorModel, x) -> Attribution:
    """Most likely known source, or ``unknown`` when its likelihood is below threshold."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("attribute takes a single feature vector")
    scores = model.score_matrix(x[None])[0]
    labels = model.labels
    i = _argmax_label(labels, scores)
    source = UNKNOWN if scores[i] < model.threshold else labels[i]
    return Attribution(source, scores.tolist(), float(scores[i]), labels[i])


def attribute_batch(model: AttributorModel, features) -> list:
    scores = model.score_matrix(features)
    labels = model.labels
    out = []
    for row in scores:
        i = _argmax_label(labels, row)
        source = UNKNOWN if row[i] < model.threshold else labels[i]
        out.append(Attribution(source, row.tolist(), float(row[i]), labels[i]))
    return out


def fit_attributor(
    per_source: Mapping[str, np.ndarray],
    n_components: int = 1,
    quantile: float = 0.05,
    validation: Mapping[str, np.ndarray] | None = None,
    em: EMConfig = EMConfig(),
) -> AttributorModel:
    """One GMM per known source over features standardized with pooled statistics.

    The rejection threshold is the minimum over sources of each source's own
    ``quantile`` of validation log-likelihoods (training features are used
    when no validation set is given).
    """
    if not per_source:
        raise TooFewSamples("no known sources")
    labels = sorted(per_source)
    pooled = FeatureStats.fit(np.vstack([np.asarray(per_source[s], dtype=np.float64) for s in labels]))
    sources = {s: fit_gmm(per_source[s], n_components, em, stats=pooled).model for s in labels}
    val = validation if validation is not None else per_source
    thresholds = [threshold_from_scores(sources[s].score_samples(val[s]), quantile) for s in labels]
    return AttributorModel(sources, float(min(thresholds)))
