"""Constrained linear predictive filters and the residuals they leave behind.

A filter predicts every pixel from its M x M neighborhood with the center tap
fixed at 0 and the remaining taps summing to 1.  A bank of K such filters is
learned from real images by minimizing residual energy plus a spectral
diversity penalty, ``-sum(log(sigma_i + alpha))`` on the stacked filter matrix.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyBatch, EmptyCorpus, InvariantViolation, NonFiniteLoss, TooSmall
from .optim import Adam

log = logging.getLogger(__name__)

SUM_TOL = 1e-9


@dataclass(frozen=True)
class FilterBank:
    """K predictive filters stored as a (K, M, M) array."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        validate_weights(w)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def m(self) -> int:
        return self.weights.shape[1]

    def matrix(self) -> np.ndarray:
        """The K x M^2 matrix of vectorized filters."""
        return self.weights.reshape(self.k, -1)

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.matrix(), compute_uv=False)

    def identity(self) -> str:
        """Content hash identifying this bank."""
        h = hashlib.sha256()
        h.update(f"fsd-bank:{self.k}:{self.m}:".encode())
        h.update(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
        return h.hexdigest()


def validate_weights(w: np.ndarray) -> None:
    """Raise :class:`InvariantViolation` unless ``w`` (K, M, M) is a valid bank."""
    if w.ndim != 3 or w.shape[1] != w.shape[2] or w.shape[1] % 2 == 0 or w.shape[0] < 1:
        raise InvariantViolation(f"filters must be (K, M, M) with M odd, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvariantViolation("filter weights must be finite")
    c = w.shape[1] // 2
    if np.any(w[:, c, c] != 0.0):
        raise InvariantViolation("center weight must be exactly 0")
    sums = w.reshape(w.shape[0], -1).sum(axis=1)
    bad = np.abs(sums - 1.0) > SUM_TOL
    if np.any(bad):
        raise InvariantViolation(
            f"non-center weights must sum to 1 (filter {int(np.argmax(bad))} sums to {sums[bad][0]!r})"
        )


def project_constraints(weights: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {center = 0, sum of taps = 1}.

    Accepts a single (M, M) grid or a stack (K, M, M).
    """
    w = np.array(weights, dtype=np.float64)
    single = w.ndim == 2
    if single:
        w = w[None]
    k, m, _ = w.shape
    if m % 2 == 0 or w.shape[2] != m:
        raise ValueError(f"filters must be square with odd side, got {w.shape[1:]}")
    c = m // 2
    w[:, c, c] = 0.0
    s = w.reshape(k, -1).sum(axis=1)
    w += ((1.0 - s) / (m * m - 1))[:, None, None]
    w[:, c, c] = 0.0
    return w[0] if single else w


def _offsets(m: int):
    c = m // 2
    for i in range(m):
        for j in range(m):
            if i != c or j != c:
                yield i, j


def _check_size(img: np.ndarray, m: int) -> None:
    if img.ndim != 2 or img.shape[0] < m or img.shape[1] < m:
        raise TooSmall(f"image of shape {img.shape} has no valid {m}x{m} window")


def _predict(weights: np.ndarray, img: np.ndarray) -> np.ndarray:
    k, m, _ = weights.shape
    _check_size(img, m)
    h, w = img.shape[0] - m + 1, img.shape[1] - m + 1
    pred = np.zeros((k, h, w))
    for i, j in _offsets(m):
        pred += weights[:, i, j, None, None] * img[i:i + h, j:j + w]
    return pred


def predict_scene(bank: FilterBank, img: np.ndarray) -> np.ndarray:
    """Scene-content predictions, shape (K, H-M+1, W-M+1), valid region only."""
    return _predict(bank.weights, np.asarray(img, dtype=np.float64))


def extract_residuals(bank: FilterBank, img: np.ndarray) -> np.ndarray:
    """Residual fields ``I - S_hat_k`` over the valid region, shape (K, H-M+1, W-M+1)."""
    img = np.asarray(img, dtype=np.float64)
    c = bank.m // 2
    pred = _predict(bank.weights, img)
    h, w = pred.shape[1:]
    return img[c:c + h, c:c + w][None] - pred


def energy_loss(weights: np.ndarray, batch: Sequence[np.ndarray]):
    """Mean squared residual over all filters, images and valid locations.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``weights`` and its
    center entries zeroed.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(batch) == 0:
        raise EmptyBatch("energy loss needs at least one image")
    k, m, _ = weights.shape
    c = m // 2
    total = 0.0
    count = 0
    grad = np.zeros_like(weights)
    for img in batch:
        img = np.asarray(img, dtype=np.float64)
        pred = _predict(weights, img)
        h, w = pred.shape[1:]
        res = img[c:c + h, c:c + w][None] - pred
        total += float(np.sum(res * res))
        count += h * w
        for i, j in _offsets(m):
            grad[:, i, j] -= np.tensordot(res, img[i:i + h, j:j + w], axes=([1, 2], [0, 1]))
    norm = count * k
    grad *= 2.0 / norm
    grad[:, c, c] = 0.0
    return total / norm, grad


def diversity_loss(weights: np.ndarray, alpha: float = 1e-6):
    """Spectral diversity penalty ``-sum(log(sigma_i + alpha))`` and its gradient."""
    weights = np.asarray(weights, dtype=np.float64)
    k, m, _ = weights.shape
    mat = weights.reshape(k, -1)
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    loss = -float(np.sum(np.log(s + alpha)))
    grad = -(u * (1.0 / (s + alpha))) @ vt
    grad = grad.reshape(weights.shape)
    grad[:, m // 2, m // 2] = 0.0
    return loss, grad


@dataclass
class TrainConfig:
    """Filter-bank training hyperparameters."""

    k: int = 8
    m: int = 11
    lam: float = 1.0
    alpha: float = 1e-6
    lr: float = 1e-3
    epochs: int = 10
    crop: int = 128
    crops_per_image: int = 1
    batch_size: int = 8
    weight_decay: float = 0.0
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.alpha <= 0 or self.lr <= 0:
            raise ValueError("alpha and learning rate must be > 0")
        if self.m % 2 == 0 or self.m < 3:
            raise ValueError("filter size must be odd and >= 3")
        if self.k < 1 or self.batch_size < 1 or self.crops_per_image < 1:
            raise ValueError("k, batch size and crops per image must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    bank: FilterBank
    energy: list = field(default_factory=list)
    diversity: list = field(default_factory=list)
    sigma_min: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.energy)


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    ch, cw = min(size, h), min(size, w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return img[top:top + ch, left:left + cw]


def init_weights(k: int, m: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / (m * m)
    return project_constraints(rng.uniform(-bound, bound, size=(k, m, m)))


def train_filter_bank(corpus: Sequence[np.ndarray], cfg: TrainConfig, callback=None) -> TrainResult:
    """Learn a constrained predictive filter bank from real images.

    Each epoch visits the corpus in a seeded random order, drawing
    ``cfg.crops_per_image`` random crops per image; crops are grouped into
    batches of ``cfg.batch_size`` and each batch is one Adam step on
    ``energy + lam * diversity`` followed by projection onto the constraint set.

    ``callback(step, weights)`` is called after each projected step.
    """
    if len(corpus) == 0:
        raise EmptyCorpus("training corpus is empty")
    for img in corpus:
        _check_size(np.asarray(img), cfg.m)
    rng = np.random.default_rng(cfg.seed)
    w = init_weights(cfg.k, cfg.m, rng)
    opt = Adam(w.shape, lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(bank=FilterBank(w))
    step = 0
    for epoch in range(cfg.epochs):
        crops = []
        for idx in rng.permutation(len(corpus)):
            img = np.asarray(corpus[idx], dtype=np.float64)
            crops.extend(random_crop(img, cfg.crop, rng) for _ in range(cfg.crops_per_image))
        for start in range(0, len(crops), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = crops[start:start + cfg.batch_size]
            le, ge = energy_loss(w, batch)
            ld, gd = diversity_loss(w, cfg.alpha)
            if not (np.isfinite(le) and np.isfinite(ld)):
                raise NonFiniteLoss(f"non-finite loss at step {step} (energy={le}, diversity={ld})")
            w = project_constraints(opt.step(w, ge + cfg.lam * gd))
            if not np.all(np.isfinite(w)):
                raise NonFiniteLoss(f"non-finite weights after step {step}")
            result.energy.append(le)
            result.diversity.append(ld)
            result.sigma_min.append(float(np.linalg.svd(w.reshape(cfg.k, -1), compute_uv=False)[-1]))
            step += 1
            if callback is not None:
                callback(step, w)
        log.debug("epoch %d: energy=%.6g diversity=%.6g", epoch, result.energy[-1], result.diversity[-1])
    result.bank = FilterBank(w)
    return result


# SQUARE 5x5 residual kernel of the steganalysis rich models, center -12.
_SQUARE5 = np.array(
    [
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, 0, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ],
    dtype=np.float64,
)


def fixed_highpass_bank(kind: str) -> FilterBank:
    """Single-filter bank holding a classic steganalysis predictor ('hp3x3' or 'hp5x5')."""
    if kind == "hp3x3":
        w = np.full((3, 3), 0.125)
        w[1, 1] = 0.0
    elif kind == "hp5x5":
        w = _SQUARE5 / 12.0
    else:
        raise ValueError(f"unknown high-pass kind {kind!r}")
    return FilterBank(w[None])
