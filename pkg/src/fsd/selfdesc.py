"""Per-image forensic self-descriptions.

The K residual fields of an image are taken to L dyadic scales.  At each
scale every residual is predicted from its own B x B neighborhood (center
excluded) by a filter phi_k shared across scales; the K prediction errors are
summed into one coupled error field per scale, and the mean squared coupled
error over all scales is minimized jointly in all phi_k.  The fitted filters,
flattened, are the image's feature vector.

The objective is quadratic in the coefficients, so the fit works on the
normal-equation statistics ``G = X^T X``, ``b = X^T y`` accumulated once per
image; :func:`model_error` evaluates the same objective directly on the
fields and is what the tests compare against.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from . import imaging
from .errors import NonFiniteLoss, ShapeMismatch, TooSmall
from .filterbank import FilterBank, extract_residuals
from .optim import Adam


class NonFiniteObjective(NonFiniteLoss):
    pass


Pyramid = List[np.ndarray]  # one (K, h_l, w_l) array per scale


def build_pyramid(stack: np.ndarray, scales: int, b: int = 1) -> Pyramid:
    """Residual fields at ``scales`` dyadic scales; scale l is downsampled by 2**(l-1).

    Raises :class:`TooSmall` if the coarsest scale has no valid ``b x b`` window.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    if scales < 1:
        raise ValueError("need at least one scale")
    pyramid = [stack]
    for _ in range(scales - 1):
        prev = pyramid[-1]
        if min(prev.shape[1:]) < 2:
            raise TooSmall(f"cannot halve residual fields of shape {prev.shape[1:]}")
        pyramid.append(imaging.halve(prev))
    coarse = pyramid[-1].shape[1:]
    if min(coarse) < b:
        raise TooSmall(f"coarsest scale {coarse[0]}x{coarse[1]} is smaller than the {b}x{b} neighborhood")
    return pyramid


def n_coefficients(k: int, b: int) -> int:
    return k * (b * b - 1)


def _center_mask(b: int) -> np.ndarray:
    mask = np.ones(b * b, dtype=bool)
    mask[(b * b) // 2] = False
    return mask


@dataclass
class SelfDescription:
    """Fitted per-residual filters, shape (K, B, B), centers zero."""

    coeffs: np.ndarray
    scales: int = 1
    bank_id: str = ""
    objective: float = float("nan")
    iterations: int = 0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 3 or self.coeffs.shape[1] != self.coeffs.shape[2] or self.coeffs.shape[1] % 2 == 0:
            raise ShapeMismatch(f"coefficients must be (K, B, B) with B odd, got {self.coeffs.shape}")

    @property
    def k(self) -> int:
        return self.coeffs.shape[0]

    @property
    def b(self) -> int:
        return self.coeffs.shape[1]

    @property
    def dim(self) -> int:
        return n_coefficients(self.k, self.b)

    def vector(self) -> np.ndarray:
        """Filter-major, row-major feature vector without the center taps."""
        return self.coeffs.reshape(self.k, -1)[:, _center_mask(self.b)].ravel()

    @classmethod
    def from_vector(cls, vec: np.ndarray, k: int, b: int, **meta) -> "SelfDescription":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (n_coefficients(k, b),):
            raise ShapeMismatch(f"expected a vector of length {n_coefficients(k, b)}, got {vec.shape}")
        flat = np.zeros((k, b * b))
        flat[:, _center_mask(b)] = vec.reshape(k, -1)
        return cls(flat.reshape(k, b, b), **meta)


def _check_pyramid(pyramid: Pyramid, b: int) -> int:
    if not pyramid:
        raise ShapeMismatch("empty pyramid")
    k = pyramid[0].shape[0]
    for level in pyramid:
        if level.ndim != 3 or level.shape[0] != k:
            raise ShapeMismatch("all scales must hold the same number of residual fields")
        if min(level.shape[1:]) < b:
            raise TooSmall(f"scale of shape {level.shape[1:]} has no valid {b}x{b} window")
    return k


def _prediction(level: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    k, b, _ = coeffs.shape
    h, w = level.shape[1] - b + 1, level.shape[2] - b + 1
    pred = np.zeros((k, h, w))
    c = b // 2
    for i in range(b):
        for j in range(b):
            if i == c and j == c:
                continue
            pred += coeffs[:, i, j, None, None] * level[:, i:i + h, j:j + w]
    return pred


def coupled_error(level: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Sum over filters of ``r_k - r_hat_k`` on one scale's valid region."""
    b = coeffs.shape[1]
    c = b // 2
    pred = _prediction(level, coeffs)
    h, w = pred.shape[1:]
    return np.sum(level[:, c:c + h, c:c + w] - pred, axis=0)


def model_error(pyramid: Pyramid, desc) -> float:
    """Mean squared coupled error over all scales and valid locations."""
    return model_error_and_grad(pyramid, desc, with_grad=False)[0]


def model_error_and_grad(pyramid: Pyramid, desc, with_grad: bool = True):
    coeffs = desc.coeffs if isinstance(desc, SelfDescription) else np.asarray(desc, dtype=np.float64)
    k, b, _ = coeffs.shape
    if _check_pyramid(pyramid, b) != k:
        raise ShapeMismatch(f"pyramid has {pyramid[0].shape[0]} fields, description has {k} filters")
    total = 0.0
    count = 0
    grad = np.zeros_like(coeffs) if with_grad else None
    for level in pyramid:
        eps = coupled_error(level, coeffs)
        h, w = eps.shape
        total += float(np.sum(eps * eps))
        count += h * w
        if with_grad:
            for i in range(b):
                for j in range(b):
                    grad[:, i, j] -= np.tensordot(level[:, i:i + h, j:j + w], eps, axes=([1, 2], [0, 1]))
    if with_grad:
        grad *= 2.0 / count
        grad[:, b // 2, b // 2] = 0.0
    return total / count, grad


@dataclass
class NormalEquations:
    """Sufficient statistics of the quadratic objective: ``(c - 2 b.x + x.G.x) / n``."""

    gram: np.ndarray
    rhs: np.ndarray
    target_energy: float
    count: int

    def objective(self, x: np.ndarray) -> float:
        return (self.target_energy - 2.0 * float(self.rhs @ x) + float(x @ self.gram @ x)) / self.count

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (self.gram @ x - self.rhs) / self.count


def normal_equations(pyramid: Pyramid, b: int, chunk_elems: int = 1 << 22) -> NormalEquations:
    """Accumulate ``X^T X`` and ``X^T y`` for the coupled least-squares problem.

    Each row of X is one (scale, location); columns are the K*(B^2-1)
    neighborhood values, target y is the sum of the K residuals at that spot.
    Rows are processed in chunks so memory stays bounded for large images.
    """
    k = _check_pyramid(pyramid, b)
    d = n_coefficients(k, b)
    mask = np.tile(_center_mask(b), k)
    c = b // 2
    gram = np.zeros((d, d))
    rhs = np.zeros(d)
    energy = 0.0
    count = 0
    for level in pyramid:
        windows = sliding_window_view(level, (b, b), axis=(1, 2))  # (K, h, w, B, B)
        h, w = windows.shape[1:3]
        target = np.sum(level[:, c:c + h, c:c + w], axis=0)
        rows = max(1, chunk_elems // max(1, w * k * b * b))
        for r0 in range(0, h, rows):
            r1 = min(h, r0 + rows)
            x = windows[:, r0:r1].transpose(1, 2, 0, 3, 4).reshape((r1 - r0) * w, k * b * b)[:, mask]
            y = target[r0:r1].ravel()
            gram += x.T @ x
            rhs += x.T @ y
            energy += float(y @ y)
        count += h * w
    return NormalEquations(gram, rhs, energy, count)


@dataclass
class FitConfig:
    """Iterative fit settings: Adam with halve-on-plateau learning rate."""

    lr: float = 0.1
    patience: int = 20
    factor: float = 0.5
    rel_improvement: float = 1e-5
    max_iters: int = 10000
    min_lr: float = 1e-4
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitTrace:
    objective: list = field(default_factory=list)
    best: list = field(default_factory=list)
    lr: list = field(default_factory=list)


def fit_normal_equations(neq: NormalEquations, cfg: FitConfig = FitConfig(), trace: FitTrace | None = None):
    """Minimize the quadratic from zero with Adam; return ``(x, iterations)``."""
    d = neq.rhs.shape[0]
    x = np.zeros(d)
    opt = Adam(d, lr=cfg.lr)
    best = np.inf
    best_x = x
    stalled = 0
    it = 0
    while it < cfg.max_iters and opt.lr >= cfg.min_lr:
        obj = neq.objective(x)
        grad = neq.gradient(x)
        if not (np.isfinite(obj) and np.all(np.isfinite(grad))):
            raise NonFiniteObjective(f"non-finite objective at iteration {it}")
        if obj < best * (1.0 - cfg.rel_improvement) or not np.isfinite(best):
            best, best_x, stalled = obj, x, 0
        else:
            stalled += 1
            if obj < best:
                best, best_x = obj, x
        if trace is not None:
            trace.objective.append(obj)
            trace.best.append(best)
            trace.lr.append(opt.lr)
        if not np.any(grad):
            break
        if stalled >= cfg.patience:
            opt.lr *= cfg.factor
            stalled = 0
        x = opt.step(x, grad)
        it += 1
    return best_x, it


def fit_self_description(
    pyramid: Pyramid, b: int, cfg: FitConfig = FitConfig(), bank_id: str = "", trace: FitTrace | None = None
) -> SelfDescription:
    """Iteratively fit the description of one residual pyramid, starting from zero."""
    k = _check_pyramid(pyramid, b)
    neq = normal_equations(pyramid, b)
    x, iters = fit_normal_equations(neq, cfg, trace)
    desc = SelfDescription.from_vector(x, k, b, scales=len(pyramid), bank_id=bank_id, iterations=iters)
    desc.objective = model_error(pyramid, desc)
    if not np.isfinite(desc.objective):
        raise NonFiniteObjective("final objective is not finite")
    return desc


def fit_self_description_exact(pyramid: Pyramid, b: int, ridge: float = 1e-8, bank_id: str = "") -> SelfDescription:
    """Closed-form minimizer from the ridge-regularized normal equations.

    ``ridge`` is added to the diagonal of the per-location-normalized Gram
    matrix so rank-deficient pyramids (e.g. constant residuals) still solve.
    """
    k = _check_pyramid(pyramid, b)
    neq = normal_equations(pyramid, b)
    a = neq.gram / neq.count + ridge * np.eye(neq.gram.shape[0])
    try:
        x = linalg.solve(a, neq.rhs / neq.count, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        x = linalg.lstsq(a, neq.rhs / neq.count)[0]
    desc = SelfDescription.from_vector(x, k, b, scales=len(pyramid), bank_id=bank_id)
    desc.objective = model_error(pyramid, desc)
    return desc


def describe_image(
    img: np.ndarray,
    bank: FilterBank,
    b: int = 11,
    scales: int = 3,
    cfg: FitConfig = FitConfig(),
    exact: bool = False,
) -> SelfDescription:
    """Residuals, pyramid and fit in one call."""
    pyramid = build_pyramid(extract_residuals(bank, img), scales, b)
    if exact:
        return fit_self_description_exact(pyramid, b, bank_id=bank.identity())
    return fit_self_description(pyramid, b, cfg, bank_id=bank.identity())
