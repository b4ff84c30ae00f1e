"""Detection, open-set and clustering metrics."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyClass, LengthMismatch


def _nonempty(*arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64).ravel()
        if a.size == 0:
            raise EmptyClass("metric needs at least one sample in every class")
        out.append(a)
    return out


def auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg), by sorting."""
    pos, neg = _nonempty(pos_scores, neg_scores)
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    at_or_below = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (at_or_below - below).sum()
    return float(wins / (pos.size * neg.size))


def _thresholds(*arrays) -> np.ndarray:
    vals = np.unique(np.concatenate(arrays))
    return np.concatenate([[-np.inf], vals, [np.inf]])


def au_crr(known_max_lls, unknown_max_lls) -> float:
    """Area under correct-rejection rate (unknowns rejected) vs known-acceptance rate.

    Knowns are accepted when ``score >= tau``; equals ``auc(known, unknown)``.
    """
    known, unknown = _nonempty(known_max_lls, unknown_max_lls)
    taus = _thresholds(known, unknown)
    ks, us = np.sort(known), np.sort(unknown)
    accepted = 1.0 - np.searchsorted(ks, taus, side="left") / ks.size
    rejected = np.searchsorted(us, taus, side="left") / us.size
    # taus ascend, so x runs from 1 down to 0
    return float(-np.trapezoid(rejected, accepted))


def au_oscr(known_max_lls, known_pred, known_truth, unknown_max_lls) -> float:
    """Area under the open-set classification rate curve (CCR against FPR)."""
    known, unknown = _nonempty(known_max_lls, unknown_max_lls)
    pred, truth = np.asarray(known_pred), np.asarray(known_truth)
    if pred.shape[0] != known.size or truth.shape[0] != known.size:
        raise LengthMismatch("known scores, predictions and labels must align")
    correct = pred == truth
    taus = _thresholds(known, unknown)
    ccr = np.array([np.count_nonzero(correct & (known >= t)) for t in taus]) / known.size
    fpr = np.array([np.count_nonzero(unknown >= t) for t in taus]) / unknown.size
    return float(-np.trapezoid(ccr, fpr))


def contingency(assignment, truth):
    assignment, truth = np.asarray(assignment), np.asarray(truth)
    if assignment.shape != truth.shape or assignment.ndim != 1 or assignment.size == 0:
        raise LengthMismatch("cluster assignment and truth labels must be equal-length, non-empty")
    clusters, ci = np.unique(assignment, return_inverse=True)
    classes, yi = np.unique(truth, return_inverse=True)
    table = np.zeros((clusters.size, classes.size), dtype=np.int64)
    np.add.at(table, (ci, yi), 1)
    return table


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(assignment, truth) -> float:
    """Normalized mutual information with arithmetic-mean normalization."""
    table = contingency(assignment, truth)
    n = table.sum()
    hc, hy = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if hc == 0.0 or hy == 0.0:
        return 1.0 if hc == hy else 0.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[nz] / (n * n)
    mi = float(np.sum(pij * np.log(pij / outer)))
    return max(0.0, 2.0 * mi / (hc + hy))


def purity(assignment, truth) -> float:
    table = contingency(assignment, truth)
    return float(table.max(axis=1).sum() / table.sum())


def clustering_accuracy(assignment, truth) -> float:
    """Hungarian-matched accuracy; with more clusters than classes, majority
    mapping and macro-averaged per-class recall."""
    table = contingency(assignment, truth)
    n_clusters, n_classes = table.shape
    if n_clusters <= n_classes:
        rows, cols = linear_sum_assignment(-table)
        return float(table[rows, cols].sum() / table.sum())
    mapped = np.zeros(n_classes)
    for row in table:
        mapped[int(np.argmax(row))] += row.max()
    return float(np.mean(mapped / table.sum(axis=0)))


def clustering_scores(assignment, truth) -> dict:
    return {
        "accuracy": clustering_accuracy(assignment, truth),
        "purity": purity(assignment, truth),
        "nmi": nmi(assignment, truth),
    }


def accuracy_vs_threshold(real_lls, synth_lls, grid: Sequence[float]) -> np.ndarray:
    """(len(grid), 2) array of threshold and balanced accuracy (real iff score >= tau)."""
    real, synth = _nonempty(real_lls, synth_lls)
    grid = np.asarray(grid, dtype=np.float64)
    rs, ss = np.sort(real), np.sort(synth)
    tpr = 1.0 - np.searchsorted(rs, grid, side="left") / rs.size
    tnr = np.searchsorted(ss, grid, side="left") / ss.size
    return np.column_stack([grid, 0.5 * (tpr + tnr)])
