"""Prediction and subspace-recovery scores."""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike

__all__ = ["r2_score", "projector", "subspace_distance", "feature_score", "noise_level_score"]


def r2_score(y_true: ArrayLike, y_pred: ArrayLike) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have equal lengths")
    if y_true.size < 2:
        raise ValueError("need at least two observations")
    ss_tot = np.sum((y_true - y_true.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("R^2 is undefined for a constant response")
    return float(1.0 - np.sum((y_true - y_pred) ** 2) / ss_tot)


def projector(P: ArrayLike) -> np.ndarray:
    """Orthogonal projector ``P (P^T P)^{-1} P^T`` onto the column span of ``P``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape[1] == 0:
        return np.zeros((P.shape[0], P.shape[0]))
    if np.linalg.matrix_rank(P) < P.shape[1]:
        raise ValueError("subspace basis must have full column rank")
    return P @ np.linalg.solve(P.T @ P, P.T)


def subspace_distance(P: ArrayLike, P_hat: ArrayLike, s: int | None = None) -> float:
    """Squared Frobenius distance between projectors, normalised to ``[0, 1]``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    d = P.shape[0]
    s = P.shape[1] if s is None else s
    if not 1 <= s <= d:
        raise ValueError("need 1 <= s <= d")
    diff = projector(P) - projector(P_hat)
    # s = d leaves 2(d - s) = 0, so fall back to 2s there
    denom = 2 * s if s <= d / 2 or s == d else 2 * (d - s)
    return float(np.sum(diff**2) / denom)


def feature_score(P: ArrayLike, P_hat: ArrayLike, s: int | None = None) -> float:
    """Subspace-recovery score: 1 for identical spans, 0 for orthogonal ones.

    An estimate with more columns than the truth can push the raw value below
    zero; it is clipped to keep the score in ``[0, 1]``.
    """
    return max(0.0, 1.0 - subspace_distance(P, P_hat, s))


def noise_level_score(y_test: ArrayLike, sigma: float) -> float:
    """Best attainable test R^2 given noise of standard deviation ``sigma``."""
    y_test = np.asarray(y_test, dtype=float)
    return float(1.0 - y_test.size * sigma**2 / np.sum((y_test - y_test.mean()) ** 2))
