"""Normalised Hermite polynomials and Hermite feature design matrices.

The one-dimensional polynomials ``h_k`` are orthonormal for the standard
Gaussian measure (``h_k = He_k / sqrt(k!)``). Multivariate polynomials are
coordinate-wise products ``H_alpha(x) = prod_a h_{alpha_a}(x_a)``.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "MultiIndex",
    "hermite_1d",
    "hermite_1d_all",
    "hermite_multi",
    "build_design",
    "check_orthogonal",
]

ORTHOGONALITY_TOL = 1e-8


class MultiIndex(tuple):
    """Tuple of non-negative integers indexing ``H_alpha``."""

    def __new__(cls, entries: Sequence[int] = ()):
        entries = tuple(int(e) for e in entries)
        if any(e < 0 for e in entries):
            raise ValueError(f"multi-index entries must be non-negative, got {entries}")
        return super().__new__(cls, entries)

    def degree(self) -> int:
        return sum(self)

    def is_zero(self) -> bool:
        return not any(self)


def hermite_1d_all(k_max: int, x: ArrayLike) -> NDArray[np.float64]:
    """Evaluate ``h_0, ..., h_{k_max}`` at ``x`` with the three-term recurrence.

    Returns an array of shape ``np.shape(x) + (k_max + 1,)``.
    """
    if k_max < 0:
        raise ValueError("k_max must be non-negative")
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (k_max + 1,))
    out[..., 0] = 1.0
    if k_max >= 1:
        out[..., 1] = x
    for k in range(k_max - 1):
        # h_{k+2} = x h_{k+1} / sqrt(k+2) - sqrt((k+1)/(k+2)) h_k
        out[..., k + 2] = (
            x * out[..., k + 1] / np.sqrt(k + 2) - np.sqrt((k + 1) / (k + 2)) * out[..., k]
        )
    return out


def hermite_1d(k: int, x: ArrayLike) -> NDArray[np.float64] | float:
    """Normalised Hermite polynomial ``h_k`` evaluated at ``x``."""
    if k < 0:
        raise ValueError("degree must be non-negative")
    values = hermite_1d_all(k, x)[..., k]
    return float(values) if values.ndim == 0 else values


def hermite_multi(alpha: Sequence[int], x: ArrayLike) -> NDArray[np.float64] | float:
    """Multivariate ``H_alpha(x)``; ``x`` may be a single point or an ``(n, d)`` batch."""
    alpha = MultiIndex(alpha)
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (len(alpha),):
        raise ValueError(
            f"dimension mismatch: multi-index has length {len(alpha)}, point has shape {x.shape}"
        )
    out = np.ones(x.shape[:-1])
    for a, k in enumerate(alpha):
        if k:
            out = out * hermite_1d_all(k, x[..., a])[..., k]
    return float(out) if out.ndim == 0 else out


def check_orthogonal(R: ArrayLike, tol: float = ORTHOGONALITY_TOL) -> NDArray[np.float64]:
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"rotation must be square, got shape {R.shape}")
    err = np.max(np.abs(R.T @ R - np.eye(R.shape[0])))
    if not err <= tol:
        raise ValueError(f"rotation is not orthogonal (max |R^T R - I| = {err:.3e})")
    return R


def build_design(
    alphas: ArrayLike,
    weights: ArrayLike,
    R: ArrayLike,
    X: ArrayLike,
) -> NDArray[np.float64]:
    """Hermite feature matrix with entries ``sqrt(w_j) * H_{alpha_j}(R^T x_i)``.

    Parameters
    ----------
    alphas : (m, d) integer array of distinct, non-zero multi-indices.
    weights : (m,) non-negative importance weights.
    R : (d, d) orthogonal matrix; data are expressed in its column basis.
    X : (n, d) data matrix.

    Returns
    -------
    (n, m) array. ``Phi @ Phi.T`` is the sampled kernel matrix.
    """
    alphas = np.asarray(alphas, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    X = np.asarray(X, dtype=float)
    R = check_orthogonal(R)
    if alphas.ndim != 2:
        raise ValueError("alphas must be a 2-d array")
    m, d = alphas.shape
    if X.ndim != 2 or X.shape[1] != d or R.shape[0] != d:
        raise ValueError(f"dimension mismatch: alphas have d={d}, X has shape {X.shape}")
    if weights.shape != (m,):
        raise ValueError("one weight per multi-index is required")
    if np.any(weights < 0):
        raise ValueError("importance weights must be non-negative")
    if np.any(alphas < 0):
        raise ValueError("multi-index entries must be non-negative")
    if m and np.any(alphas.sum(axis=1) == 0):
        raise ValueError("the zero multi-index is carried by the intercept, not the design")

    n = X.shape[0]
    Z = X @ R  # row i is R^T x_i
    design = np.ones((n, m))
    if m == 0:
        return design
    table = hermite_1d_all(int(alphas.max()), Z)  # (n, d, k_max + 1)
    for a in range(d):
        cols = np.flatnonzero(alphas[:, a])
        if cols.size:
            design[:, cols] *= table[:, a, alphas[cols, a]]
    design *= np.sqrt(weights)
    return design
