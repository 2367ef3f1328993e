"""Derivative-based penalties and their closed-form variational updates.

A function is stored through its Hermite coefficients in a rotated basis,
``f(x) = c0 + sum_alpha coef(alpha) H_alpha(R^T x)``. Its derivative
cross-moment matrix ``M_f`` drives both the feature penalty
``(tr M_f^{r/2})^{1/r}`` and the variable penalty, which only uses the
diagonal of ``M_f``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .hermite import check_orthogonal
from .sampling import WeightSequence, eta_norm, uniform_eta

__all__ = [
    "CoefficientMap",
    "FeatureState",
    "compute_Mg",
    "compute_Mf",
    "group_values",
    "omega_var",
    "omega_feat",
    "omega_0",
    "update_eta_var",
    "update_lambda_feat",
    "variational_penalty",
    "estimate_dimension",
    "extract_features",
]

Mode = Literal["variable", "feature"]


def _power(values: NDArray[np.float64], exponent: float) -> NDArray[np.float64]:
    """Entrywise power on non-negative values with ``0**p = 0``."""
    values = np.asarray(values, dtype=float)
    out = np.zeros_like(values)
    pos = values > 0
    out[pos] = values[pos] ** exponent
    return out


@dataclass
class CoefficientMap:
    """Sparse Hermite expansion of a function in the basis ``H_alpha(R^T .)``."""

    constant: float
    alphas: NDArray[np.int64]
    coefs: NDArray[np.float64]
    rotation: NDArray[np.float64] | None = None

    def __post_init__(self):
        self.coefs = np.asarray(self.coefs, dtype=float).ravel()
        self.alphas = np.asarray(self.alphas, dtype=np.int64)
        if self.alphas.ndim != 2:
            self.alphas = self.alphas.reshape(len(self.coefs), -1)
        if self.alphas.shape[0] != len(self.coefs):
            raise ValueError("one coefficient per multi-index")
        if self.alphas.shape[0] and np.any(self.alphas.sum(axis=1) == 0):
            raise ValueError("the constant term is held separately from the terms")
        if self.rotation is None:
            self.rotation = np.eye(self.alphas.shape[1])
        self.rotation = np.asarray(self.rotation, dtype=float)

    @classmethod
    def from_terms(cls, terms: dict, constant: float = 0.0, rotation=None, d: int | None = None):
        """Build from ``{alpha_tuple: coefficient}``; a zero tuple key sets the constant."""
        alphas, coefs = [], []
        for alpha, value in terms.items():
            if not any(alpha):
                constant += value
                continue
            alphas.append(tuple(alpha))
            coefs.append(value)
        if d is None:
            d = len(next(iter(terms))) if terms else np.shape(rotation)[0]
        return cls(constant, np.array(alphas, dtype=np.int64).reshape(-1, d), np.array(coefs), rotation)

    @property
    def d(self) -> int:
        return int(self.alphas.shape[1])

    @property
    def terms(self) -> dict:
        return {tuple(int(v) for v in a): float(c) for a, c in zip(self.alphas, self.coefs)}

    def scaled(self, t: float) -> "CoefficientMap":
        return CoefficientMap(t * self.constant, self.alphas, t * self.coefs, self.rotation)

    def __call__(self, X: ArrayLike) -> NDArray[np.float64]:
        from .hermite import build_design

        X = np.atleast_2d(np.asarray(X, dtype=float))
        design = build_design(self.alphas, np.ones(len(self.coefs)), self.rotation, X)
        return design @ self.coefs + self.constant


@dataclass
class FeatureState:
    """Rotation ``R`` and importance vector ``eta`` defining ``Lambda = R diag(eta) R^T``."""

    R: NDArray[np.float64]
    eta: NDArray[np.float64]
    r: float
    mode: Mode = "feature"

    def __post_init__(self):
        self.R = check_orthogonal(self.R)
        self.eta = np.asarray(self.eta, dtype=float)
        if self.eta.shape != (self.R.shape[0],):
            raise ValueError("eta must have one entry per column of R")
        if np.any(self.eta < 0):
            raise ValueError("eta must be non-negative")
        if not abs(eta_norm(self.eta, self.r) - 1.0) <= 1e-8:
            raise ValueError("eta must have unit r/(2-r) quasi-norm")
        if self.mode == "variable" and not np.array_equal(self.R, np.eye(self.R.shape[0])):
            raise ValueError("variable mode keeps the identity rotation")

    @classmethod
    def initial(cls, d: int, r: float, mode: Mode = "feature") -> "FeatureState":
        return cls(np.eye(d), uniform_eta(d, r), r, mode)

    @property
    def d(self) -> int:
        return int(self.eta.size)

    @property
    def importance(self) -> NDArray[np.float64]:
        """``eta**(r/(2-r))``; sums to one."""
        return _power(self.eta, self.r / (2.0 - self.r))


def term_weights(f: CoefficientMap, weights: WeightSequence | ArrayLike) -> NDArray[np.float64]:
    """Per-term degree weights: ``c_|alpha|`` from a sequence, or an explicit array."""
    if callable(weights):
        return np.asarray(weights(f.alphas.sum(axis=1)), dtype=float)
    c = np.asarray(weights, dtype=float)
    if c.shape != f.coefs.shape:
        raise ValueError("explicit degree weights need one entry per term")
    return c


def _check_support(f: CoefficientMap, weights: WeightSequence | ArrayLike) -> NDArray[np.float64]:
    c = term_weights(f, weights)
    bad = (c <= 0) & (f.coefs != 0)
    if np.any(bad):
        raise ValueError(
            f"coefficient on multi-index {tuple(f.alphas[np.argmax(bad)])} has zero degree weight"
        )
    return c


def group_values(f: CoefficientMap, weights: WeightSequence | ArrayLike) -> NDArray[np.float64]:
    """``u_a = sum_alpha alpha_a coef(alpha)^2 / c_|alpha|`` (diagonal of ``M_g``)."""
    c = _check_support(f, weights)
    live = f.coefs != 0
    scaled = np.zeros_like(f.coefs)
    scaled[live] = f.coefs[live] ** 2 / c[live]
    return f.alphas.T @ scaled


def compute_Mg(f: CoefficientMap, weights: WeightSequence | ArrayLike) -> NDArray[np.float64]:
    """Derivative cross-moment matrix of ``g = f(R .)`` in the rotated basis.

    ``(M_g)_{ab} = sum_beta sqrt(beta_a+1) sqrt(beta_b+1) coef(beta+e_a) coef(beta+e_b) / c_{|beta|+1}``,
    assembled as ``V^T V`` with one row of ``V`` per shifted index ``beta``.
    """
    c = _check_support(f, weights)
    d = f.d
    live = f.coefs != 0
    alphas, coefs, c = f.alphas[live], f.coefs[live], c[live]
    if alphas.shape[0] == 0:
        return np.zeros((d, d))
    scale = coefs / np.sqrt(c)
    rows, cols, vals = [], [], []
    for a in range(d):
        idx = np.flatnonzero(alphas[:, a])
        if idx.size == 0:
            continue
        beta = alphas[idx].copy()
        beta[:, a] -= 1
        rows.append(beta)
        cols.append(np.full(idx.size, a))
        vals.append(np.sqrt(alphas[idx, a]) * scale[idx])
    betas = np.concatenate(rows)
    uniq, inverse = np.unique(betas, axis=0, return_inverse=True)
    V = np.zeros((uniq.shape[0], d))
    V[inverse.ravel(), np.concatenate(cols)] = np.concatenate(vals)
    M = V.T @ V
    return (M + M.T) / 2


def compute_Mf(f: CoefficientMap, weights: WeightSequence | ArrayLike) -> NDArray[np.float64]:
    """``M_f = R M_g R^T`` in the original coordinates."""
    R = f.rotation
    M = R @ compute_Mg(f, weights) @ R.T
    return (M + M.T) / 2


def omega_var(f: CoefficientMap, weights: WeightSequence | ArrayLike, r: float) -> float:
    """Sparsity penalty over the coordinates of the basis ``f`` is expressed in."""
    u = group_values(f, weights)
    return float(np.sum(_power(u, r / 2.0)) ** (1.0 / r))


def _psd_eigenvalues(M: NDArray[np.float64]) -> NDArray[np.float64]:
    vals = np.linalg.eigvalsh((M + M.T) / 2)
    tol = 1e-8 * max(1.0, float(np.max(np.abs(vals), initial=0.0)))
    if vals.size and vals.min() < -tol:
        raise ValueError(f"derivative moment matrix has negative eigenvalue {vals.min():.3e}")
    return np.clip(vals, 0.0, None)


def omega_feat(f: CoefficientMap, weights: WeightSequence | ArrayLike, r: float) -> float:
    """Rotation-invariant feature penalty ``(tr M_f^{r/2})^{1/r}``."""
    vals = _psd_eigenvalues(compute_Mg(f, weights))
    return float(np.sum(_power(vals, r / 2.0)) ** (1.0 / r))


def omega_0(f: CoefficientMap, weights: WeightSequence | ArrayLike) -> float:
    """Smoothness norm ``(sum_alpha coef(alpha)^2 / c_|alpha|)^{1/2}``."""
    c = _check_support(f, weights)
    live = f.coefs != 0
    return float(np.sqrt(np.sum(f.coefs[live] ** 2 / c[live])))


def update_eta_var(u: ArrayLike, r: float) -> NDArray[np.float64]:
    """Minimiser of ``sum_a u_a / eta_a`` over the unit ``r/(2-r)`` sphere.

    ``eta_a = u_a^{(2-r)/2} / (sum_b u_b^{r/2})^{(2-r)/r}``. An all-zero ``u``
    returns the uniform vector used at initialisation.
    """
    if not 0.0 < r < 2.0:
        raise ValueError("r must lie in (0, 2)")
    u = np.clip(np.asarray(u, dtype=float), 0.0, None)
    total = np.sum(_power(u, r / 2.0))
    if not total > 0:
        return uniform_eta(u.size, r)
    eta = _power(u, (2.0 - r) / 2.0) / total ** ((2.0 - r) / r)
    # renormalise away rounding so the constraint holds to machine precision
    return eta / eta_norm(eta, r)


def update_lambda_feat(M: ArrayLike, r: float) -> FeatureState:
    """Optimal ``Lambda = U diag(eta) U^T`` for a fixed derivative moment matrix.

    Columns of the returned rotation are eigenvectors of ``M`` ordered by
    decreasing eigenvalue.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("M must be square")
    scale = max(1.0, float(np.max(np.abs(M), initial=0.0)))
    if np.max(np.abs(M - M.T), initial=0.0) > 1e-8 * scale:
        raise ValueError("M must be symmetric")
    vals, vecs = np.linalg.eigh((M + M.T) / 2)
    order = np.argsort(-vals, kind="stable")
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # re-orthonormalise to keep R^T R = I tight after many iterations
    q, rr = np.linalg.qr(vecs)
    q *= np.sign(np.diag(rr))
    return FeatureState(q, update_eta_var(vals, r), r, "feature")


def variational_penalty(f: CoefficientMap, weights: WeightSequence | ArrayLike, state: FeatureState) -> float:
    """``tr(Lambda^{-1} M_f)`` with ``Lambda = R diag(eta) R^T`` from ``state``."""
    M_in_state = state.R.T @ compute_Mf(f, weights) @ state.R
    diag = np.diag(M_in_state)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(diag > 1e-300, diag / state.eta, 0.0)
    return float(np.sum(terms))


def estimate_dimension(eta: ArrayLike, r: float, d: int | None = None) -> int:
    """Count of ``eta_a^{r/(2-r)} >= 1/d`` (the uniform initial importance)."""
    eta = np.asarray(eta, dtype=float)
    d = eta.size if d is None else d
    importance = _power(eta, r / (2.0 - r))
    return int(np.sum(importance >= (1.0 / d) * (1.0 - 1e-9)))


def extract_features(state: FeatureState, s_hat: int) -> NDArray[np.float64]:
    """Columns of ``R`` with the ``s_hat`` largest ``eta``, largest first (ties: lower index)."""
    if not 0 <= s_hat <= state.d:
        raise ValueError("s_hat must lie in [0, d]")
    order = np.argsort(-state.eta, kind="stable")[:s_hat]
    return state.R[:, order]
