"""Alternating minimisation for joint regression and linear feature learning.

Each iteration (1) refreshes ``Lambda = R diag(eta) R^T`` in closed form from
the previous fit, (2) draws Hermite multi-indices whose importance weights
approximate the kernel ``k_Lambda``, and (3) solves a ridge problem either on
the explicit features (when ``n > m'``) or through the ``n x n`` kernel matrix.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Iterable, Literal, Sequence

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .hermite import build_design
from .metrics import r2_score
from .penalty import (
    CoefficientMap,
    FeatureState,
    compute_Mf,
    estimate_dimension,
    extract_features,
    group_values,
    omega_0,
    update_eta_var,
    update_lambda_feat,
    variational_penalty,
)
from .sampling import (
    DEFAULT_K_MAX,
    Cutoff,
    Geometric,
    SampleSet,
    WeightSequence,
    _inverse,
    _load,
    _penalty_scale,
    sample_features,
    sample_prior,
    weight_sequence_from_dict,
)

__all__ = [
    "PenaltyConfig",
    "IterationRecord",
    "FitReport",
    "FittedModel",
    "solve_feature_view",
    "solve_kernel_view",
    "fit",
    "predict",
    "cross_validate",
    "CVResult",
    "kernel_ridge_baseline",
    "default_lambda",
    "scaled",
    "make_grid",
]

Mode = Literal["variable", "feature"]
View = Literal["auto", "feature", "kernel"]


def scaled(value: float, d: int, r: float) -> float:
    """``value / d**((2-r)/r)``, the dimension scaling used for ``mu`` and ``lambda`` grids."""
    return value / float(d) ** ((2.0 - r) / r)


def default_lambda(d: int, r: float) -> float:
    return scaled(1e-8, d, r)


@dataclass(frozen=True)
class PenaltyConfig:
    """Hyper-parameters of one fit.

    ``lam=None`` resolves to ``1e-8 / d**((2-r)/r)`` once the dimension is known.
    """

    weights: WeightSequence = Geometric(0.5)
    r: float = 0.33
    lam: float | None = None
    mu: float = 1e-3
    m: int = 1000
    n_iter: int = 5
    k_max: int = DEFAULT_K_MAX
    seed: int = 0
    energy: Literal["effective", "nominal"] = "effective"

    def __post_init__(self):
        if self.energy not in ("effective", "nominal"):
            raise ValueError("energy must be 'effective' or 'nominal'")
        if not 0.0 < self.r < 2.0:
            raise ValueError("r must lie in (0, 2)")
        if self.mu < 0 or (self.lam is not None and self.lam < 0):
            raise ValueError("regularisation strengths must be non-negative")
        if self.m < 1 or self.n_iter < 1 or self.k_max < 1:
            raise ValueError("m, n_iter and k_max must be positive")

    def lam_for(self, d: int) -> float:
        return default_lambda(d, self.r) if self.lam is None else float(self.lam)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["weights"] = self.weights.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PenaltyConfig":
        data = dict(data)
        if isinstance(data.get("weights"), dict):
            data["weights"] = weight_sequence_from_dict(data["weights"])
        return cls(**data)


@dataclass
class IterationRecord:
    iteration: int
    eta: list[float]
    importance: list[float]
    rotation: list[list[float]]
    m_unique: int
    view: str
    train_r2: float
    test_r2: float | None
    s_hat: int
    degree_counts: list[int]
    coordinate_histograms: list[list[int]]
    normaliser: float
    objective_before_update: float | None = None
    objective_after_update: float | None = None


@dataclass
class FitReport:
    mode: str
    config: dict
    iterations: list[IterationRecord] = field(default_factory=list)
    s_hat: int = 0
    P_hat: list[list[float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FittedModel:
    state: FeatureState
    samples: SampleSet
    weights: WeightSequence
    view: str
    theta: NDArray[np.float64]
    intercept: float
    delta: NDArray[np.float64] | None = None
    X_train: NDArray[np.float64] | None = None
    report: FitReport | None = None
    wall_time: float = 0.0

    @property
    def d(self) -> int:
        return self.state.d

    def design(self, X: ArrayLike) -> NDArray[np.float64]:
        return build_design(self.samples.alphas, self.samples.weights, self.state.R, X)

    def predict(self, X: ArrayLike) -> NDArray[np.float64]:
        return predict(self, X)

    def coefficient_map(self) -> CoefficientMap:
        """Hermite coefficients of the fitted function: ``coef_j = sqrt(w_j) theta_j``."""
        return CoefficientMap(
            self.intercept, self.samples.alphas, np.sqrt(self.samples.weights) * self.theta, self.state.R
        )

    def features(self, s_hat: int | None = None) -> NDArray[np.float64]:
        if s_hat is None:
            s_hat = estimate_dimension(self.state.eta, self.state.r)
        return extract_features(self.state, s_hat)

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "mode": self.state.mode,
            "r": self.state.r,
            "weights": self.weights.to_dict(),
            "R": self.state.R.tolist(),
            "eta": self.state.eta.tolist(),
            "alphas": self.samples.alphas.tolist(),
            "sample_weights": self.samples.weights.tolist(),
            "theta": self.theta.tolist(),
            "intercept": self.intercept,
            "delta": None if self.delta is None else self.delta.tolist(),
            "X_train": None if self.X_train is None else self.X_train.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FittedModel":
        d = len(data["eta"])
        alphas = np.array(data["alphas"], dtype=np.int64).reshape(-1, d)
        weights = np.array(data["sample_weights"], dtype=float)
        samples = SampleSet(alphas, weights, np.ones(len(weights), dtype=np.int64))
        return cls(
            state=FeatureState(np.array(data["R"]), np.array(data["eta"]), data["r"], data["mode"]),
            samples=samples,
            weights=weight_sequence_from_dict(data["weights"]),
            view=data["view"],
            theta=np.array(data["theta"], dtype=float),
            intercept=float(data["intercept"]),
            delta=None if data.get("delta") is None else np.array(data["delta"], dtype=float),
            X_train=None if data.get("X_train") is None else np.array(data["X_train"], dtype=float),
        )


def effective_weights(samples: SampleSet, lam: float, mu: float, eta: ArrayLike) -> NDArray[np.float64]:
    """Importance-sampled estimate of ``c_|alpha|`` for each drawn term: ``w_j (lam + mu alpha_j . eta^-1)``.

    Its expectation over the sampler is ``c_|alpha|``, and with it the Hermite
    penalty of the fitted expansion equals the ridge penalty ``||theta||^2``.
    """
    return samples.weights * _penalty_scale(lam, mu, _load(samples.alphas, _inverse(eta)))


def _check_finite(*arrays: NDArray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ValueError("inputs must be finite")


def _shifted_solve(G: NDArray, shift: float, rhs: NDArray) -> NDArray:
    """Solve ``(G + shift I) x = rhs`` for symmetric PSD ``G``.

    Falls back to an eigendecomposition when Cholesky reports a singular or
    ill-conditioned system, which happens when ``G`` dwarfs ``shift``.
    """
    A = G.copy()
    A[np.diag_indices_from(A)] += shift
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            return scipy.linalg.solve(A, rhs, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
            pass
    vals, vecs = scipy.linalg.eigh(G)
    return vecs @ ((vecs.T @ rhs) / (np.clip(vals, 0.0, None) + shift))


def solve_feature_view(Phi: ArrayLike, Y: ArrayLike) -> tuple[NDArray[np.float64], float]:
    """Minimise ``(1/n) ||Y - Phi theta - theta0||^2 + ||theta||^2``."""
    Phi = np.asarray(Phi, dtype=float)
    Y = np.asarray(Y, dtype=float)
    _check_finite(Phi, Y)
    n, m = Phi.shape
    if Y.shape != (n,):
        raise ValueError("Y must have one entry per row of Phi")
    y_mean = Y.mean()
    if m == 0:
        return np.zeros(0), float(y_mean)
    col_mean = Phi.mean(axis=0)
    Pc = Phi - col_mean
    theta = _shifted_solve(Pc.T @ Pc, float(n), Pc.T @ (Y - y_mean))
    return theta, float(y_mean - col_mean @ theta)


def solve_kernel_view(K: ArrayLike, Y: ArrayLike) -> tuple[NDArray[np.float64], float]:
    """Minimise ``(1/n) ||Y - K delta - delta0||^2 + delta^T K delta``.

    Returns the solution with ``sum(delta) = 0``; ``delta = 0`` when ``K = 0``.
    """
    K = np.asarray(K, dtype=float)
    Y = np.asarray(Y, dtype=float)
    _check_finite(K, Y)
    n = Y.size
    if K.shape != (n, n):
        raise ValueError("K must be n x n")
    scale = max(1.0, float(np.max(np.abs(K), initial=0.0)))
    if np.max(np.abs(K - K.T), initial=0.0) > 1e-8 * scale:
        raise ValueError("kernel matrix must be symmetric")
    y_mean = Y.mean()
    if not np.any(K):
        return np.zeros(n), float(y_mean)
    row_mean = K.mean(axis=1)
    Kc = K - row_mean[:, None] - row_mean[None, :] + row_mean.mean()
    delta = _shifted_solve((Kc + Kc.T) / 2, float(n), Y - y_mean)
    return delta, float(np.mean(Y - K @ delta))


def _solve(Phi: NDArray, Y: NDArray, view: View) -> tuple[str, NDArray, float, NDArray | None, NDArray]:
    """Solve in the requested view; returns ``(view, theta, intercept, delta, fitted)``."""
    n, m = Phi.shape
    if view == "auto":
        view = "feature" if n > m else "kernel"
    if view == "feature":
        theta, theta0 = solve_feature_view(Phi, Y)
        return view, theta, theta0, None, Phi @ theta + theta0
    delta, delta0 = solve_kernel_view(Phi @ Phi.T, Y)
    theta = Phi.T @ delta
    return view, theta, delta0, delta, Phi @ theta + delta0


def _histograms(samples: SampleSet, k_max: int) -> list[list[int]]:
    return samples.coordinate_histograms(k_max).tolist()


def _as_xy(X: ArrayLike, Y: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != Y.size:
        raise ValueError("X must be (n, d) with one response per row")
    if X.shape[0] < 2:
        raise ValueError("need at least two observations")
    _check_finite(X, Y)
    return X, Y


def _safe_r2(y: NDArray, pred: NDArray) -> float:
    try:
        return r2_score(y, pred)
    except ValueError:
        return float("nan")


def fit(
    X: ArrayLike,
    Y: ArrayLike,
    config: PenaltyConfig,
    mode: Mode = "feature",
    *,
    learn_rotation: bool = True,
    view: View = "auto",
    eval_set: tuple[ArrayLike, ArrayLike] | None = None,
) -> FittedModel:
    """Run ``config.n_iter`` alternating-minimisation iterations.

    Iteration 0 uses uniform ``eta`` and ``R = I``. Later iterations update
    ``eta`` from the variable group values (variable mode, or feature mode with
    ``learn_rotation=False``) or ``(R, eta)`` from the eigendecomposition of
    ``M_f`` (feature mode), using the previous iteration's fit.
    """
    if mode not in ("variable", "feature"):
        raise ValueError(f"unknown mode {mode!r}")
    X, Y = _as_xy(X, Y)
    n, d = X.shape
    r, weights = config.r, config.weights
    lam, mu = config.lam_for(d), config.mu
    rng = np.random.default_rng(config.seed)
    rotate = mode == "feature" and learn_rotation
    start = time.perf_counter()

    report = FitReport(mode=mode, config=config.to_dict())
    state = FeatureState.initial(d, r, mode)
    f: CoefficientMap | None = None
    penalty_weights: WeightSequence | NDArray = weights
    fitted = np.full(n, Y.mean())
    hist_cap = weights.max_degree if isinstance(weights, Cutoff) else config.k_max

    def objective(g: CoefficientMap, st: FeatureState) -> float:
        return float(
            np.mean((Y - fitted) ** 2)
            + lam * omega_0(g, penalty_weights) ** 2
            + mu * variational_penalty(g, penalty_weights, st)
        )

    for it in range(config.n_iter):
        before = after = None
        if f is not None:
            if rotate:
                new_state = update_lambda_feat(compute_Mf(f, penalty_weights), r)
            else:
                new_state = FeatureState(state.R, update_eta_var(group_values(f, penalty_weights), r), r, mode)
            before, after = objective(f, state), objective(f, new_state)
            state = new_state

        samples = sample_features(d, state.eta, weights, lam, mu, r, config.m, rng, config.k_max)
        Phi = build_design(samples.alphas, samples.weights, state.R, X)
        used_view, theta, intercept, delta, fitted = _solve(Phi, Y, view)
        f = CoefficientMap(intercept, samples.alphas, np.sqrt(samples.weights) * theta, state.R)
        if config.energy == "effective":
            penalty_weights = effective_weights(samples, lam, mu, state.eta)
        model = FittedModel(state, samples, weights, used_view, theta, intercept, delta,
                            X if used_view == "kernel" else None)

        test_r2 = None
        if eval_set is not None:
            test_r2 = _safe_r2(np.asarray(eval_set[1], dtype=float), model.predict(eval_set[0]))
        report.iterations.append(
            IterationRecord(
                iteration=it,
                eta=state.eta.tolist(),
                importance=state.importance.tolist(),
                rotation=state.R.tolist(),
                m_unique=samples.m_unique,
                view=used_view,
                train_r2=_safe_r2(Y, fitted),
                test_r2=test_r2,
                s_hat=estimate_dimension(state.eta, r, d),
                degree_counts=samples.degree_counts.tolist(),
                coordinate_histograms=_histograms(samples, hist_cap),
                normaliser=samples.normaliser,
                objective_before_update=before,
                objective_after_update=after,
            )
        )

    report.s_hat = estimate_dimension(state.eta, r, d)
    report.P_hat = extract_features(state, report.s_hat).tolist()
    model.report = report
    model.wall_time = time.perf_counter() - start
    return model


def predict(model: FittedModel, X_new: ArrayLike) -> NDArray[np.float64]:
    """Evaluate the fitted function with the stored multi-indices (no resampling)."""
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if X_new.shape[1] != model.d:
        raise ValueError(f"expected {model.d} columns, got {X_new.shape[1]}")
    # in the kernel view theta = Phi_train^T delta, so this is sum_i delta_i k(x_i, .) + delta0
    return model.design(X_new) @ model.theta + model.intercept


# --------------------------------------------------------------------------- CV


def make_grid(params: Iterable[float | int], mus: Iterable[float], kind: str = "geometric") -> list:
    """Cartesian ``(weights, mu)`` grid from ``rho`` (or cutoff ``M``) and ``mu`` values."""
    mus = list(mus)
    make = (lambda p: Geometric(float(p))) if kind == "geometric" else (lambda p: Cutoff(int(p)))
    return [(make(p), float(mu)) for p in params for mu in mus]


def fold_indices(n: int, folds: int, seed: int) -> list[NDArray[np.int64]]:
    if folds < 2:
        raise ValueError("need at least two folds")
    if n < folds:
        raise ValueError("fewer observations than folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


def _weights_key(w: WeightSequence) -> float:
    return float(w.rho) if isinstance(w, Geometric) else float(w.M)


@dataclass
class CVResult:
    best: PenaltyConfig
    table: list[dict]

    def rows(self) -> list[dict]:
        """Score table sorted by decreasing mean validation R^2."""
        return sorted(self.table, key=lambda row: -_finite_or(row["mean"]))


def _finite_or(value: float, fallback: float = -np.inf) -> float:
    return value if np.isfinite(value) else fallback


def _cv_task(args) -> float:
    X, Y, train, val, config, mode, learn_rotation = args
    try:
        model = fit(X[train], Y[train], config, mode, learn_rotation=learn_rotation)
        return _safe_r2(Y[val], model.predict(X[val]))
    except (np.linalg.LinAlgError, ValueError, FloatingPointError):
        return float("nan")


def _map(func: Callable, tasks: list, n_jobs: int) -> list:
    if n_jobs <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(func, tasks))


def cross_validate(
    X: ArrayLike,
    Y: ArrayLike,
    grid: Sequence[tuple[WeightSequence, float]],
    template: PenaltyConfig,
    folds: int = 5,
    *,
    mode: Mode = "feature",
    learn_rotation: bool = True,
    seed: int | None = None,
    n_jobs: int = 1,
) -> CVResult:
    """K-fold selection of ``(weights, mu)`` by mean validation R^2.

    Ties go to the larger ``mu``, then the larger ``rho`` (or cutoff ``M``).
    """
    if len(grid) == 0:
        raise ValueError("empty grid")
    X, Y = _as_xy(X, Y)
    splits = fold_indices(len(Y), folds, template.seed if seed is None else seed)
    all_idx = np.arange(len(Y))
    configs = [replace(template, weights=w, mu=float(mu)) for w, mu in grid]
    tasks = [
        (X, Y, np.setdiff1d(all_idx, val), val, cfg, mode, learn_rotation)
        for cfg in configs
        for val in splits
    ]
    scores = np.array(_map(_cv_task, tasks, n_jobs), dtype=float).reshape(len(configs), folds)

    table = []
    for cfg, row in zip(configs, scores):
        finite = row[np.isfinite(row)]
        table.append(
            {
                "weights": cfg.weights.to_dict(),
                "mu": cfg.mu,
                "mean": float(finite.mean()) if finite.size == folds else float("nan"),
                "std": float(finite.std()) if finite.size == folds else float("nan"),
                "scores": row.tolist(),
            }
        )
    best = max(
        range(len(configs)),
        key=lambda i: (_finite_or(table[i]["mean"]), configs[i].mu, _weights_key(configs[i].weights)),
    )
    return CVResult(configs[best], table)


# --------------------------------------------------------------------- baseline


def _ridge_r2(Phi: NDArray, Y: NDArray, train: NDArray, val: NDArray, lam: float) -> float:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            _, theta, intercept, _, _ = _solve(Phi[train] / np.sqrt(lam), Y[train], "auto")
            return _safe_r2(Y[val], Phi[val] / np.sqrt(lam) @ theta + intercept)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError):
        return float("nan")


def kernel_ridge_baseline(
    X: ArrayLike,
    Y: ArrayLike,
    weights: WeightSequence | Sequence[WeightSequence],
    lambda_grid: Sequence[float],
    m: int,
    seed: int = 0,
    *,
    folds: int = 5,
    k_max: int = DEFAULT_K_MAX,
    r: float = 0.33,
) -> FittedModel:
    """Kernel ridge regression with ``k(x, x') = sum_alpha c_|alpha| H_alpha(x) H_alpha(x')``.

    Features are importance-sampled once (weights ``c_|alpha| / p(alpha) / m``);
    the ridge strength (and the weight sequence, when several are given) is
    chosen by K-fold validation R^2, ties going to stronger regularisation.
    """
    X, Y = _as_xy(X, Y)
    n, d = X.shape
    if len(lambda_grid) == 0:
        raise ValueError("empty lambda grid")
    candidates = [weights] if isinstance(weights, (Cutoff, Geometric)) else list(weights)
    splits = fold_indices(n, folds, seed)
    all_idx = np.arange(n)

    table, best = [], None
    for w in candidates:
        samples = sample_prior(d, w, m, np.random.default_rng(seed), k_max)
        Phi = build_design(samples.alphas, samples.weights, np.eye(d), X)
        for lam in lambda_grid:
            scores = [_ridge_r2(Phi, Y, np.setdiff1d(all_idx, val), val, lam) for val in splits]
            mean = float(np.mean(scores))
            table.append({"weights": w.to_dict(), "lambda": float(lam), "mean": mean,
                          "std": float(np.std(scores)), "scores": scores})
            key = (_finite_or(mean), float(lam), -_weights_key(w))
            if best is None or key > best[0]:
                best = (key, w, float(lam), samples)

    _, w, lam, samples = best
    final = SampleSet(samples.alphas, samples.weights / lam, samples.counts, samples.degree_counts,
                      samples.normaliser)
    Phi = build_design(final.alphas, final.weights, np.eye(d), X)
    used_view, theta, intercept, delta, fitted = _solve(Phi, Y, "auto")
    state = FeatureState.initial(d, r, "variable")
    report = FitReport(mode="kernel_ridge", config={"weights": w.to_dict(), "lambda": lam, "m": m,
                                                     "seed": seed, "folds": folds, "k_max": k_max})
    report.extra = {"cv_table": table, "train_r2": _safe_r2(Y, fitted), "m_unique": final.m_unique}
    return FittedModel(state, final, w, used_view, theta, intercept, delta,
                       X if used_view == "kernel" else None, report)
