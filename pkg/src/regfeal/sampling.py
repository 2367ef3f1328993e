"""Random multi-indices with importance weights.

Two degree-weight sequences are supported: a hard cutoff ``c_k = 1{k <= M}``
and a geometric decay ``c_k = rho**k``. Draws target the distribution
proportional to ``c_|alpha| / (lam + mu * alpha . (1/eta))``; the returned
weights make ``sum_j w_j H_j(x) H_j(x')`` an unbiased estimate of the
corresponding (degree-truncated) kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "Cutoff",
    "Geometric",
    "WeightSequence",
    "SampleSet",
    "DegreeTable",
    "composition_count",
    "uniform_eta",
    "eta_norm",
    "subset_to_multi_index",
    "sample_uniform_bounded",
    "sample_uniform_composition",
    "degree_table",
    "sample_group",
    "sample_cutoff",
    "sample_features",
    "sample_prior",
    "aggregate",
]

DEFAULT_K_MAX = 40


@dataclass(frozen=True)
class Cutoff:
    """``c_k = 1`` for ``k <= M`` and ``0`` beyond."""

    M: int

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise ValueError("cutoff M must be a positive integer")

    def __call__(self, k: ArrayLike) -> NDArray[np.float64]:
        return (np.asarray(k) <= self.M).astype(float)

    @property
    def max_degree(self) -> int:
        return int(self.M)

    def to_dict(self) -> dict:
        return {"kind": "cutoff", "M": int(self.M)}


@dataclass(frozen=True)
class Geometric:
    """``c_k = rho**k``."""

    rho: float

    def __post_init__(self):
        # rho = 1 appears in the published CV grids; it is only usable with a degree cap.
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("geometric rho must lie in (0, 1]")

    def __call__(self, k: ArrayLike) -> NDArray[np.float64]:
        return float(self.rho) ** np.asarray(k, dtype=float)

    @property
    def max_degree(self) -> None:
        return None

    def to_dict(self) -> dict:
        return {"kind": "geometric", "rho": float(self.rho)}


WeightSequence = Union[Cutoff, Geometric]


def weight_sequence_from_dict(spec: dict) -> WeightSequence:
    kind = spec.get("kind")
    if kind == "cutoff":
        return Cutoff(int(spec["M"]))
    if kind == "geometric":
        return Geometric(float(spec["rho"]))
    raise ValueError(f"unknown weight sequence kind {kind!r}")


@dataclass
class SampleSet:
    """Distinct sampled multi-indices with aggregated importance weights.

    ``counts`` holds how many raw draws landed on each tuple; ``degree_counts``
    is the histogram of ``|alpha|`` over all raw draws (including draws later
    dropped for zero weight).
    """

    alphas: NDArray[np.int64]
    weights: NDArray[np.float64]
    counts: NDArray[np.int64]
    degree_counts: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, np.int64))
    normaliser: float = float("nan")
    tail_mass: float = 0.0

    @property
    def m_unique(self) -> int:
        return int(self.alphas.shape[0])

    @property
    def d(self) -> int:
        return int(self.alphas.shape[1])

    def __iter__(self):
        for alpha, w in zip(self.alphas, self.weights):
            yield tuple(int(a) for a in alpha), float(w)

    def coordinate_histograms(self, k_max: int) -> NDArray[np.int64]:
        """``(d, k_max + 1)`` counts of ``alpha_a`` values over raw draws."""
        hist = np.zeros((self.d, k_max + 1), dtype=np.int64)
        vals = np.minimum(self.alphas, k_max)
        for a in range(self.d):
            np.add.at(hist[a], vals[:, a], self.counts)
        return hist


@dataclass(frozen=True)
class DegreeTable:
    """Unnormalised masses over degrees ``1..k_max`` and their normalised form."""

    masses: NDArray[np.float64]
    probabilities: NDArray[np.float64]
    normaliser: float

    @property
    def degrees(self) -> NDArray[np.int64]:
        return np.arange(1, self.masses.size + 1)


def composition_count(k: int, d: int) -> int:
    """Number of ``alpha`` in ``N^d`` with ``|alpha| = k``."""
    return comb(k + d - 1, d - 1)


def eta_norm(eta: ArrayLike, r: float) -> float:
    """``||eta||_{r/(2-r)}`` (a quasi-norm when ``r < 1``)."""
    p = r / (2.0 - r)
    eta = np.asarray(eta, dtype=float)
    return float(np.sum(eta**p) ** (1.0 / p))


def uniform_eta(d: int, r: float) -> NDArray[np.float64]:
    """The constant vector with unit ``r/(2-r)`` quasi-norm."""
    return np.full(d, float(d) ** (-(2.0 - r) / r))


def subset_to_multi_index(subset: ArrayLike, total: int) -> NDArray[np.int64]:
    """Map a sorted subset ``B`` of ``{1..total}`` to gaps ``B_a - B_{a-1} - 1``.

    With ``B_0 = 0`` and ``|B| = d`` this is a bijection onto
    ``{alpha in N^d : |alpha| <= total - d}``.
    """
    b = np.sort(np.asarray(subset, dtype=np.int64), axis=-1)
    if b.size and (b[..., 0].min() < 1 or b[..., -1].max() > total):
        raise ValueError("subset entries must lie in 1..total")
    prev = np.concatenate([np.zeros(b.shape[:-1] + (1,), np.int64), b[..., :-1]], axis=-1)
    return b - prev - 1


def _random_subsets(rng: np.random.Generator, total: int, size: int, draws: int) -> NDArray[np.int64]:
    """``draws`` uniform ``size``-subsets of ``{1..total}``, sorted, one per row."""
    if size == 0:
        return np.zeros((draws, 0), dtype=np.int64)
    keys = rng.random((draws, total))
    subsets = np.argpartition(keys, size - 1, axis=1)[:, :size] + 1 if size < total else (
        np.tile(np.arange(1, total + 1), (draws, 1))
    )
    return np.sort(subsets, axis=1)


def _uniform_bounded_batch(d: int, M: int, draws: int, rng: np.random.Generator) -> NDArray[np.int64]:
    out = np.empty((draws, d), dtype=np.int64)
    filled = 0
    while filled < draws:
        batch = subset_to_multi_index(_random_subsets(rng, M + d, d, draws - filled), M + d)
        batch = batch[batch.sum(axis=1) > 0]
        out[filled : filled + len(batch)] = batch
        filled += len(batch)
    return out


def _compositions_batch(d: int, k: int, draws: int, rng: np.random.Generator) -> NDArray[np.int64]:
    if d == 1:
        return np.full((draws, 1), k, dtype=np.int64)
    bars = _random_subsets(rng, k + d - 1, d - 1, draws)
    full = np.concatenate([bars, np.full((draws, 1), k + d, dtype=np.int64)], axis=1)
    return subset_to_multi_index(full, k + d)


def sample_uniform_bounded(d: int, M: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform draw over the non-zero ``alpha in N^d`` with ``|alpha| <= M``."""
    if d < 1 or M < 1:
        raise ValueError("need d >= 1 and M >= 1")
    return tuple(int(v) for v in _uniform_bounded_batch(d, M, 1, rng)[0])


def sample_uniform_composition(d: int, k: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform draw over ``alpha in N^d`` with ``|alpha| = k``."""
    if d < 1 or k < 1:
        raise ValueError("need d >= 1 and k >= 1")
    return tuple(int(v) for v in _compositions_batch(d, k, 1, rng)[0])


def _inverse(eta: ArrayLike) -> NDArray[np.float64]:
    eta = np.asarray(eta, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(eta > 0, 1.0 / np.where(eta > 0, eta, 1.0), np.inf)


def _load(alphas: ArrayLike, eta_inv: ArrayLike) -> NDArray[np.float64]:
    """``alpha . eta_inv`` summed over the last axis, with ``0 * inf`` read as ``0``."""
    alphas = np.asarray(alphas)
    with np.errstate(invalid="ignore"):
        terms = np.where(alphas > 0, alphas * np.asarray(eta_inv, dtype=float), 0.0)
    return terms.sum(axis=-1)


def _penalty_scale(lam: float, mu: float, load: ArrayLike) -> NDArray[np.float64]:
    load = np.asarray(load, dtype=float)
    if mu == 0:
        return np.full(load.shape, float(lam))
    return lam + mu * load


def degree_table(
    d: int,
    rho: float,
    lam: float,
    mu: float,
    eta_tilde: float,
    k_max: int = DEFAULT_K_MAX,
) -> DegreeTable:
    """Masses ``C(k+d-1, d-1) rho^k / (lam + mu k / eta_tilde)`` for ``k = 1..k_max``.

    ``d`` is the size of the coordinate group sharing the common value
    ``eta_tilde``. At initialisation (all of ``eta`` equal to
    ``d**(-(2-r)/r)``) this is the exact degree law of the target.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    if lam < 0 or mu < 0 or (lam == 0 and mu == 0):
        raise ValueError("lam and mu must be non-negative and not both zero")
    k = np.arange(1, k_max + 1)
    counts = np.array([composition_count(int(j), d) for j in k], dtype=float)
    masses = counts * rho**k / _penalty_scale(lam, mu, _load(k[:, None], [_inverse(eta_tilde)]))
    total = masses.sum()
    if not total > 0:
        raise ValueError("degree table has zero total mass")
    return DegreeTable(masses, masses / total, float(total))


def aggregate(alphas: ArrayLike, weights: ArrayLike, **extra) -> SampleSet:
    """Merge duplicate multi-indices by summing weights; drop zero-weight draws."""
    alphas = np.asarray(alphas, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    keep = weights > 0
    alphas, weights = alphas[keep], weights[keep]
    if alphas.shape[0] == 0:
        d = alphas.shape[1]
        return SampleSet(np.zeros((0, d), np.int64), np.zeros(0), np.zeros(0, np.int64), **extra)
    uniq, inverse = np.unique(alphas, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    summed = np.bincount(inverse, weights=weights, minlength=len(uniq))
    counts = np.bincount(inverse, minlength=len(uniq))
    return SampleSet(uniq, summed, counts.astype(np.int64), **extra)


def _degree_histogram(alphas: NDArray[np.int64], k_max: int) -> NDArray[np.int64]:
    return np.bincount(np.minimum(alphas.sum(axis=1), k_max), minlength=k_max + 1)


def _check_eta(eta: NDArray[np.float64], r: float) -> None:
    if np.any(eta < 0):
        raise ValueError("eta must be non-negative")
    if not abs(eta_norm(eta, r) - 1.0) <= 1e-8:
        raise ValueError(f"eta must have unit r/(2-r) quasi-norm, got {eta_norm(eta, r)!r}")


def _split_groups(eta: NDArray[np.float64], r: float):
    """Split sorted ``eta`` at the largest strictly positive gap of the importances ``eta**(r/(2-r))``.

    Gaps are measured on the importance scale, where the entries sum to one;
    raw ``eta`` compresses moderate entries towards zero and can place a live
    coordinate in the group of dead ones. Returns ``None`` when all entries
    are equal, else ``(high, low)`` index arrays (``high`` above the gap).
    """
    order = np.argsort(eta, kind="stable")
    importance = np.where(eta > 0, np.abs(eta) ** (r / (2.0 - r)), 0.0)
    gaps = np.diff(importance[order])
    if gaps.size == 0 or not gaps.max() > 0:
        return None
    cut = int(np.argmax(gaps))  # first maximal gap
    return np.sort(order[cut + 1 :]), np.sort(order[: cut + 1])


def sample_group(
    d: int,
    eta: ArrayLike,
    weights: Geometric,
    lam: float,
    mu: float,
    r: float,
    m: int,
    rng: np.random.Generator,
    k_max: int = DEFAULT_K_MAX,
) -> SampleSet:
    """Two-group importance sampler for geometric degree weights.

    Coordinates are split at the largest gap of sorted ``eta``; each group
    gets a single representative value (the minimum of the upper group, the
    maximum of the lower group), the pair of group degrees is drawn from the
    resulting joint table, and compositions are drawn uniformly inside each
    group. When all ``eta`` are equal the proposal is the exact target.
    """
    if not isinstance(weights, Geometric):
        raise TypeError("group sampling requires geometric degree weights")
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (d,):
        raise ValueError("eta must have length d")
    _check_eta(eta, r)
    rho = float(weights.rho)
    eta_inv = _inverse(eta)
    split = _split_groups(eta, r)

    if split is None:
        table = degree_table(d, rho, lam, mu, float(eta[0]), k_max)
        tail = degree_table(d, rho, lam, mu, float(eta[0]), 2 * k_max).masses[k_max:].sum()
        ks = rng.choice(table.degrees, size=m, p=table.probabilities)
        raw = np.empty((m, d), dtype=np.int64)
        for k in np.unique(ks):
            rows = np.flatnonzero(ks == k)
            raw[rows] = _compositions_batch(d, int(k), rows.size, rng)
        raw_w = np.full(m, table.normaliser / m)
        normaliser = table.normaliser
    else:
        high, low = split
        d1, d2 = high.size, low.size
        inv1, inv2 = 1.0 / eta[high].min(), _inverse(eta[low].max())
        k1, k2 = np.meshgrid(np.arange(k_max + 1), np.arange(k_max + 1), indexing="ij")
        valid = (k1 + k2 >= 1) & (k1 + k2 <= k_max)
        k1, k2 = k1[valid], k2[valid]
        counts = np.array(
            [composition_count(int(a), d1) * composition_count(int(b), d2) for a, b in zip(k1, k2)],
            dtype=float,
        )
        load = _load(np.stack([k1, k2], axis=1), [inv1, inv2])
        masses = counts * rho ** (k1 + k2) / _penalty_scale(lam, mu, load)
        normaliser = float(masses.sum())
        if not normaliser > 0:
            raise ValueError("group sampling table has zero total mass")
        pick = rng.choice(masses.size, size=m, p=masses / normaliser)
        raw = np.zeros((m, d), dtype=np.int64)
        for cell in np.unique(pick):
            rows = np.flatnonzero(pick == cell)
            if k1[cell]:
                raw[np.ix_(rows, high)] = _compositions_batch(d1, int(k1[cell]), rows.size, rng)
            if k2[cell]:
                raw[np.ix_(rows, low)] = _compositions_batch(d2, int(k2[cell]), rows.size, rng)
        proposal_load = _load(np.stack([k1[pick], k2[pick]], axis=1), [inv1, inv2])
        # eta_a = 0 with alpha_a > 0 gives an infinite target scale, hence weight 0
        target_scale = _penalty_scale(lam, mu, _load(raw, eta_inv))
        raw_w = normaliser * _penalty_scale(lam, mu, proposal_load) / target_scale / m
        tail = np.nan

    return aggregate(
        raw,
        raw_w,
        degree_counts=_degree_histogram(raw, k_max),
        normaliser=float(normaliser),
        tail_mass=float(tail / normaliser) if np.isfinite(tail) else float("nan"),
    )


def sample_cutoff(
    d: int,
    eta: ArrayLike,
    weights: Cutoff,
    lam: float,
    mu: float,
    m: int,
    rng: np.random.Generator,
) -> SampleSet:
    """Uniform proposal over ``{0 < |alpha| <= M}`` reweighted to the target."""
    eta = np.asarray(eta, dtype=float)
    M = weights.max_degree
    size = comb(M + d, d) - 1
    raw = _uniform_bounded_batch(d, M, m, rng)
    scale = _penalty_scale(lam, mu, _load(raw, _inverse(eta)))
    raw_w = size / scale / m
    return aggregate(raw, raw_w, degree_counts=_degree_histogram(raw, M), normaliser=float(size))


def sample_features(
    d: int,
    eta: ArrayLike,
    weights: WeightSequence,
    lam: float,
    mu: float,
    r: float,
    m: int,
    rng: np.random.Generator,
    k_max: int = DEFAULT_K_MAX,
) -> SampleSet:
    """Dispatch to the sampler matching the weight sequence."""
    if isinstance(weights, Geometric):
        return sample_group(d, eta, weights, lam, mu, r, m, rng, k_max)
    return sample_cutoff(d, eta, weights, lam, mu, m, rng)


def sample_prior(
    d: int, weights: WeightSequence, m: int, rng: np.random.Generator, k_max: int = DEFAULT_K_MAX
) -> SampleSet:
    """Samples for the plain kernel ``sum_alpha c_|alpha| H_alpha(x) H_alpha(x')``."""
    eta = uniform_eta(d, 1.0)
    return sample_features(d, eta, weights, 1.0, 0.0, 1.0, m, rng, k_max)
