"""Synthetic multi-index regression datasets.

Covariates are i.i.d. uniform on ``[-sqrt(3), sqrt(3)]`` (zero mean, unit
variance per coordinate). The response depends on two projected coordinates
``P^T x``, with ``P`` either the first two canonical axes (variable mode) or
the first two columns of a Haar-random orthogonal matrix (feature mode).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "SyntheticSpec",
    "Dataset",
    "sample_orthogonal",
    "sinus_target",
    "polynomial_target",
    "make_dataset",
    "write_dataset",
    "read_dataset",
]

HALF_WIDTH = np.sqrt(3.0)


@dataclass(frozen=True)
class SyntheticSpec:
    dataset: Literal["sinus", "polynomial"] = "sinus"
    d: int = 10
    s: int = 2
    n: int = 1000
    n_test: int = 5000
    sigma: float = 0.0
    mode: Literal["variable", "feature"] = "feature"
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in TARGETS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.s != 2:
            raise ValueError("the sinus and polynomial targets use exactly s = 2 projections")
        if self.d < self.s:
            raise ValueError("need d >= s")
        if self.mode not in ("variable", "feature"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


class Dataset(NamedTuple):
    X: NDArray[np.float64]
    Y: NDArray[np.float64]
    P: NDArray[np.float64]
    X_test: NDArray[np.float64]
    Y_test: NDArray[np.float64]


def sample_orthogonal(d: int, rng: np.random.Generator) -> NDArray[np.float64]:
    """Haar-distributed orthogonal matrix (QR of a Gaussian matrix, sign-corrected)."""
    if d < 1:
        raise ValueError("d must be positive")
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def sinus_target(Z: ArrayLike) -> NDArray[np.float64]:
    Z = np.atleast_2d(Z)
    return np.sin(2 * Z[:, 0]) + np.sin(2 * Z[:, 1])


def polynomial_target(Z: ArrayLike) -> NDArray[np.float64]:
    Z = np.atleast_2d(Z)
    z1, z2 = Z[:, 0], Z[:, 1]
    return z1 + z2 - z1**2 - z2**2 + 2 * z1 * z2**3 - 4


TARGETS = {"sinus": sinus_target, "polynomial": polynomial_target}


def make_dataset(spec: SyntheticSpec) -> Dataset:
    """Draw train and test sets; both carry noise of standard deviation ``sigma``."""
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "feature":
        P = sample_orthogonal(spec.d, rng)[:, : spec.s]
    else:
        P = np.eye(spec.d)[:, : spec.s]
    target = TARGETS[spec.dataset]

    def draw(n: int):
        X = rng.uniform(-HALF_WIDTH, HALF_WIDTH, size=(n, spec.d))
        Y = target(X @ P) + spec.sigma * rng.standard_normal(n)
        return X, Y

    X, Y = draw(spec.n)
    X_test, Y_test = draw(spec.n_test)
    return Dataset(X, Y, P, X_test, Y_test)


def _fmt(value: float) -> str:
    return repr(float(value))


def write_table(path: Path, X: NDArray, Y: NDArray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x_{a + 1}" for a in range(X.shape[1])] + ["y"])
        for row, y in zip(X, Y):
            writer.writerow([_fmt(v) for v in row] + [_fmt(y)])


def read_table(path: Path) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "y":
            raise ValueError(f"{path}: last column must be 'y'")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite values")
    return data[:, :-1], data[:, -1]


def write_dataset(dataset: Dataset, spec: SyntheticSpec, out_dir: str | Path) -> dict:
    """Write ``train.csv``, ``test.csv`` and a ``meta.json`` sidecar holding spec and ``P``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "train.csv", dataset.X, dataset.Y)
    write_table(out / "test.csv", dataset.X_test, dataset.Y_test)
    meta = {"spec": asdict(spec), "P": dataset.P.tolist()}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {"train": str(out / "train.csv"), "test": str(out / "test.csv"), "meta": str(out / "meta.json")}


def read_dataset(data_dir: str | Path) -> tuple[Dataset, dict]:
    data_dir = Path(data_dir)
    X, Y = read_table(data_dir / "train.csv")
    test_path = data_dir / "test.csv"
    X_test, Y_test = read_table(test_path) if test_path.exists() else (X[:0], Y[:0])
    meta_path = data_dir / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    P = np.array(meta["P"], dtype=float) if "P" in meta else np.zeros((X.shape[1], 0))
    if X_test.shape[1] != X.shape[1]:
        raise ValueError("train and test sets have different column counts")
    return Dataset(X, Y, P, X_test, Y_test), meta
