"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION n PASS|FAIL`` line, including its runtime,
straight to the terminal so that it survives output capture.
"""

import contextlib
import itertools
import math
import time
import warnings
from dataclasses import replace
from math import comb
from pathlib import Path

import numpy as np
import pytest

from regfeal.cli import main
from regfeal.datagen import SyntheticSpec, make_dataset, sample_orthogonal
from regfeal.hermite import hermite_1d, hermite_1d_all, hermite_multi
from regfeal.metrics import feature_score, r2_score
from regfeal.penalty import CoefficientMap, compute_Mf, omega_feat, omega_var, update_eta_var, update_lambda_feat
from regfeal.sampling import (
    Cutoff,
    Geometric,
    degree_table,
    eta_norm,
    sample_cutoff,
    sample_group,
    subset_to_multi_index,
    uniform_eta,
)
from regfeal.solver import (
    PenaltyConfig,
    cross_validate,
    fit,
    kernel_ridge_baseline,
    make_grid,
    scaled,
    solve_feature_view,
    solve_kernel_view,
)

SEEDS = range(5)


@pytest.fixture
def criterion(request):
    """Context manager that times a block, enforces its budget and prints the verdict."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    @contextlib.contextmanager
    def run(number: int, title: str, budget: float | None = None):
        start = time.perf_counter()
        detail = {"text": ""}
        error = None
        try:
            yield detail
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            error = exc
        elapsed = time.perf_counter() - start
        if error is None and budget is not None and elapsed > budget:
            error = AssertionError(f"runtime {elapsed:.1f}s exceeds budget {budget:.0f}s")
        verdict = "PASS" if error is None else "FAIL"
        line = f"CRITERION {number} {verdict}: {title} ({elapsed:.1f}s)"
        if detail["text"]:
            line += f" {detail['text']}"
        if error is not None:
            line += f" [{type(error).__name__}: {str(error).splitlines()[0] if str(error) else ''}]"
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        if error is not None:
            raise error

    return run


def compositions(d, k):
    for bars in itertools.combinations(range(k + d - 1), d - 1):
        edges = (-1,) + bars + (k + d - 1,)
        yield tuple(edges[i + 1] - edges[i] - 1 for i in range(d))


def bounded_tuples(d, M):
    return [a for a in itertools.product(range(M + 1), repeat=d) if 0 < sum(a) <= M]


def quadratic(b, A):
    """Hermite expansion of ``b.x + x^T A x - tr A``."""
    d = len(b)
    terms = {}
    for a in range(d):
        e = [0] * d
        e[a] = 1
        terms[tuple(e)] = float(b[a])
        e[a] = 2
        terms[tuple(e)] = math.sqrt(2) * A[a, a]
        for c in range(a + 1, d):
            e = [0] * d
            e[a] = e[c] = 1
            terms[tuple(e)] = 2 * A[a, c]
    return CoefficientMap.from_terms(terms, 0.0, d=d)


def composed(b, A, R):
    """Expansion of ``x -> f(R x)`` for ``f = quadratic(b, A)``."""
    return quadratic(R.T @ b, R.T @ A @ R)


def test_criterion_1_hermite(criterion):
    with criterion(1, "Hermite correctness suite", budget=30):
        grid = np.linspace(-3, 3, 121)
        closed = [
            np.ones_like(grid),
            grid,
            (grid**2 - 1) / math.sqrt(2),
            (grid**3 - 3 * grid) / math.sqrt(6),
            (grid**4 - 6 * grid**2 + 3) / math.sqrt(24),
            (grid**5 - 10 * grid**3 + 15 * grid) / math.sqrt(120),
        ]
        np.testing.assert_allclose(hermite_1d_all(5, grid), np.column_stack(closed), rtol=0, atol=1e-12)

        eps = 1e-6
        for k in range(1, 12):
            fd = (hermite_1d(k, grid + eps) - hermite_1d(k, grid - eps)) / (2 * eps)
            np.testing.assert_allclose(fd, math.sqrt(k) * hermite_1d(k - 1, grid), atol=1e-6)

        wide = np.linspace(-4, 4, 401)
        assert np.all(np.abs(hermite_1d_all(30, wide)) <= np.exp(wide**2 / 4)[:, None] * (1 + 1e-12))

        x = np.random.default_rng(0).standard_normal(10**6)
        table = hermite_1d_all(5, x)
        assert np.max(np.abs(table.T @ table / x.size - np.eye(6))) <= 0.02

        rng = np.random.default_rng(1)
        for d in (1, 2, 3, 4):
            x, xp = rng.standard_normal(d), rng.standard_normal(d)
            R = sample_orthogonal(d, rng)
            for k in range(1, 6):
                alphas = list(compositions(d, k))
                lhs = sum(hermite_multi(a, x) * hermite_multi(a, xp) for a in alphas)
                rhs = sum(hermite_multi(a, R @ x) * hermite_multi(a, R @ xp) for a in alphas)
                assert abs(lhs - rhs) <= 1e-8


def test_criterion_2_variational(criterion):
    with criterion(2, "variational-update suite", budget=10):
        rng = np.random.default_rng(2)
        for case in range(200):
            r = (0.33, 1.0, float(rng.uniform(0.1, 1.9)))[case % 3]
            u = rng.exponential(size=int(rng.integers(1, 7)))
            u[rng.random(u.size) < 0.2] = 0.0
            if not u.sum() > 0:
                u[0] = 1.0
            eta = update_eta_var(u, r)
            live = u > 0
            value = np.sum(u[live] / eta[live])
            target = np.sum(u ** (r / 2)) ** (2 / r)
            assert abs(value - target) <= 1e-10 * target
            assert abs(eta_norm(eta, r) - 1.0) <= 1e-10
            for _ in range(5):
                other = rng.random(u.size) + 1e-3
                other /= eta_norm(other, r)
                assert np.sum(u / other) >= value * (1 - 1e-10)

        for case in range(200):
            d = int(rng.integers(1, 7))
            r = float(rng.uniform(0.1, 1.9))
            B = rng.standard_normal((d, int(rng.integers(1, d + 1))))
            state = update_lambda_feat(B @ B.T, r)
            assert abs(eta_norm(state.eta, r) - 1.0) <= 1e-10
            np.testing.assert_allclose(state.R.T @ state.R, np.eye(d), atol=1e-10)


def test_criterion_3_penalty_structure(criterion):
    rho = Geometric(0.5)
    with criterion(3, "penalty-structure suite (d=3, degree <= 2)", budget=60):
        rng = np.random.default_rng(3)
        for _ in range(20):
            A = rng.standard_normal((3, 3))
            b, A = rng.standard_normal(3), (A + A.T) / 2
            f = quadratic(b, A)
            Mf = compute_Mf(f, rho)
            assert np.linalg.eigvalsh(Mf).min() >= -1e-10

            R = sample_orthogonal(3, rng)
            np.testing.assert_allclose(compute_Mf(composed(b, A, R), rho), R.T @ Mf @ R, atol=1e-8)

            _, U = np.linalg.eigh(Mf)
            for r in (0.33, 1.0):
                assert abs(omega_var(composed(b, A, U), rho, r) - omega_feat(f, rho, r)) <= 1e-8

            for r in (0.33, 1.0):
                bound = omega_feat(f, rho, r)
                for _ in range(100):
                    R = sample_orthogonal(3, rng)
                    assert bound <= omega_var(composed(b, A, R), rho, r) + 1e-10


def test_criterion_4_solver_equivalence(criterion):
    with criterion(4, "solver-equivalence suite", budget=30):
        for seed in range(50):
            rng = np.random.default_rng(4000 + seed)
            n, m = int(rng.integers(2, 51)), int(rng.integers(1, 51))
            Phi = rng.standard_normal((n, m)) * rng.uniform(0.1, 3.0)
            Y = rng.standard_normal(n)
            theta, theta0 = solve_feature_view(Phi, Y)
            delta, delta0 = solve_kernel_view(Phi @ Phi.T, Y)
            np.testing.assert_allclose(Phi @ Phi.T @ delta + delta0, Phi @ theta + theta0, atol=1e-8)

            A = np.hstack([Phi, np.ones((n, 1))])
            reg = np.diag(np.r_[np.full(m, n), 0.0])
            ref = np.linalg.solve(A.T @ A + reg, A.T @ Y)
            np.testing.assert_allclose(theta, ref[:m], atol=1e-10)
            assert abs(theta0 - ref[m]) <= 1e-10

        data = make_dataset(SyntheticSpec(dataset="sinus", d=4, n=200, n_test=200, mode="feature", seed=3))
        cfg = PenaltyConfig(weights=Geometric(0.5), mu=scaled(1.0, 4, 0.33), m=150, n_iter=4, seed=7)
        a = fit(data.X, data.Y, cfg, "variable")
        b = fit(data.X, data.Y, cfg, "feature", learn_rotation=False)
        np.testing.assert_array_equal(a.state.eta, b.state.eta)
        np.testing.assert_array_equal(a.state.R, b.state.R)
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.predict(data.X_test), b.predict(data.X_test))


def test_criterion_5_samplers(criterion):
    with criterion(5, "sampler suite", budget=60):
        for d in (1, 2, 3):
            for M in (1, 2, 3, 4):
                images = [tuple(subset_to_multi_index(s, M + d))
                          for s in itertools.combinations(range(1, M + d + 1), d)]
                assert len(images) == len(set(images)) == comb(M + d, d)
                assert set(images) == set(bounded_tuples(d, M)) | {(0,) * d}

        d, rho, lam, mu, r, m, k_max = 2, 0.5, 1e-3, 1.0, 1.0, 10**5, 8
        eta = uniform_eta(d, r)
        s = sample_group(d, eta, Geometric(rho), lam, mu, r, m, np.random.default_rng(2), k_max=k_max)
        p = degree_table(d, rho, lam, mu, eta[0], k_max).probabilities
        freq = s.degree_counts[1:] / m
        assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / m))

        x, xp = np.array([0.7, -0.4]), np.array([-1.1, 0.3])
        for raw in ([1.0, 1.0], [3.0, 1.0], [1.0, 0.2]):
            eta = np.array(raw) / eta_norm(raw, r)
            mu = 0.5
            s = sample_group(d, eta, Geometric(rho), lam, mu, r, m, np.random.default_rng(3), k_max=k_max)
            exact = sum(rho ** sum(a) / (lam + mu * np.dot(a, 1 / eta)) * hermite_multi(a, x) * hermite_multi(a, xp)
                        for a in bounded_tuples(d, k_max))
            values = _per_draw_kernel(s, m, x, xp)
            assert abs(values.mean() - exact) <= 3 * values.std() / np.sqrt(m)

        M = 3
        eta = uniform_eta(d, r)
        s = sample_cutoff(d, eta, Cutoff(M), lam, 1.0, m, np.random.default_rng(5))
        exact = sum(1 / (lam + np.dot(a, 1 / eta)) * hermite_multi(a, x) * hermite_multi(a, xp)
                    for a in bounded_tuples(d, M))
        values = _per_draw_kernel(s, m, x, xp)
        assert abs(values.mean() - exact) <= 3 * values.std() / np.sqrt(m)


def _per_draw_kernel(samples, m, x, xp):
    values = []
    for alpha, w, count in zip(samples.alphas, samples.weights, samples.counts):
        values.extend([w / count * m * hermite_multi(alpha, x) * hermite_multi(alpha, xp)] * int(count))
    values.extend([0.0] * (m - len(values)))
    return np.array(values)


@pytest.mark.slow
def test_criterion_6_feature_learning(criterion):
    d, r = 10, 0.33
    with criterion(6, "sinus d=10 feature learning", budget=15 * 60) as detail:
        good_fit, two_above, rows = 0, 0, []
        for seed in SEEDS:
            data = make_dataset(SyntheticSpec(dataset="sinus", d=d, n=2000, sigma=0.0, mode="feature", seed=seed))
            grid = make_grid([0.2, 0.4, 0.6, 0.8, 1.0], [scaled(v, d, r) for v in (100, 1, 0.1, 0.01, 0.001)])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cv = cross_validate(data.X, data.Y, grid, PenaltyConfig(m=2000, n_iter=5, seed=seed),
                                    folds=3, mode="feature", seed=seed)
                model = fit(data.X, data.Y, replace(cv.best, n_iter=5), "feature")
            r2 = r2_score(data.Y_test, model.predict(data.X_test))
            score = feature_score(data.P, model.features(2))
            above = int(np.sum(model.state.importance > 1 / d))
            good_fit += r2 >= 0.5 and score >= 0.8
            two_above += above == 2
            rows.append(f"seed{seed}: r2={r2:.3f} fs={score:.3f} above={above}")
        detail["text"] = f"fit ok {good_fit}/5, two above 1/d {two_above}/5 [{'; '.join(rows)}]"
        assert good_fit >= 4 and two_above >= 4


@pytest.mark.slow
def test_criterion_7_kernel_ridge_contrast(criterion):
    d, r = 40, 0.33
    with criterion(7, "sinus d=40 variable mode vs kernel ridge", budget=20 * 60) as detail:
        wins, rows = 0, []
        for seed in SEEDS:
            data = make_dataset(SyntheticSpec(dataset="sinus", d=d, n=1000, sigma=0.5, mode="variable", seed=seed))
            grid = make_grid([0.01, 0.05, 0.1, 0.2],
                             [scaled(v, d, r) for v in (1000, 100, 10, 1, 0.1, 0.01, 0.001)])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cv = cross_validate(data.X, data.Y, grid, PenaltyConfig(m=2000, n_iter=5, seed=seed),
                                    folds=5, mode="variable", seed=seed)
                model = fit(data.X, data.Y, cv.best, "variable")
                krr = kernel_ridge_baseline(data.X, data.Y,
                                            [Geometric(v) for v in (0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8)],
                                            [1000, 100, 10, 1, 0.1, 0.01, 0.001], 2000, seed)
            ours = r2_score(data.Y_test, model.predict(data.X_test))
            base = r2_score(data.Y_test, krr.predict(data.X_test))
            wins += ours - base >= 0.2
            rows.append(f"seed{seed}: {ours:.3f} vs {base:.3f}")
        detail["text"] = f"margin >= 0.2 in {wins}/5 [{'; '.join(rows)}]"
        assert wins >= 4


def test_criterion_8_gaussian_second_moment(criterion):
    with criterion(8, "Gaussian second moment", budget=60) as detail:
        rng = np.random.default_rng(8)
        worst = 0.0
        for d in (1, 2, 3):
            X = rng.standard_normal((10**6, d))
            for k in range(1, 5):
                for alpha in compositions(d, k):
                    worst = max(worst, abs(np.mean(hermite_multi(alpha, X) ** 2) - 1.0))
        detail["text"] = f"max deviation {worst:.4f}"
        assert worst <= 0.05


SMALL_DATA = ["--set", "data.d=4", "--set", "data.n=120", "--set", "data.n_test=60", "--set", "data.sigma=0.1"]
SMALL_MODEL = ["--set", "model.m=40", "--set", "model.n_iter=2", "--set", "model.weights.rho=0.5"]
SMALL_CV = ["--set", "cv.folds=2", "--set", "cv.rho_grid=[0.4, 0.8]", "--set", "cv.mu_grid=[1, 0.01]"]
SMALL_EXP = SMALL_MODEL + SMALL_CV + ["--set", "data.n_test=40", "--set", "replicates=2"]


def _tree(path: Path) -> dict:
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_criterion_9_cli_determinism(criterion, tmp_path):
    with criterion(9, "CLI determinism") as detail:
        data = tmp_path / "data"
        assert main(["gen", "--out", str(data), "--seed", "1", *SMALL_DATA]) == 0
        model = tmp_path / "fit0" / "model.json"
        commands = {
            "gen": ["gen", "--seed", "1", *SMALL_DATA],
            "fit": ["fit", "--data", str(data), *SMALL_MODEL],
            "cv": ["cv", "--data", str(data), *SMALL_MODEL, *SMALL_CV],
            "score": ["score", "--data", str(data), "--model", str(model), "--set", "export_projected=true"],
            "exp1": ["exp1", "--seed", "3", *SMALL_EXP, "--set", "data.d_list=[4]", "--set", "data.n_list=[60]",
                     "--set", "cv.rho_grid=[0.2]", "--set", "baseline.m=30",
                     "--set", "baseline.lambda_grid=[1, 0.01]", "--set", "baseline.lambda_grid_scaled=[]"],
            "exp2": ["exp2", "--seed", "3", *SMALL_EXP, "--set", "data.d=4", "--set", "data.n=80",
                     "--set", "m_list=[20, 40]"],
            "exp3": ["exp3", "--seed", "3", *SMALL_EXP, "--set", "data.d=4", "--set", "data.n=80",
                     "--set", "model.n_iter=3"],
        }
        checked = []
        for name, args in commands.items():
            outs = [tmp_path / f"{name}{i}" for i in range(2)]
            for out in outs:
                assert main([args[0], "--out", str(out), *args[1:]]) == 0, name
            first, second = (_tree(out) for out in outs)
            assert first and first == second, name
            checked.append(name)
        detail["text"] = "identical: " + ", ".join(checked)
