"""Experiment harness: configuration resolution, replicate runs and table output.

Every run directory receives the resolved configuration, one raw JSON file per
replicate task, and aggregate delimited tables. Wall-clock timings go to a
separate ``timing.json`` so that the remaining outputs are byte-reproducible.
"""

from __future__ import annotations

import copy
import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .datagen import SyntheticSpec, make_dataset
from .metrics import feature_score, noise_level_score, r2_score
from .penalty import FeatureState, extract_features
from .sampling import weight_sequence_from_dict
from .solver import (
    FittedModel,
    PenaltyConfig,
    cross_validate,
    fit,
    kernel_ridge_baseline,
    make_grid,
    scaled,
)

__all__ = [
    "DEFAULTS",
    "resolve_config",
    "apply_override",
    "task_seed",
    "penalty_from_config",
    "run_experiment",
    "write_csv",
    "dump_json",
]

EXP1_RHO = [0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8]
EXP1_MU = [1000.0, 100.0, 10.0, 1.0, 0.1, 0.01, 0.001]
EXP23_RHO = [0.2, 0.4, 0.6, 0.8, 1.0]
EXP23_MU = [100.0, 1.0, 0.1, 0.01, 0.001]

_COMMON = {
    "seed": 0,
    "replicates": 5,
    "threads": 1,
    "model": {"r": 0.33, "m": 2000, "n_iter": 5, "k_max": 40, "lam": None, "energy": "effective",
              "weights": {"kind": "geometric", "rho": 0.5}, "mu": 0.01},
    "cv": {"folds": 5, "n_iter": None, "rho_grid": EXP23_RHO, "mu_grid": EXP23_MU},
}

DEFAULTS: dict[str, dict] = {
    "exp1": {
        **_COMMON,
        "data": {"dataset": "sinus", "mode": "variable", "sigma": 0.5, "n_test": 5000,
                 "d_list": [10, 40], "n_list": [250, 500, 1000, 2000]},
        "cv": {"folds": 5, "n_iter": None, "rho_grid": EXP1_RHO, "mu_grid": EXP1_MU},
        "baseline": {"enabled": True, "m": None, "lambda_grid": EXP1_MU, "lambda_grid_scaled": EXP1_MU},
        "export_projected": True,
    },
    "exp2": {
        **_COMMON,
        "data": {"dataset": "sinus", "mode": "feature", "sigma": 0.0, "n_test": 5000, "d": 10, "n": 2000},
        "model": {**_COMMON["model"], "n_iter": 3},
        "m_list": [125, 250, 500, 1000, 2000],
    },
    "exp3": {
        **_COMMON,
        "data": {"dataset": "sinus", "mode": "feature", "sigma": 0.0, "n_test": 5000, "d": 10, "n": 5000},
        "model": {**_COMMON["model"], "m": 2500, "n_iter": 10},
    },
}


# ------------------------------------------------------------------ configuration


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(config: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    import yaml

    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ValueError(f"override {assignment!r} has an empty key")
    out = copy.deepcopy(config)
    node = out
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"override {assignment!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)
    return out


def resolve_config(kind: str, file_config: dict | None = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults for ``kind`` merged with a config file and then ``key=value`` overrides."""
    base = copy.deepcopy(DEFAULTS.get(kind, {k: v for k, v in _COMMON.items()}))
    config = _merge(base, file_config or {})
    for item in overrides:
        config = apply_override(config, item)
    config["experiment"] = kind
    return config


def task_seed(*keys: int) -> int:
    """Independent 32-bit seed for a task identified by integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def penalty_from_config(model: dict, seed: int, **changes) -> PenaltyConfig:
    params = {
        "weights": weight_sequence_from_dict(model["weights"]),
        "r": float(model["r"]),
        "lam": None if model.get("lam") is None else float(model["lam"]),
        "mu": float(model["mu"]),
        "m": int(model["m"]),
        "n_iter": int(model["n_iter"]),
        "k_max": int(model["k_max"]),
        "energy": model.get("energy", "effective"),
        "seed": int(seed),
    }
    params.update(changes)
    return PenaltyConfig(**params)


def _grid(cv: dict, d: int, r: float) -> list:
    return make_grid(cv["rho_grid"], [scaled(mu, d, r) for mu in cv["mu_grid"]])


# ------------------------------------------------------------------------ output


def _num(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_csv(path: str | Path, header: list[str], rows: Iterable[Iterable[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_num(v) for v in row])


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if np.isfinite(value) else None
    return obj


def dump_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _pool_map(func: Callable, tasks: list, threads: int) -> list:
    if threads <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, tasks))


# --------------------------------------------------------------------- one task


def _safe_feature_score(P: np.ndarray, P_hat: np.ndarray, s: int) -> float:
    if P_hat.shape[1] == 0:
        return 0.0
    return feature_score(P, P_hat, s)


def _iteration_features(model: FittedModel, P: np.ndarray, s: int) -> list[tuple[int, float]]:
    """``(s_hat, feature score)`` after each iteration, from the recorded states."""
    out = []
    report = model.report
    for it in report.iterations:
        state = FeatureState(np.array(it.rotation), np.array(it.eta), model.state.r, model.state.mode)
        out.append((it.s_hat, _safe_feature_score(P, extract_features(state, it.s_hat), s)))
    return out


def _regfeal_task(data, spec: SyntheticSpec, config: dict, seed: int, d: int, cv_cfg: dict | None,
                  fixed: PenaltyConfig | None = None) -> tuple[dict, FittedModel]:
    model_cfg = config["model"]
    r = float(model_cfg["r"])
    template = penalty_from_config(model_cfg, seed)
    cv_summary = None
    if fixed is None:
        cv_template = replace(template, n_iter=int(cv_cfg.get("n_iter") or template.n_iter))
        cv = cross_validate(data.X, data.Y, _grid(cv_cfg, d, r), cv_template, folds=int(cv_cfg["folds"]),
                            mode=spec.mode)
        best = replace(cv.best, n_iter=template.n_iter)
        cv_summary = cv.rows()
    else:
        best = fixed
    model = fit(data.X, data.Y, best, spec.mode, eval_set=(data.X_test, data.Y_test))
    P_hat = np.array(model.report.P_hat).reshape(d, -1)
    result = {
        "test_r2": r2_score(data.Y_test, model.predict(data.X_test)),
        "feature_score": _safe_feature_score(data.P, P_hat, spec.s),
        "s_hat": model.report.s_hat,
        "selected": best.to_dict(),
        "mu_unscaled": best.mu * float(d) ** ((2.0 - r) / r),
        "report": model.report.to_dict(),
        "iteration_features": _iteration_features(model, data.P, spec.s),
        "cv": cv_summary,
        "noise_level": noise_level_score(data.Y_test, spec.sigma) if spec.sigma > 0 else 1.0,
    }
    return result, model


def _baseline_task(data, config: dict, seed: int) -> dict:
    base = config["baseline"]
    m = int(base.get("m") or config["model"]["m"])
    weights = [weight_sequence_from_dict({"kind": "geometric", "rho": rho}) for rho in config["cv"]["rho_grid"]]
    r = float(config["model"]["r"])
    d = data.X.shape[1]
    # raw values plus values divided by d**((2-r)/r), so the baseline sees both scalings
    lambdas = [float(v) for v in base.get("lambda_grid") or []]
    lambdas += [scaled(float(v), d, r) for v in base.get("lambda_grid_scaled") or []]
    model = kernel_ridge_baseline(data.X, data.Y, weights, lambdas, m, seed,
                                  folds=int(config["cv"]["folds"]), k_max=int(config["model"]["k_max"]), r=r)
    return {
        "test_r2": r2_score(data.Y_test, model.predict(data.X_test)),
        "selected": model.report.config,
        "cv": model.report.extra["cv_table"],
    }


def _export_projected(out: Path, stem: str, data, P_hat: np.ndarray) -> None:
    """Projected covariates ``P_hat^T x`` with responses, for external regressors."""
    k = P_hat.shape[1]
    header = [f"z_{j + 1}" for j in range(k)] + ["y"]
    for split, X, Y in (("train", data.X, data.Y), ("test", data.X_test, data.Y_test)):
        Z = X @ P_hat
        write_csv(out / f"{stem}_{split}.csv", header, (list(z) + [y] for z, y in zip(Z, Y)))


def _exp1_task(args) -> dict:
    config, d, n, rep, out = args
    seed = task_seed(config["seed"], 1, d, n, rep)
    data_cfg = config["data"]
    spec = SyntheticSpec(dataset=data_cfg["dataset"], d=d, n=n, n_test=int(data_cfg["n_test"]),
                         sigma=float(data_cfg["sigma"]), mode=data_cfg["mode"], seed=seed)
    data = make_dataset(spec)
    result, model = _regfeal_task(data, spec, config, seed, d, config["cv"])
    payload = {"d": d, "n": n, "replicate": rep, "seed": seed, "regfeal": result}
    if config.get("baseline", {}).get("enabled", True):
        payload["baseline"] = _baseline_task(data, config, seed)
    if config.get("export_projected", False):
        P_hat = np.array(model.report.P_hat).reshape(d, -1)
        _export_projected(Path(out) / "projected", f"d{d}_n{n}_rep{rep}", data, P_hat)
    dump_json(Path(out) / "raw" / f"d{d}_n{n}_rep{rep}.json", payload)
    return payload


def _exp2_task(args) -> dict:
    config, rep, out = args
    data_cfg = config["data"]
    d, n = int(data_cfg["d"]), int(data_cfg["n"])
    seed = task_seed(config["seed"], 2, d, n, rep)
    spec = SyntheticSpec(dataset=data_cfg["dataset"], d=d, n=n, n_test=int(data_cfg["n_test"]),
                         sigma=float(data_cfg["sigma"]), mode=data_cfg["mode"], seed=seed)
    data = make_dataset(spec)
    m_list = sorted(int(m) for m in config["m_list"])
    # hyper-parameters are selected at the largest m and reused for every other m
    top_config = _merge(config, {"model": {"m": m_list[-1]}})
    top, _ = _regfeal_task(data, spec, top_config, seed, d, config["cv"])
    chosen = PenaltyConfig.from_dict(top["selected"])
    runs = {}
    for m in m_list:
        if m == m_list[-1]:
            runs[m] = top
        else:
            runs[m], _ = _regfeal_task(data, spec, config, seed, d, None, fixed=replace(chosen, m=m))
    payload = {"d": d, "n": n, "replicate": rep, "seed": seed, "runs": {str(m): runs[m] for m in m_list}}
    dump_json(Path(out) / "raw" / f"rep{rep}.json", payload)
    return payload


def _exp3_task(args) -> dict:
    config, rep, out = args
    data_cfg = config["data"]
    d, n = int(data_cfg["d"]), int(data_cfg["n"])
    seed = task_seed(config["seed"], 3, d, n, rep)
    spec = SyntheticSpec(dataset=data_cfg["dataset"], d=d, n=n, n_test=int(data_cfg["n_test"]),
                         sigma=float(data_cfg["sigma"]), mode=data_cfg["mode"], seed=seed)
    data = make_dataset(spec)
    result, _ = _regfeal_task(data, spec, config, seed, d, config["cv"])
    payload = {"d": d, "n": n, "replicate": rep, "seed": seed, "regfeal": result}
    dump_json(Path(out) / "raw" / f"rep{rep}.json", payload)
    return payload


# ------------------------------------------------------------------ aggregation


def _mean_se(values: list[float]) -> tuple[float, float, int]:
    arr = np.array([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan"), 0
    se = float(arr.std() / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se, int(arr.size)


def _trajectory_rows(key: list, report: dict) -> Iterable[list]:
    for it in report["iterations"]:
        for a, (eta, imp) in enumerate(zip(it["eta"], it["importance"])):
            yield key + [it["iteration"], a + 1, eta, imp]


def _degree_rows(key: list, report: dict) -> Iterable[list]:
    for it in report["iterations"]:
        for k, count in enumerate(it["degree_counts"]):
            yield key + [it["iteration"], k, count]


def _iteration_rows(key: list, result: dict) -> Iterable[list]:
    for it, (s_hat, score) in zip(result["report"]["iterations"], result["iteration_features"]):
        yield key + [it["iteration"], it["train_r2"], it["test_r2"], it["m_unique"], it["view"], s_hat, score]


TRAJ_HEADER = ["iteration", "coordinate", "eta", "importance"]
DEGREE_HEADER = ["iteration", "degree", "count"]
ITER_HEADER = ["iteration", "train_r2", "test_r2", "m_unique", "view", "s_hat", "feature_score"]


def _aggregate_exp1(results: list[dict], out: Path) -> None:
    per = []
    for res in results:
        key = [res["d"], res["n"], res["replicate"], res["seed"]]
        reg = res["regfeal"]
        per.append(key + ["regfeal", reg["test_r2"], reg["feature_score"], reg["s_hat"], reg["noise_level"]])
        if "baseline" in res:
            per.append(key + ["kernel_ridge", res["baseline"]["test_r2"], float("nan"), "", reg["noise_level"]])
    write_csv(out / "replicates.csv",
              ["d", "n", "replicate", "seed", "method", "test_r2", "feature_score", "s_hat", "noise_level"], per)
    groups: dict[tuple, list] = {}
    for row in per:
        groups.setdefault((row[0], row[1], row[4]), []).append(row)
    agg = []
    for (d, n, method), rows in sorted(groups.items()):
        r2 = _mean_se([r[5] for r in rows])
        fs = _mean_se([r[6] for r in rows])
        noise = _mean_se([r[8] for r in rows])
        agg.append([d, n, method, r2[2], r2[0], r2[1], fs[0], fs[1], noise[0]])
    write_csv(out / "aggregate.csv",
              ["d", "n", "method", "replicates", "test_r2_mean", "test_r2_se", "feature_score_mean",
               "feature_score_se", "noise_level_mean"], agg)
    _write_series(results, out, lambda res: [res["d"], res["n"], res["replicate"]], ["d", "n", "replicate"],
                  lambda res: res["regfeal"])


def _write_series(results, out: Path, key_fn, key_header, pick) -> None:
    traj, degs, iters = [], [], []
    for res in results:
        key = key_fn(res)
        sub = pick(res)
        traj.extend(_trajectory_rows(key, sub["report"]))
        degs.extend(_degree_rows(key, sub["report"]))
        iters.extend(_iteration_rows(key, sub))
    write_csv(out / "eta_trajectories.csv", key_header + TRAJ_HEADER, traj)
    write_csv(out / "degree_histograms.csv", key_header + DEGREE_HEADER, degs)
    write_csv(out / "iterations.csv", key_header + ITER_HEADER, iters)


def _aggregate_exp2(results: list[dict], out: Path) -> None:
    per = []
    flat = []
    for res in results:
        for m, run in res["runs"].items():
            per.append([int(m), res["replicate"], res["seed"], run["test_r2"], run["feature_score"], run["s_hat"],
                        run["report"]["iterations"][-1]["m_unique"]])
            flat.append({"m": int(m), "replicate": res["replicate"], "regfeal": run})
    per.sort(key=lambda r: (r[0], r[1]))
    write_csv(out / "replicates.csv", ["m", "replicate", "seed", "test_r2", "feature_score", "s_hat", "m_unique"],
              per)
    agg = []
    for m in sorted({r[0] for r in per}):
        rows = [r for r in per if r[0] == m]
        r2, fs = _mean_se([r[3] for r in rows]), _mean_se([r[4] for r in rows])
        agg.append([m, r2[2], r2[0], r2[1], fs[0], fs[1]])
    write_csv(out / "aggregate.csv",
              ["m", "replicates", "test_r2_mean", "test_r2_se", "feature_score_mean", "feature_score_se"], agg)
    flat.sort(key=lambda r: (r["m"], r["replicate"]))
    _write_series(flat, out, lambda res: [res["m"], res["replicate"]], ["m", "replicate"], lambda res: res["regfeal"])


def _aggregate_exp3(results: list[dict], out: Path) -> None:
    per = [[res["replicate"], res["seed"], res["regfeal"]["test_r2"], res["regfeal"]["feature_score"],
            res["regfeal"]["s_hat"]] for res in results]
    write_csv(out / "replicates.csv", ["replicate", "seed", "test_r2", "feature_score", "s_hat"], per)
    _write_series(results, out, lambda res: [res["replicate"]], ["replicate"], lambda res: res["regfeal"])
    # per-iteration mean and standard error across replicates
    n_iter = min(len(res["regfeal"]["report"]["iterations"]) for res in results)
    agg = []
    for i in range(n_iter):
        its = [res["regfeal"]["report"]["iterations"][i] for res in results]
        feats = [res["regfeal"]["iteration_features"][i][1] for res in results]
        tr, te, fs = _mean_se([x["train_r2"] for x in its]), _mean_se([x["test_r2"] for x in its]), _mean_se(feats)
        imp = np.mean([x["importance"] for x in its], axis=0)
        agg.append([i, tr[0], tr[1], te[0], te[1], fs[0], fs[1]] + list(imp))
    d = len(results[0]["regfeal"]["report"]["iterations"][0]["eta"])
    write_csv(out / "aggregate.csv",
              ["iteration", "train_r2_mean", "train_r2_se", "test_r2_mean", "test_r2_se", "feature_score_mean",
               "feature_score_se"] + [f"importance_{a + 1}" for a in range(d)], agg)


# ------------------------------------------------------------------------ driver


def run_experiment(kind: str, config: dict, out_dir: str | Path) -> list[dict]:
    """Run one experiment with a resolved config; returns the per-task payloads."""
    out = Path(out_dir)
    (out / "raw").mkdir(parents=True, exist_ok=True)
    dump_json(out / "config.json", config)
    threads = int(config.get("threads") or 1)
    reps = range(int(config["replicates"]))
    start = time.perf_counter()
    if kind == "exp1":
        if config.get("export_projected", False):
            (out / "projected").mkdir(exist_ok=True)
        tasks = [(config, int(d), int(n), rep, str(out))
                 for d in config["data"]["d_list"] for n in config["data"]["n_list"] for rep in reps]
        results = _pool_map(_exp1_task, tasks, threads)
        _aggregate_exp1(results, out)
    elif kind == "exp2":
        results = _pool_map(_exp2_task, [(config, rep, str(out)) for rep in reps], threads)
        _aggregate_exp2(results, out)
    elif kind == "exp3":
        results = _pool_map(_exp3_task, [(config, rep, str(out)) for rep in reps], threads)
        _aggregate_exp3(results, out)
    else:
        raise ValueError(f"unknown experiment {kind!r}")
    dump_json(out / "timing.json", {"wall_seconds": time.perf_counter() - start, "threads": threads})
    return results
