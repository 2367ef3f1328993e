"""Command-line interface.

Subcommands ``gen``, ``fit``, ``cv``, ``score``, ``exp1``, ``exp2`` and
``exp3`` share ``--config`` (YAML), ``--seed``, ``--out``, ``--threads`` and
repeated ``--set key=value`` overrides. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import os
import sys
import time
from pathlib import Path

import numpy as np

from .datagen import SyntheticSpec, make_dataset, read_dataset, write_dataset
from .experiments import (
    DEFAULTS,
    _COMMON,
    _grid,
    _merge,
    apply_override,
    dump_json,
    penalty_from_config,
    resolve_config,
    run_experiment,
    write_csv,
)
from .metrics import feature_score, r2_score
from .penalty import estimate_dimension, extract_features
from .solver import FittedModel, FitReport, IterationRecord, cross_validate, fit

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

COMMAND_DEFAULTS = {
    "gen": {"seed": 0, "data": {"dataset": "sinus", "d": 10, "s": 2, "n": 1000, "n_test": 5000, "sigma": 0.0,
                                "mode": "feature"}},
    "fit": {"seed": 0, "mode": None, "model": copy.deepcopy(_COMMON["model"])},
    "cv": {"seed": 0, "mode": None, "threads": 1, "model": copy.deepcopy(_COMMON["model"]),
           "cv": copy.deepcopy(_COMMON["cv"])},
    "score": {"export_projected": False},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regfeal", description="Regularised Hermite-feature regression with feature learning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML configuration file")
        p.add_argument("--seed", type=int, help="base random seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--threads", type=int, help="worker processes (fallback: REGFEAL_THREADS)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, value parsed as YAML; repeatable")
        return p

    common(sub.add_parser("gen", help="generate a synthetic dataset"))
    p = common(sub.add_parser("fit", help="fit a model on a dataset directory"))
    p.add_argument("--data", type=Path, required=True)
    p = common(sub.add_parser("cv", help="cross-validate (rho, mu) on a dataset directory"))
    p.add_argument("--data", type=Path, required=True)
    p = common(sub.add_parser("score", help="score a fitted model on a dataset's test split"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="model.json written by 'fit'")
    for name, text in (("exp1", "dimension and sample-size study with kernel-ridge baseline"),
                       ("exp2", "number-of-features study"), ("exp3", "training dynamics over iterations")):
        common(sub.add_parser(name, help=text))
    return parser


def _load_yaml(path: Path | None) -> dict:
    if path is None:
        return {}
    import yaml

    try:
        loaded = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise UsageError(f"config {path} must be a mapping")
    return loaded


def _resolve(args) -> dict:
    file_config = _load_yaml(args.config)
    if args.command in DEFAULTS:
        config = resolve_config(args.command, file_config, ())
    else:
        config = _merge(COMMAND_DEFAULTS[args.command], file_config)
        config["experiment"] = args.command
    if args.seed is not None:
        config["seed"] = args.seed
    threads = args.threads
    if threads is None and os.environ.get("REGFEAL_THREADS"):
        try:
            threads = int(os.environ["REGFEAL_THREADS"])
        except ValueError as exc:
            raise UsageError("REGFEAL_THREADS must be an integer") from exc
    if threads is not None:
        if threads < 1:
            raise UsageError("thread count must be positive")
        config["threads"] = threads
    for item in args.overrides:
        try:
            config = apply_override(config, item)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return config


def _read(data_dir: Path):
    if not (data_dir / "train.csv").exists():
        raise DataError(f"{data_dir}/train.csv not found")
    try:
        return read_dataset(data_dir)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"malformed dataset in {data_dir}: {exc}") from exc


def _mode(config: dict, meta: dict) -> str:
    mode = config.get("mode") or meta.get("spec", {}).get("mode") or "feature"
    if mode not in ("variable", "feature"):
        raise UsageError(f"unknown mode {mode!r}")
    return mode


def cmd_gen(config: dict, out: Path) -> None:
    data_cfg = dict(config["data"])
    data_cfg.setdefault("seed", config["seed"])
    try:
        spec = SyntheticSpec(**data_cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid data config: {exc}") from exc
    write_dataset(make_dataset(spec), spec, out)


def _model_payload(model: FittedModel) -> dict:
    return {"model": model.to_dict(), "report": model.report.to_dict()}


def load_model(path: Path) -> FittedModel:
    import json

    try:
        payload = json.loads(Path(path).read_text())
        model = FittedModel.from_dict(payload["model"])
        rep = payload.get("report")
        if rep is not None:
            iterations = [IterationRecord(**it) for it in rep.get("iterations", [])]
            model.report = FitReport(**{**rep, "iterations": iterations})
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc
    return model


def cmd_fit(config: dict, out: Path, data_dir: Path) -> None:
    data, meta = _read(data_dir)
    mode = _mode(config, meta)
    try:
        penalty = penalty_from_config(config["model"], config["seed"])
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc
    eval_set = (data.X_test, data.Y_test) if data.X_test.shape[0] >= 2 else None
    model = fit(data.X, data.Y, penalty, mode, eval_set=eval_set)
    dump_json(out / "model.json", _model_payload(model))
    dump_json(out / "report.json", model.report.to_dict())
    dump_json(out / "timing.json", {"wall_seconds": model.wall_time})


def cmd_cv(config: dict, out: Path, data_dir: Path) -> None:
    data, meta = _read(data_dir)
    mode = _mode(config, meta)
    d = data.X.shape[1]
    try:
        template = penalty_from_config(config["model"], config["seed"])
        cv_cfg = config["cv"]
        if cv_cfg.get("n_iter"):
            template = penalty_from_config(config["model"], config["seed"], n_iter=int(cv_cfg["n_iter"]))
        grid = _grid(cv_cfg, d, template.r)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid cv config: {exc}") from exc
    if not grid:
        raise UsageError("empty cross-validation grid")
    start = time.perf_counter()
    result = cross_validate(data.X, data.Y, grid, template, folds=int(cv_cfg["folds"]), mode=mode,
                            n_jobs=int(config.get("threads") or 1))
    scale = float(d) ** ((2.0 - template.r) / template.r)
    rows = [[row["weights"].get("rho", row["weights"].get("M")), row["mu"], row["mu"] * scale, row["mean"], row["std"]]
            + row["scores"] for row in result.rows()]
    write_csv(out / "cv_table.csv", ["rho", "mu", "mu_unscaled", "mean_r2", "std_r2"]
              + [f"fold_{k + 1}" for k in range(int(cv_cfg["folds"]))], rows)
    dump_json(out / "best.json", result.best.to_dict())
    dump_json(out / "timing.json", {"wall_seconds": time.perf_counter() - start})


def cmd_score(config: dict, out: Path, data_dir: Path, model_path: Path) -> None:
    data, meta = _read(data_dir)
    model = load_model(model_path)
    if data.X.shape[1] != model.d:
        raise DataError(f"dataset has {data.X.shape[1]} columns, model expects {model.d}")
    if data.X_test.shape[0] < 2:
        raise DataError("dataset has no usable test split")
    scores = {"test_r2": r2_score(data.Y_test, model.predict(data.X_test)),
              "train_r2": r2_score(data.Y, model.predict(data.X))}
    s_hat = estimate_dimension(model.state.eta, model.state.r)
    P_hat = extract_features(model.state, s_hat)
    scores["s_hat"] = s_hat
    if data.P.shape[1] > 0 and s_hat > 0:
        scores["feature_score"] = feature_score(data.P, P_hat, data.P.shape[1])
    dump_json(out / "scores.json", scores)
    if config.get("export_projected"):
        header = [f"z_{j + 1}" for j in range(s_hat)] + ["y"]
        for split, X, Y in (("train", data.X, data.Y), ("test", data.X_test, data.Y_test)):
            write_csv(out / f"projected_{split}.csv", header, (list(z) + [y] for z, y in zip(X @ P_hat, Y)))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve(args)
        out = args.out
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {out}: {exc}") from exc
        dump_json(out / "config.json", config)
        if args.command == "gen":
            cmd_gen(config, out)
        elif args.command == "fit":
            cmd_fit(config, out, args.data)
        elif args.command == "cv":
            cmd_cv(config, out, args.data)
        elif args.command == "score":
            cmd_score(config, out, args.data, args.model)
        else:
            try:
                run_experiment(args.command, config, out)
            except (TypeError, KeyError) as exc:
                raise UsageError(f"invalid experiment config: {exc}") from exc
    except UsageError as exc:
        print(f"regfeal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"regfeal: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        print(f"regfeal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"regfeal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
