"""Command-line front end.

Every subcommand reads a JSON config (``--config``); the flags ``--input``,
``--output``, ``--seed`` and ``--threads`` override the matching config
fields. Results go to the output directory as ``result.json`` plus tidy CSVs,
next to a ``manifest.json`` recording input digests, seed, versions and wall
time. Exit codes: 0 success, 2 invalid configuration or data, 3 numerical
failure; errors are reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .aftdantzig import DantzigFit, cross_validate_dantzig, dantzig_aft, ridge_weights
from .coxcore import CoxFit, fit_mple
from .coxnet import PathFit, cross_validate
from .cqr import CqrFit, QuantileGrid, fit_cqr
from .lp import LPError
from .mlp import CoxNetFit, train_cox_net
from .penalties import PenaltyError, PenaltySpec
from .scr import ScrFit, fit_scr, predict_transitions
from .screening import ScreenResult, concordance_screen, marginal_cox_screen
from .simulate import CompetingRisksData, SimSpec, simulate
from .spares import (FixedSelector, FusedHdcqrResult, LassoSelector, LinearData,
                     ResampleError, ResampleInference, ScreeningSelector, fused_hdcqr, spares_fit)
from .survdata import (DataError, IllnessDeathDataset, SchemaError, load_csv, standardize,
                       write_csv)
from .survsvm import SvmModel, fit_hybrid_svm
from .treesforest import BoostFit, Forest, bagging_fit, boost_fit, rsf_fit

COMMANDS = ("simulate", "fit", "predict", "screen", "spares", "cqr", "dantzig", "svm", "forest",
            "boost", "scr", "cv")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(cfg, key, cmd):
    if key not in cfg or cfg[key] is None:
        raise ConfigError(f"missing required field '{key}' for command '{cmd}'")
    return cfg[key]


def _seed(cfg, cmd, needed=True):
    if cfg.get("seed") is None:
        if needed:
            raise ConfigError(f"missing required field 'seed': command '{cmd}' is stochastic")
        return 0
    seed = cfg["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("field 'seed' must be a non-negative integer")
    return seed


def _input_path(cfg, cmd, key="input"):
    p = Path(_require(cfg, key, cmd))
    if not p.is_file():
        raise ConfigError(f"{key} file not found: {p}")
    return p


def _load_linear(path, schema):
    response = schema.get("response", "y")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if response not in header:
        raise SchemaError(f"{path}: response column '{response}' not found")
    covs = schema.get("covariates") or [h for h in header if h != response]
    idx = [header.index(c) for c in covs]
    try:
        data = np.array([[float(r[j]) for j in [header.index(response)] + idx] for r in body])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from None
    return LinearData(data[:, 1:], data[:, 0], tuple(covs))


def _load(cfg, cmd, inputs):
    path = _input_path(cfg, cmd)
    inputs.append(path)
    schema = dict(cfg.get("schema") or {})
    if schema.get("mode") == "linear":
        return _load_linear(path, schema)
    if cmd == "scr":
        schema.setdefault("mode", "illness_death")
    return load_csv(path, schema)


def _standardized(ds):
    sds = standardize(ds)
    return sds, {"means": sds.column_means, "sds": sds.column_sds}


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------------------
# commands; each returns (result dict, {file name: writer(path)})


def cmd_simulate(cfg, inputs):
    spec_d = dict(_require(cfg, "spec", "simulate"))
    spec_d["seed"] = _seed(cfg, "simulate")
    try:
        spec = SimSpec.from_dict(spec_d)
    except TypeError as exc:
        raise ConfigError(f"invalid simulation spec: {exc}") from None
    data = simulate(spec)
    if isinstance(data, CompetingRisksData):
        names = [f"x{j + 1}" for j in range(data.X.shape[1])]

        def writer(path):
            _write_rows(path, ["time", "cause", *names],
                        ([float(t), int(c), *map(float, x)]
                         for t, c, x in zip(data.time, data.cause, data.X)))
        summary = {"n": int(data.time.size),
                   "cause_counts": np.bincount(data.cause, minlength=3).tolist()}
    else:
        def writer(path):
            write_csv(data, path)
        if isinstance(data, IllnessDeathDataset):
            summary = {"n": data.n, "progressions": int(data.d1.sum()),
                       "deaths": int(data.d2.sum())}
        else:
            summary = {"n": data.n, "events": data.n_events}
    return {"model_type": "simulation", "spec": spec.to_dict(), "summary": summary}, \
        {"data.csv": writer}


def _penalty(cfg):
    pen = dict(cfg.get("penalty") or {})
    kind = pen.pop("kind", None) or cfg.get("method", "cox-lasso").split("-", 1)[1]
    pen.pop("eta", None)
    try:
        return PenaltySpec(kind, 1.0, **pen)
    except TypeError as exc:
        raise ConfigError(f"invalid penalty options: {exc}") from None


def _path_result(ds, cfg, cmd, threads):
    sds, scaling = _standardized(ds)
    spec = _penalty(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        path = cross_validate(sds, spec, k=int(cfg.get("folds", 10)), seed=_seed(cfg, cmd),
                              n_etas=int(cfg.get("n_etas", 50)),
                              eta_min_ratio=float(cfg.get("eta_min_ratio", 0.01)),
                              threads=threads)
    res = {"model_type": "cox_path", "model": path.to_dict(), "standardization": scaling}
    files = {"path.csv": path.write_tidy_csv,
             "cv.csv": lambda p: _write_rows(p, ["eta", "cv_score"],
                                             zip(path.etas, path.cv_scores))}
    return res, files


def cmd_fit(cfg, inputs, threads=1):
    method = cfg.get("method", "cox")
    ds = _load(cfg, "fit", inputs)
    if method == "cox":
        fit = fit_mple(ds)
        return {"model_type": "cox", "model": fit.to_dict()}, {}
    if method == "cox-net":
        arch = cfg.get("architecture", {})
        fit = train_cox_net(ds, tuple(arch.get("hidden", (16,))), float(arch.get("lr", 0.5)),
                            int(arch.get("epochs", 500)), _seed(cfg, "fit"),
                            float(arch.get("dropout", 0.0)))
        return {"model_type": "cox_net", "model": fit.to_dict()}, {}
    if method.startswith("cox-"):
        return _path_result(ds, cfg, "fit", threads)
    raise ConfigError(f"unknown fit method {method!r} (cox, cox-net, cox-<penalty>)")


def cmd_cv(cfg, inputs, threads=1):
    ds = _load(cfg, "cv", inputs)
    cfg = dict(cfg)
    cfg.setdefault("method", "cox-lasso")
    return _path_result(ds, cfg, "cv", threads)


def cmd_screen(cfg, inputs, threads=1):
    ds = _load(cfg, "screen", inputs)
    method = cfg.get("method", "cox")
    fn = {"cox": marginal_cox_screen, "concordance": concordance_screen}.get(method)
    if fn is None:
        raise ConfigError(f"unknown screening method {method!r}")
    res = fn(ds, d=cfg.get("d"), cutoff=cfg.get("cutoff"), threads=threads)
    names = ds.feature_names
    return {"model_type": "screen", "model": res.to_dict()}, {
        "kept.csv": lambda p: _write_rows(p, ["j", "feature", "score"],
                                          ([int(j), names[j], float(res.scores[j])]
                                           for j in res.kept))}


def _selector(cfg):
    sel = dict(cfg.get("selector") or {"kind": "lasso"})
    kind = sel.pop("kind", "lasso")
    if kind == "lasso":
        return LassoSelector(sel.get("eta"), int(sel.get("k", 5)), int(sel.get("n_etas", 30)))
    if kind == "screen":
        return ScreeningSelector(sel.get("d"), sel.get("method", "cox"))
    if kind == "fixed":
        return FixedSelector(tuple(int(i) for i in _require(sel, "indices", "selector")))
    raise ConfigError(f"unknown selector kind {kind!r}")


def cmd_spares(cfg, inputs, threads=1):
    data = _load(cfg, "spares", inputs)
    family = cfg.get("family", "linear" if isinstance(data, LinearData) else "cox")
    if isinstance(family, dict):
        family = ("cqr", family["taus"])
    res = spares_fit(data, _selector(cfg), family, B=int(cfg.get("B", 100)),
                     seed=_seed(cfg, "spares"), threads=threads,
                     bias_correction=bool(cfg.get("bias_correction", False)),
                     split_correction=bool(cfg.get("split_correction", False)))
    return {"model_type": "spares", "model": res.to_dict()}, {"inference.csv": res.write_csv}


def cmd_cqr(cfg, inputs, threads=1):
    ds = _load(cfg, "cqr", inputs)
    taus = cfg.get("taus")
    grid = QuantileGrid(taus) if taus else QuantileGrid.default()
    if cfg.get("inference"):
        res = fused_hdcqr(ds, _selector(cfg), grid, B=int(cfg.get("B", 100)),
                          seed=_seed(cfg, "cqr"), threads=threads)
        return {"model_type": "fused_hdcqr", "model": res.to_dict()}, {"inference.csv": res.write_csv}
    fit = fit_cqr(ds, grid, refine=int(cfg.get("refine", 1)))
    return {"model_type": "cqr", "model": fit.to_dict()}, {"coefficients.csv": fit.write_csv}


def cmd_dantzig(cfg, inputs, threads=1):
    ds = _load(cfg, "dantzig", inputs)
    weights = ridge_weights(ds) if cfg.get("weights") == "ridge" else None
    if cfg.get("eta_q") is not None:
        fit = dantzig_aft(ds, float(cfg["eta_q"]), weights)
        extra = {}
    else:
        cv = cross_validate_dantzig(ds, k=int(cfg.get("folds", 5)), seed=_seed(cfg, "dantzig"),
                                    n_etas=int(cfg.get("n_etas", 20)), weights=weights,
                                    threads=threads)
        fit = cv.fit
        extra = {"cv": {"etas": cv.etas, "errors": cv.cv_errors, "selected_eta": cv.selected_eta}}
    names = ds.feature_names
    return {"model_type": "dantzig", "model": fit.to_dict(), **extra}, {
        "coefficients.csv": lambda p: _write_rows(p, ["j", "feature", "beta_j"],
                                                  ([j, names[j], float(b)]
                                                   for j, b in enumerate(fit.beta)))}


def cmd_svm(cfg, inputs, threads=1):
    ds = _load(cfg, "svm", inputs)
    m = fit_hybrid_svm(ds, cfg.get("kernel", "linear"), float(cfg.get("gamma", 1.0)),
                       float(cfg.get("mix", 0.5)), cfg.get("bandwidth"),
                       float(cfg.get("margin", 1.0)), int(cfg.get("max_iter", 500)),
                       seed=_seed(cfg, "svm"))
    return {"model_type": "svm", "model": m.to_dict()}, {}


def cmd_forest(cfg, inputs, threads=1):
    ds = _load(cfg, "forest", inputs)
    kind = cfg.get("kind", "rsf")
    opts = cfg.get("tree_opts")
    seed = _seed(cfg, "forest")
    B = int(cfg.get("B", 100))
    if kind == "rsf":
        f = rsf_fit(ds, B, cfg.get("mtry"), opts, seed, threads)
    elif kind == "bagging":
        f = bagging_fit(ds, B, opts, seed, threads)
    else:
        raise ConfigError(f"unknown forest kind {kind!r} (rsf, bagging)")
    return {"model_type": "forest", "model": f.to_dict(), "oob_c_index": f.oob_c_index}, {}


def cmd_boost(cfg, inputs, threads=1):
    ds = _load(cfg, "boost", inputs)
    f = boost_fit(ds, int(cfg.get("M", 100)), float(cfg.get("w", 0.1)),
                  int(cfg.get("tree_depth", 2)), _seed(cfg, "boost"),
                  float(cfg.get("subsample", 1.0)), int(cfg.get("min_leaf", 5)))
    return {"model_type": "boost", "model": f.to_dict()}, {
        "loss.csv": lambda p: _write_rows(p, ["step", "loss"], enumerate(f.loss_trace))}


def cmd_scr(cfg, inputs, threads=1):
    ds = _load(cfg, "scr", inputs)
    mode = cfg.get("mode", "linear")
    fit = fit_scr(ds, mode, grid=cfg.get("grid"), epochs=int(cfg.get("epochs", 300)),
                  bootstrap_B=int(cfg.get("bootstrap_B", 0)), seed=_seed(cfg, "scr"),
                  threads=threads)
    files = {}
    pred = cfg.get("predict")
    if pred:
        curves = predict_transitions(fit, pred.get("x", np.zeros(ds.p)), pred["grid"])
        files["curves.csv"] = lambda p: _write_rows(
            p, ["t", "pfs", "cif_prog", "cif_death"],
            zip(curves["t"], curves["pfs"], curves["cif_prog"], curves["cif_death"]))
    return {"model_type": "scr", "model": fit.to_dict()}, files


LOADERS = {
    "cox": CoxFit.from_dict, "cox_path": PathFit.from_dict, "cox_net": CoxNetFit.from_dict,
    "screen": ScreenResult.from_dict, "spares": ResampleInference.from_dict,
    "cqr": CqrFit.from_dict, "fused_hdcqr": FusedHdcqrResult.from_dict,
    "dantzig": DantzigFit.from_dict, "svm": SvmModel.from_dict, "forest": Forest.from_dict,
    "boost": BoostFit.from_dict, "scr": ScrFit.from_dict,
}


def load_result(path):
    """``(model_type, object, raw dict)`` from a ``result.json``."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    kind = d.get("model_type")
    if kind == "simulation":
        return kind, SimSpec.from_dict(d["spec"]), d
    if kind == "predictions":
        return kind, d, d
    if kind not in LOADERS:
        raise ConfigError(f"{path}: unknown model_type {kind!r}")
    return kind, LOADERS[kind](d["model"]), d


def cmd_predict(cfg, inputs, threads=1):
    model_path = _input_path(cfg, "predict", "model")
    inputs.append(model_path)
    kind, model, raw = load_result(model_path)
    schema = dict(cfg.get("schema") or {})
    path = _input_path(cfg, "predict")
    inputs.append(path)
    X = _covariates_only(path, schema)
    cols = {}
    if kind == "cox":
        cols["linear_predictor"] = model.linear_predictor(X)
    elif kind == "cox_path":
        sc = raw["standardization"]
        Z = (X - np.asarray(sc["means"])) / np.asarray(sc["sds"])
        cols["linear_predictor"] = Z @ model.selected_beta
    elif kind == "cox_net":
        cols["risk"] = model.risk(X)
    elif kind == "svm":
        cols["risk"] = model.risk_score(X)
        if model.intercept is not None:
            cols["log_time"] = model.predict_log_time(X)
    elif kind == "forest":
        cols["mortality"] = model.mortality(X)
    elif kind == "boost":
        cols["risk"] = model.predict(X)
    elif kind == "dantzig":
        cols["log_time"] = model.predict_log_time(X)
    elif kind == "cqr":
        for tau in cfg.get("taus", [0.5]):
            cols[f"q{tau}"] = model.predict_quantile(X, tau)
    elif kind == "scr":
        grid = _require(cfg, "grid", "predict")
        rows = []
        for i, x in enumerate(X):
            c = predict_transitions(model, x, grid)
            rows += [[i, float(t), float(a), float(b), float(e)]
                     for t, a, b, e in zip(c["t"], c["pfs"], c["cif_prog"], c["cif_death"])]
        return {"model_type": "predictions", "source": kind, "n": int(X.shape[0])}, {
            "predictions.csv": lambda p: _write_rows(p, ["row", "t", "pfs", "cif_prog",
                                                         "cif_death"], rows)}
    else:
        raise ConfigError(f"model_type {kind!r} does not support prediction")
    names = list(cols)
    return {"model_type": "predictions", "source": kind, "n": int(X.shape[0])}, {
        "predictions.csv": lambda p: _write_rows(p, ["row", *names],
                                                 ([i, *(float(cols[k][i]) for k in names)]
                                                  for i in range(X.shape[0])))}


def _covariates_only(path, schema):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    reserved = {"time", "event", "y1", "d1", "y2", "d2", "cause", "y",
                schema.get("time"), schema.get("event")}
    covs = schema.get("covariates") or [h for h in header if h not in reserved]
    try:
        idx = [header.index(c) for c in covs]
        return np.array([[float(r[j]) for j in idx] for r in rows[1:]], float).reshape(-1, len(idx))
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from None


HANDLERS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "screen": cmd_screen, "spares": cmd_spares, "cqr": cmd_cqr, "dantzig": cmd_dantzig,
            "svm": cmd_svm, "forest": cmd_forest, "boost": cmd_boost, "scr": cmd_scr,
            "cv": cmd_cv}


# ---------------------------------------------------------------------------
# driver


def run(config: dict) -> int:
    """Execute one configured command, writing artifacts; returns the exit code.

    Raises on failure; :func:`main` maps exceptions to exit codes.
    """
    cfg = dict(config)
    cmd = cfg.get("command")
    if cmd not in COMMANDS:
        raise ConfigError(f"unknown command {cmd!r}; choose from {', '.join(COMMANDS)}")
    out = Path(_require(cfg, "output", cmd))
    threads = int(cfg.get("threads") or 1)
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    t0 = time.perf_counter()
    inputs = []
    handler = HANDLERS[cmd]
    if cmd == "simulate":
        result, files = handler(cfg, inputs)
    else:
        result, files = handler(cfg, inputs, threads)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(dumps(result), encoding="utf-8")
    for name, writer in files.items():
        writer(out / name)
    manifest = {
        "command": cmd,
        "config": {k: v for k, v in cfg.items()},
        "seed": cfg.get("seed"),
        "threads": threads,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": ["result.json", *files],
        "versions": {"hdsurv": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_time_s": time.perf_counter() - t0,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    (out / "manifest.json").write_text(dumps(manifest), encoding="utf-8")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hdsurv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--input", help="input CSV (overrides config)")
        p.add_argument("--output", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="random seed (overrides config)")
        p.add_argument("--threads", type=int, help="worker threads (overrides config)")
        if name == "predict":
            p.add_argument("--model", help="result.json of a fitted model")
    return parser


def _error(exc, code):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = {}
        if args.config:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    cfg = json.load(fh)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
            if not isinstance(cfg, dict):
                raise ConfigError("config must be a JSON object")
        cfg["command"] = args.command
        for key in ("input", "output", "seed", "threads", "model"):
            v = getattr(args, key, None)
            if v is not None:
                cfg[key] = v
        return run(cfg)
    except (LPError, ResampleError, np.linalg.LinAlgError, FloatingPointError,
            OverflowError) as exc:
        return _error(exc, EXIT_NUMERICAL)
    except (ConfigError, DataError, PenaltyError, KeyError, TypeError, ValueError,
            OSError) as exc:
        return _error(exc, EXIT_VALIDATION)
    except (ArithmeticError, RuntimeError) as exc:
        return _error(exc, EXIT_NUMERICAL)


if __name__ == "__main__":
    sys.exit(main())
