"""Command-line interface: ``ssqlasso {simulate,fit,tune,path,replicate}``.

Settings come from an optional ``key = value`` config file, then from
flags (``--seed``, ``--tau``, ``--method``, ``--threads`` and the generic
``--set key=value``), later sources winning. Every command writes the
fully resolved settings to ``config_resolved.txt`` in its output
directory.

Exit status: 0 success, 1 usage error, 2 data/schema/IO error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines as bl
from . import em, io, metrics, simgen, tuning
from .em import NumericalError

log = logging.getLogger("ssqlasso")

THREADS_ENV = "SSQLASSO_THREADS"
METHODS = ("ssqlasso", "sslasso", "lasso")
TUNING_MODES = ("sic", "cv", "fixed")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _floats(text):
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _words(text):
    if isinstance(text, (tuple, list)):
        return tuple(str(v) for v in text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return float(text)


def _opt_floats(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return _floats(text)


@dataclass(frozen=True)
class ExperimentConfig:
    # estimation
    method: str = "ssqlasso"
    tau: float = 0.5
    tuning: str = "sic"
    baseline_tuning: Optional[str] = None  # overrides tuning for sslasso/lasso
    s0: float = 0.05
    s1: float = 1.0
    lam: Optional[float] = None
    start: str = "multistart"  # multistart | null
    test_mode: bool = False    # allows s0 == s1
    max_iter: int = 500
    delta: float = 1e-4
    v_k: float = 1e3
    # grids
    s0_min: float = 1e-3
    s0_max: Optional[float] = None  # default: s1 / 2
    n_s0: int = 20
    s1_values: tuple = (1.0, 2.0, 4.0)
    cv_folds: int = 5
    n_lambda: int = 100
    lambda_ratio: float = 1e-3
    path_s1: float = 1.0
    # scenario
    seed: int = 0
    n: int = 200
    p: int = 400
    corr: str = "ar1"
    rho: float = 0.5
    error: str = "normal"
    model: str = "homogeneous"
    coef_kind: str = "uniform"
    support_size: int = 15
    coef_low: float = 0.6
    coef_high: float = 0.8
    coef_values: Optional[tuple] = None
    intercept: float = 2.0
    clinical_q: int = 0
    # replication
    replicates: int = 1
    methods: Optional[tuple] = None  # default: (method,)
    taus: Optional[tuple] = None     # default: (tau,)
    errors: Optional[tuple] = None   # default: (error,)
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.tuning not in TUNING_MODES:
            raise ValueError(f"tuning must be one of {TUNING_MODES}, got {self.tuning!r}")
        if self.baseline_tuning is not None and self.baseline_tuning not in TUNING_MODES:
            raise ValueError(f"baseline_tuning must be one of {TUNING_MODES}, got {self.baseline_tuning!r}")
        if self.start not in ("multistart", "null"):
            raise ValueError(f"start must be 'multistart' or 'null', got {self.start!r}")
        for m in self.methods or ():
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r} in methods")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        # fail early on bad scenario names
        simgen.family_name(self.error)
        for e in self.errors or ():
            simgen.family_name(e)

    def lines(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name} = {v}")
        return out


_CONVERT = {
    "method": str, "tau": float, "tuning": str,
    "baseline_tuning": lambda t: None if str(t).strip().lower() in ("", "none") else str(t), "s0": float, "s1": float,
    "lam": _opt_float, "start": str, "test_mode": _bool, "max_iter": int, "delta": float,
    "v_k": float, "s0_min": float, "s0_max": _opt_float, "n_s0": int, "s1_values": _floats,
    "cv_folds": int, "n_lambda": int, "lambda_ratio": float, "path_s1": float, "seed": int,
    "n": int, "p": int, "corr": str, "rho": float, "error": str, "model": str,
    "coef_kind": str, "support_size": int, "coef_low": float, "coef_high": float,
    "coef_values": _opt_floats, "intercept": float, "clinical_q": int, "replicates": int,
    "methods": lambda t: _words(t) or None, "taus": _opt_floats,
    "errors": lambda t: _words(t) or None, "threads": int,
}
assert set(_CONVERT) == {f.name for f in fields(ExperimentConfig)}


def build_config(settings: dict) -> ExperimentConfig:
    kw = {}
    for key, raw in settings.items():
        if key not in _CONVERT:
            raise UsageError(f"unknown setting {key!r}")
        try:
            kw[key] = _CONVERT[key](raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {raw!r} ({exc})") from None
    try:
        return ExperimentConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- model construction ----------------------------------------------------------

def scenario(cfg: ExperimentConfig, tau: float, error: str):
    corr = simgen.CorrelationSpec(cfg.corr, cfg.rho)
    if cfg.coef_values is not None:
        coeff = simgen.CoefficientSpec("explicit", values=cfg.coef_values)
    else:
        coeff = simgen.CoefficientSpec(cfg.coef_kind, cfg.support_size, cfg.coef_low, cfg.coef_high)
    model = simgen.ModelSpec(cfg.model, coeff, cfg.intercept, cfg.clinical_q)
    return corr, model, simgen.ErrorSpec(error, tau)


def estimator_config(cfg: ExperimentConfig, method: str, tau: float, s0=None, s1=None):
    s0 = cfg.s0 if s0 is None else s0
    s1 = cfg.s1 if s1 is None else s1
    if method == "ssqlasso":
        return em.SsqlassoConfig(tau=tau, s0=s0, s1=s1, v_k=cfg.v_k, delta=cfg.delta,
                                 max_iter=cfg.max_iter, allow_equal_scales=cfg.test_mode)
    if method == "sslasso":
        return bl.SslassoConfig(s0=s0, s1=s1, v_k=cfg.v_k, delta=cfg.delta, max_iter=cfg.max_iter,
                                allow_equal_scales=cfg.test_mode)
    raise ValueError(f"no spike-and-slab config for {method!r}")


def tuning_grid(cfg: ExperimentConfig) -> tuning.TuningGrid:
    s1 = np.asarray(cfg.s1_values, dtype=float)
    top = cfg.s0_max if cfg.s0_max is not None else float(np.max(s1)) / 2.0
    return tuning.TuningGrid(np.geomspace(cfg.s0_min, top, cfg.n_s0), s1)


def fit_fixed(data, cfg: ExperimentConfig, method: str, tau: float):
    if method == "lasso":
        if cfg.lam is None:
            raise UsageError("fixed LASSO fit needs lam")
        return bl.fit_lasso(data, bl.LassoConfig(lam=cfg.lam))
    ecfg = estimator_config(cfg, method, tau)
    if cfg.start == "null":
        return em.fit(data, ecfg) if method == "ssqlasso" else bl.fit_sslasso(data, ecfg)
    return tuning.fit_multistart(data, ecfg)


def fit_tuned(data, cfg: ExperimentConfig, method: str, tau: float, rng):
    """Returns (fit, tuning object or None, chosen parameters dict)."""
    mode = cfg.tuning
    if method != "ssqlasso" and cfg.baseline_tuning is not None:
        mode = cfg.baseline_tuning
    if mode == "fixed":
        f = fit_fixed(data, cfg, method, tau)
        chosen = {"lam": cfg.lam} if method == "lasso" else {"s0": cfg.s0, "s1": cfg.s1}
        return f, None, chosen
    if method == "lasso":
        lams = bl.lambda_grid(data, cfg.n_lambda, cfg.lambda_ratio)
        t = tuning.tune_lasso(data, lams, mode, tau, cfg.cv_folds, rng)
        return t.best_fit, t, {"lam": t.best}
    template = estimator_config(cfg, method, tau, s0=cfg.s0_min, s1=max(cfg.s1_values))
    grid = tuning_grid(cfg)
    if mode == "sic":
        t = tuning.grid_search_sic(data, grid, template, tau=tau)
    else:
        loss = "check" if method == "ssqlasso" else "squared"
        t = tuning.cv_check_loss(data, grid, cfg.cv_folds, rng, template, loss=loss, tau=tau)
    return t.best_fit, t, {"s0": t.best[0], "s1": t.best[1]}


# -- output helpers ----------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise io.SchemaError(f"{out}: cannot create output directory ({exc.strerror})") from None
    if not os.access(out, os.W_OK):
        raise io.SchemaError(f"{out}: output directory is not writable")
    return out


def _echo_config(out: Path, cfg: ExperimentConfig, command: str):
    text = [f"# resolved settings for '{command}'"] + cfg.lines()
    (out / "config_resolved.txt").write_text("\n".join(text) + "\n", encoding="utf-8")


def _num(x):
    x = float(x)
    return x if np.isfinite(x) else None


def write_fit(out: Path, data, fit, tau: float, extra: Optional[dict] = None):
    eta = fit.eta if fit.eta is not None else np.full(data.p, np.nan)
    io.write_beta(out / "beta.csv", fit.beta, eta)
    io.write_alpha(out / "alpha.csv", fit.alpha)
    s = tuning.sic(data, fit, tau)
    summary = {
        "method": fit.method, "tau": tau, "n": data.n, "p": data.p, "q": data.q,
        "sigma": _num(fit.sigma), "theta": _num(fit.theta), "iterations": int(fit.iterations),
        "converged": bool(fit.converged), "sic": None if s.degenerate else _num(s.value),
        "sic_degenerate": bool(s.degenerate), "edf": int(s.edf),
        "n_selected": int(np.count_nonzero(fit.beta)),
        "log_posterior": _num(fit.q_trace[-1]),
    }
    if fit.method != "lasso":
        summary.update(s0=_num(fit.s0), s1=_num(fit.s1))
    summary.update(extra or {})
    io.write_json(out / "summary.json", summary)
    return summary


# -- commands ------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Path):
    corr, model, err = scenario(cfg, cfg.tau, cfg.error)
    rng = np.random.default_rng(cfg.seed)
    data, beta, alpha = simgen.gen_dataset(cfg.n, cfg.p, corr, model, err, rng)
    io.write_dataset(out / "data.csv", data)
    io.write_truth(out / "truth.csv", beta, alpha)
    log.info("wrote %s and %s", out / "data.csv", out / "truth.csv")


def cmd_fit(cfg: ExperimentConfig, out: Path, data_path):
    data = io.read_dataset(data_path)
    fit = fit_fixed(data, cfg, cfg.method, cfg.tau)
    write_fit(out, data, fit, cfg.tau, {"start": cfg.start if cfg.method != "lasso" else None,
                                        "lam": cfg.lam if cfg.method == "lasso" else None})


def cmd_tune(cfg: ExperimentConfig, out: Path, data_path):
    mode = cfg.tuning if cfg.method == "ssqlasso" or cfg.baseline_tuning is None else cfg.baseline_tuning
    if mode == "fixed":
        raise UsageError("tune needs tuning = sic or cv")
    data = io.read_dataset(data_path)
    fit, t, chosen = fit_tuned(data, cfg, cfg.method, cfg.tau, np.random.default_rng(cfg.seed))
    if cfg.method == "lasso":
        io.write_table(out / "surface.csv", ["lambda", "score"], t.rows())
        extra = {"criterion": t.criterion, "lam": t.best}
    else:
        io.write_table(out / "surface.csv", ["s0", "s1", "score"], t.rows())
        extra = {"criterion": t.criterion, "mode": t.mode, "best_s0": t.best[0],
                 "best_s1": t.best[1], "failed_cells": [list(f) for f in t.failures],
                 "skipped_cells": [list(c) for c in t.grid.skipped]}
    write_fit(out, data, fit, cfg.tau, extra)


def cmd_path(cfg: ExperimentConfig, out: Path, data_path):
    data = io.read_dataset(data_path)
    if cfg.method == "ssqlasso":
        top = cfg.s0_max if cfg.s0_max is not None else cfg.path_s1 / 2.0
        grid = np.geomspace(cfg.s0_min, top, cfg.n_s0)
        template = estimator_config(cfg, "ssqlasso", cfg.tau, s0=cfg.s0_min, s1=cfg.path_s1)
        path = tuning.ssqlasso_path(data, cfg.path_s1, grid, template)
    elif cfg.method == "lasso":
        grid = bl.lambda_grid(data, cfg.n_lambda, cfg.lambda_ratio)
        path = bl.lasso_path(data, grid)
    else:
        raise UsageError("path supports method = ssqlasso or lasso")
    rows = ((float(g), k, float(path[i, k])) for i, g in enumerate(grid) for k in range(data.p))
    io.write_table(out / "path.csv", ["grid_value", "coefficient_index", "value"], rows)


RAW_COLUMNS = ["replicate", "method", "tau", "error", "status", "tp", "fp", "fn", "tn", "f1",
               "mcc", "est", "s0", "s1", "lam", "seconds", "message"]
AGG_COLUMNS = ["method", "tau", "error", "n_ok", "n_failed", "tp_mean", "tp_sd", "fp_mean",
               "fp_sd", "f1_mean", "f1_sd", "mcc_mean", "mcc_sd", "est_mean", "est_sd"]


def replicate_rngs(seed: int, r: int, n_methods: int):
    """Replicate r simulates from default_rng(seed + r), shared by every
    scenario (paired replicates); method k tunes with default_rng([seed + r, k])."""
    base = (seed + r) % 2 ** 64
    return np.random.default_rng(base), [np.random.default_rng([base, k]) for k in range(n_methods)]


def run_replicate(cfg: ExperimentConfig, i_tau: int, i_err: int, r: int) -> list:
    """All methods on one simulated data set; returns raw rows."""
    tau = cfg.taus[i_tau]
    error = cfg.errors[i_err]
    data_rng, fit_rngs = replicate_rngs(cfg.seed, r, len(cfg.methods))
    corr, model, err = scenario(cfg, tau, error)
    data, beta, _ = simgen.gen_dataset(cfg.n, cfg.p, corr, model, err, data_rng)
    rows = []
    for method, rng in zip(cfg.methods, fit_rngs):
        t0 = time.perf_counter()
        base = {"replicate": r, "method": method, "tau": tau, "error": simgen.family_name(error)}
        try:
            fit, _, chosen = fit_tuned(data, cfg, method, tau, rng)
        except (NumericalError, ValueError, UsageError) as exc:
            rows.append({**base, "status": "failed", "message": str(exc),
                         "seconds": time.perf_counter() - t0})
            continue
        rep = metrics.identification_metrics(fit.beta, beta)
        rows.append({**base, "status": "ok", "tp": rep.tp, "fp": rep.fp, "fn": rep.fn,
                     "tn": rep.tn, "f1": rep.f1, "mcc": rep.mcc,
                     "est": metrics.estimation_error(fit.beta, beta),
                     "s0": chosen.get("s0"), "s1": chosen.get("s1"), "lam": chosen.get("lam"),
                     "seconds": time.perf_counter() - t0, "message": ""})
    return rows


def _job(args):
    cfg, key = args
    return key, run_replicate(cfg, *key)


def aggregate(raw: list, cfg: ExperimentConfig) -> list:
    out = []
    for tau in cfg.taus:
        for error in cfg.errors:
            error = simgen.family_name(error)
            for method in cfg.methods:
                rows = [x for x in raw if x["method"] == method and x["tau"] == tau
                        and x["error"] == error]
                ok = [x for x in rows if x["status"] == "ok"]
                rec = {"method": method, "tau": tau, "error": error, "n_ok": len(ok),
                       "n_failed": len(rows) - len(ok)}
                for m in ("tp", "fp", "f1", "mcc", "est"):
                    if ok:
                        mean, sd = metrics._mean_sd([x[m] for x in ok])
                    else:
                        mean = sd = float("nan")
                    rec[f"{m}_mean"], rec[f"{m}_sd"] = mean, sd
                out.append(rec)
    return out


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return io.fmt(v)
    return v


def cmd_replicate(cfg: ExperimentConfig, out: Path):
    cfg = replace(cfg, methods=cfg.methods or (cfg.method,), taus=cfg.taus or (cfg.tau,),
                  errors=cfg.errors or (cfg.error,))
    _echo_config(out, cfg, "replicate")
    keys = [(i, j, r) for i in range(len(cfg.taus)) for j in range(len(cfg.errors))
            for r in range(cfg.replicates)]
    if cfg.threads > 1 and len(keys) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = dict(pool.map(_job, [(cfg, k) for k in keys]))
    else:
        results = dict(_job((cfg, k)) for k in keys)
    raw = [row for k in sorted(results) for row in results[k]]
    n_failed = sum(x["status"] != "ok" for x in raw)
    if n_failed:
        log.warning("%d of %d method fits failed; see raw.csv", n_failed, len(raw))
    io.write_table(out / "raw.csv", RAW_COLUMNS,
                   ([_cell(x.get(c)) for c in RAW_COLUMNS] for x in raw))
    agg = aggregate(raw, cfg)
    io.write_table(out / "aggregate.csv", AGG_COLUMNS,
                   ([_cell(x[c]) for c in AGG_COLUMNS] for x in agg))


# -- argument handling ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--threads", type=int,
                        help=f"worker count (default: ${THREADS_ENV} or 1)")
    common.add_argument("--tau", type=float)
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any setting; repeatable")
    common.add_argument("--test-mode", action="store_true", help="allow s0 == s1")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="ssqlasso", description="Spike-and-slab quantile LASSO tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="simulate data.csv and truth.csv")
    for name, text in (("fit", "fit at fixed tuning"), ("tune", "grid-search tuning"),
                       ("path", "solution path")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("data", help="data CSV (y, z_*, x_*)")
    sub.add_parser("replicate", parents=[common], help="Monte Carlo replication")
    return parser


def resolve(args) -> ExperimentConfig:
    settings = {}
    env_threads = os.environ.get(THREADS_ENV)
    if env_threads:
        settings["threads"] = env_threads
    if args.config:
        try:
            settings.update(io.read_config(args.config))
        except io.SchemaError as exc:
            raise UsageError(str(exc)) from None
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip()] = v.strip()
    for key in ("seed", "threads", "tau", "method"):
        v = getattr(args, key)
        if v is not None:
            settings[key] = v
    if args.test_mode:
        settings["test_mode"] = True
    return build_config(settings)


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "tune": cmd_tune, "path": cmd_path,
            "replicate": cmd_replicate}


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ssqlasso: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = _out_dir(args.out)
        if args.command != "replicate":
            _echo_config(out, cfg, args.command)
        if args.command in ("fit", "tune", "path"):
            COMMANDS[args.command](cfg, out, args.data)
        else:
            COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"ssqlasso: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ssqlasso: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (io.SchemaError, OSError) as exc:
        print(f"ssqlasso: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # model-level precondition failures on valid syntax (e.g. s0 >= s1)
        print(f"ssqlasso: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
