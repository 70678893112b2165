"""Command-line interface: fit, infer, simulate and stability selection.

Every command writes machine-readable reports into ``--out``. JSON reports
carry a schema version and the fully resolved configuration; CSV tables are
written with 17 significant digits so they round-trip exactly.

Exit codes: 0 success, 2 input or configuration error, 3 solver
non-convergence under ``--strict``, 4 no feasible precision tolerance.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .core import DataError, SeededRng, load_dataset
from .pipeline import fit_additive_iv, infer_additive_iv
from .precision import NoFeasibleUpsilon
from .simulation import ConfigError, DesignKind, DgpConfig, Method, run_experiment
from .splines import eval_fitted_function
from .tuning import TuningConfig, select_first_stage, stability_selection, stable_set

log = logging.getLogger("additive_iv")

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_PRECISION = 0, 2, 3, 4
GRID_POINTS = 100


class InputError(Exception):
    """Bad command-line input; mapped to exit code 2."""


# ---------------------------------------------------------------- input


def _parse_cell(text: str):
    try:
        return float(text)
    except ValueError:
        return None


def read_matrix(path) -> np.ndarray:
    """Read a comma-delimited numeric matrix with an optional single header row."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise InputError(f"{path} is not valid UTF-8") from None
    if not rows:
        raise InputError(f"{path} contains no data")
    start = 0
    if all(_parse_cell(c.strip()) is None for c in rows[0]):
        start = 1  # header
    width = len(rows[start]) if start < len(rows) else 0
    values = []
    for i, row in enumerate(rows[start:]):
        line = i + start + 1
        if len(row) != width:
            raise InputError(f"{path}: line {line} (data row {i}) has {len(row)} columns, "
                             f"expected {width}")
        out = []
        for j, cell in enumerate(row):
            v = _parse_cell(cell.strip())
            if v is None:
                raise InputError(f"{path}: line {line} (data row {i}), column {j}: "
                                 f"cannot parse {cell!r} as a number")
            out.append(v)
        values.append(out)
    if not values:
        raise InputError(f"{path} contains a header but no data")
    return np.array(values, dtype=float)


def _load_inputs(args):
    for name in ("y", "x", "z"):
        if getattr(args, name) is None:
            raise InputError(f"--{name} is required")
    y = read_matrix(args.y)
    if y.shape[1] != 1:
        raise InputError(f"{args.y}: outcome must have exactly one column, found {y.shape[1]}")
    return load_dataset(y[:, 0], read_matrix(args.x), read_matrix(args.z))


def _int_list(text: str):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _tuning(args) -> TuningConfig:
    try:
        return TuningConfig(
            k_grid=args.k_grid,
            cv_folds=args.folds,
            stability_subsamples=getattr(args, "subsamples", 100),
            stability_threshold=getattr(args, "threshold", 0.5),
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("ADDITIVE_IV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"ADDITIVE_IV_THREADS must be an integer, got {env!r}") from None
    return 1


# ---------------------------------------------------------------- output


def _clean(obj):
    """Make a structure JSON-safe: arrays to lists, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path: Path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _envelope(command: str, config: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "config": config}


def _base_config(args, tuning: TuningConfig) -> dict:
    return {
        "inputs": {k: str(getattr(args, k)) for k in ("y", "x", "z")},
        "seed": args.seed,
        "threads": _threads(args),
        "tuning": tuning.to_dict(),
    }


# ---------------------------------------------------------------- commands


def _fit_payload(fit, ds) -> dict:
    first, second = fit.first, fit.second
    return {
        "n": ds.n,
        "p": ds.p,
        "q": ds.q,
        "beta_hat": second.beta_hat,
        "sigma0_hat": second.sigma0_hat,
        "active_set": second.active_set,
        "selected": {
            "k": first.k,
            "m": first.design.m,
            "lambdas": first.lambdas,
            "mu": second.mu,
        },
        "first_stage": {
            "active_groups": first.fit.active_groups,
            "bic_by_k": {str(k): v for k, v in first.bic_by_k.items()},
        },
        "cv": {"mus": fit.cv.mus, "cv_error": fit.cv.cv_error},
        "diagnostics": {
            "first_stage": [d.to_dict() for d in first.fit.diagnostics],
            "second_stage": second.diagnostics.to_dict(),
        },
        "converged": bool(first.fit.converged and second.diagnostics.converged),
    }


def _component_rows(fit):
    design = fit.first.design
    gamma = fit.first.fit.gamma_hat
    rows = []
    for ell, groups in enumerate(fit.first.fit.active_groups):
        for j in groups:
            spec = design.specs[j]
            grid = np.linspace(spec.range_a, spec.range_b, GRID_POINTS)
            vals = eval_fitted_function(design, gamma[design.block(j), ell], j, grid)
            rows.extend((ell, j, g, v) for g, v in zip(grid, vals))
    return rows


def _fit_common(args):
    ds = _load_inputs(args)
    tuning = _tuning(args)
    fit = fit_additive_iv(ds, tuning, SeededRng(args.seed))
    return ds, tuning, fit


def cmd_fit(args) -> int:
    ds, tuning, fit = _fit_common(args)
    out = Path(args.out)
    payload = _fit_payload(fit, ds)
    if args.format == "json":
        write_json(out / "fit.json", {**_envelope("fit", _base_config(args, tuning)), **payload})
    write_csv(out / "components.csv", ["treatment", "instrument", "z", "value"],
              _component_rows(fit))
    return _convergence_exit(args, payload["converged"])


def cmd_infer(args) -> int:
    ds, tuning, fit = _fit_common(args)
    if not 0.0 < args.alpha < 1.0:
        raise InputError("--alpha must lie in (0, 1)")
    inf = infer_additive_iv(fit, ds, args.alpha)
    res, prec = inf.result, inf.precision
    out = Path(args.out)
    excludes = (res.ci_lower > 0) | (res.ci_upper < 0)
    payload = _fit_payload(fit, ds)
    payload.update({
        "beta_tilde": res.beta_tilde,
        "omega_hat": res.omega_hat,
        "ci_lower": res.ci_lower,
        "ci_upper": res.ci_upper,
        "alpha": res.alpha,
        "upsilon": prec.upsilon,
        "feasibility_flags": prec.feasibility_flags,
    })
    config = {**_base_config(args, tuning), "alpha": args.alpha}
    if args.format == "json":
        write_json(out / "infer.json", {**_envelope("infer", config), **payload})
    order = sorted(range(ds.p), key=lambda k: (-abs(res.beta_tilde[k]), k))
    write_csv(
        out / "intervals.csv",
        ["treatment", "beta_tilde", "omega_hat", "ci_lower", "ci_upper", "excludes_zero"],
        [(k, res.beta_tilde[k], res.omega_hat[k], res.ci_lower[k], res.ci_upper[k],
          bool(excludes[k])) for k in order],
    )
    return _convergence_exit(args, payload["converged"])


def _convergence_exit(args, converged: bool) -> int:
    if not converged:
        log.warning("at least one solver stopped at its iteration cap")
        if args.strict:
            return EXIT_CONVERGENCE
    return EXIT_OK


def _dgp_configs(args) -> list:
    base = {}
    if args.dgp:
        text = args.dgp
        if not text.lstrip().startswith(("{", "[")):
            try:
                text = Path(text).read_text(encoding="utf-8")
            except OSError as exc:
                raise InputError(f"cannot read --dgp file {args.dgp}: {exc.strerror}") from None
        try:
            base = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"--dgp is not valid JSON: {exc}") from None
    items = base if isinstance(base, list) else [base]
    overrides = {k: getattr(args, k) for k in ("p", "q") if getattr(args, k) is not None}
    if args.design is not None:
        overrides["design_kind"] = args.design
    if args.seed_given:
        overrides["seed"] = args.seed
    ns = args.n if args.n is not None else [None]
    configs = []
    for item in items:
        if not isinstance(item, dict):
            raise InputError("--dgp must be a JSON object or a list of objects")
        for n in ns:
            d = {**item, **overrides}
            if n is not None:
                d["n"] = n
            configs.append(DgpConfig.from_dict(d))
    return configs


def cmd_simulate(args) -> int:
    configs = _dgp_configs(args)
    methods = args.method or [m.value for m in Method]
    tuning = _tuning(args)
    if args.reps < 1:
        raise InputError("--reps must be at least 1")
    reports = run_experiment(configs, methods, args.reps, parallelism=_threads(args),
                             tuning=tuning, inference=args.inference, alpha=args.alpha)
    out = Path(args.out)
    config = {
        "dgp": [c.to_dict() for c in configs],
        "methods": list(methods),
        "replications": args.reps,
        "inference": args.inference,
        "alpha": args.alpha,
        "threads": _threads(args),
        "tuning": tuning.to_dict(),
    }
    if args.format == "json":
        write_json(out / "experiment_report.json",
                   {**_envelope("simulate", config),
                    "reports": [r.to_dict(with_records=True) for r in reports]})
    rows = []
    for r in reports:
        for rec in r.records:
            c = configs[rec["config_index"]]
            for metric in ("l1_error", "coverage", "ci_length"):
                v = rec[metric]
                if v is None:
                    continue
                rows.append((rec["config_index"], c.design_kind.value, c.n, c.p, c.q,
                             r.method, rec["replication"], metric, float(v), rec["failed"]))
    write_csv(out / "results.csv",
              ["config_index", "design", "n", "p", "q", "method", "replication", "metric",
               "value", "failed"], rows)
    return EXIT_OK


def cmd_stability(args) -> int:
    ds = _load_inputs(args)
    tuning = _tuning(args)
    sel = select_first_stage(ds, tuning)
    prob = stability_selection(ds, sel.design, sel.lambdas, tuning, SeededRng(args.seed))
    chosen = set(stable_set(prob, tuning.stability_threshold).tolist())
    out = Path(args.out)
    write_csv(out / "stability.csv", ["treatment", "probability", "selected"],
              [(k, prob[k], k in chosen) for k in range(ds.p)])
    if args.format == "json":
        write_json(out / "stability.json", {
            **_envelope("stability", _base_config(args, tuning)),
            "probabilities": prob,
            "selected": sorted(chosen),
            "threshold": tuning.stability_threshold,
            "k": sel.k,
            "lambdas": sel.lambdas,
        })
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="additive-iv",
        description="Sparse additive instrumental-variable regression with debiased inference.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (fallback: ADDITIVE_IV_THREADS, else 1)")
        p.add_argument("--k-grid", type=_int_list, default=None,
                       help="candidate interior knot counts, e.g. 2,3,4")
        p.add_argument("--folds", type=int, default=5, help="cross-validation folds")
        p.add_argument("--format", choices=("json", "csv"), default="json",
                       help="json writes the JSON report and CSV tables; csv writes tables only")
        p.add_argument("--strict", action="store_true",
                       help="exit 3 if any solver hits its iteration cap")

    def data(p):
        p.add_argument("--y", help="outcome CSV (one column)")
        p.add_argument("--x", help="treatments CSV (n x p)")
        p.add_argument("--z", help="instruments CSV (n x q)")

    p = sub.add_parser("fit", help="two-stage estimate")
    data(p)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("infer", help="estimate plus debiased confidence intervals")
    data(p)
    common(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="Monte-Carlo experiment on simulated data")
    common(p)
    p.add_argument("--dgp", help="DGP configuration as inline JSON or a JSON file path")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--n", type=_int_list, default=None, help="sample size(s), e.g. 100,300,600")
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--q", type=int, default=None)
    p.add_argument("--design", choices=[d.value for d in DesignKind])
    p.add_argument("--method", action="append", choices=[m.value for m in Method],
                   help="repeatable; default runs every method")
    p.add_argument("--inference", action="store_true",
                   help="also record coverage and length of the intervals (additive-iv only)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stability", help="stability selection probabilities")
    data(p)
    common(p)
    p.add_argument("--subsamples", type=int, default=100)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_stability)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        # numerical kernels run single-threaded so results never depend on
        # the thread setting; --threads only controls worker processes
        with threadpool_limits(1):
            return args.func(args)
    except NoFeasibleUpsilon as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECISION
    except (InputError, DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
