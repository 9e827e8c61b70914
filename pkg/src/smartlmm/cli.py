"""Command-line interface: ``smartlmm {fit, contrast, predict, simulate}``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
failure (including non-convergence).  Result files never contain
timestamps; run metadata goes to a ``<stem>.meta.json`` sidecar.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ESTIMATOR_CHOICES, RunConfig, SimulationBlock, load_config
from .dataio import read_long_csv
from .design import DtrIndex
from .errors import NumericalError, ValidationError
from .estimator import AugmentedData, FitResult, fit
from .gee import gee_fit
from .inference import linear_contrast, omnibus_auc_test, pairwise_contrasts
from .prediction import predict_random_effects
from .simulator import DropoutRule, run_study

EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 1, 2, 3

log = logging.getLogger("smartlmm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def fmt6(x) -> str:
    """Six significant digits for CSV output."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "NA" if not np.isfinite(x) else f"{float(x):.6g}"
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt6(v) for v in row])


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n", encoding="utf-8")


def write_sidecar(stem: Path, argv: Sequence[str], extra: Optional[dict] = None) -> None:
    meta = dict(
        tool="smartlmm",
        version=__version__,
        created=datetime.now(timezone.utc).isoformat(),
        argv=list(argv),
        python=platform.python_version(),
        numpy=np.__version__,
    )
    meta.update(extra or {})
    write_json(stem.with_name(stem.name + ".meta.json"), meta)


def _stem(out: str) -> Path:
    p = Path(out)
    if p.suffix in (".csv", ".json"):
        p = p.with_suffix("")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "data", None):
        cfg.data_path = Path(args.data)
    if getattr(args, "estimator", None):
        cfg.estimator = args.estimator
    if getattr(args, "level", None):
        cfg.level = args.level
    return cfg


def _subjects(cfg: RunConfig):
    if cfg.data_path is None:
        raise ValidationError("no data file: give --data or data.path in the config")
    res = read_long_csv(cfg.data_path, cfg.model.covariate_names, cfg.center_covariates, cfg.design, cfg.columns)
    return res.subjects, res.covariate_means


def _fit(cfg: RunConfig, subjects) -> FitResult:
    data = AugmentedData.from_subjects(subjects, cfg.design, cfg.model)
    if cfg.estimator == "lmm":
        result = fit(data, cfg.re_spec)
        if not result.converged:
            raise NumericalError(f"variance optimizer did not converge: {result.message}")
        return result
    return gee_fit(cfg.estimator[len("gee-"):], data)


def _diagnostics(result: FitResult) -> dict:
    d = dict(
        estimator=result.estimator,
        converged=result.converged,
        iterations=result.iterations,
        loglik=result.loglik,
        score_norm=result.score_norm,
        n_subjects=result.n_subjects,
        n_replicates=result.n_replicates,
        at_boundary=result.at_boundary,
    )
    if result.G is not None:
        d.update(G=result.G, sigma2=result.sigma2)
    else:
        d.update(working_covariance=result.alpha_hat.summary())
    return d


def cmd_fit(args) -> int:
    cfg = _load(args)
    subjects, means = _subjects(cfg)
    result = _fit(cfg, subjects)
    stem = _stem(args.out)
    pct = f"{100 * cfg.level:g}% CI"
    rows, records = [], []
    for name, c in zip(result.column_names, np.eye(len(result.beta_hat))):
        cr = linear_contrast(result, c, cfg.level)
        rows.append([name, cr.estimate, cr.se, f"({fmt6(cr.ci_low)}, {fmt6(cr.ci_high)})"])
        records.append(dict(coefficient=name, estimate=cr.estimate, se=cr.se, ci_low=cr.ci_low, ci_high=cr.ci_high))
    write_csv(stem.with_suffix(".csv"), ["Coefficient", "Estimate", "SE", pct], rows)
    write_json(
        stem.with_suffix(".json"),
        dict(level=cfg.level, coefficients=records, covariance=result.sandwich_cov,
             covariate_means=means, diagnostics=_diagnostics(result)),
    )
    write_sidecar(stem, args.argv)
    return 0


def cmd_contrast(args) -> int:
    cfg = _load(args)
    subjects, _ = _subjects(cfg)
    result = _fit(cfg, subjects)
    times = [float(t) for t in args.times.split(",")] if args.times else list(cfg.times)
    pairs = [(DtrIndex.parse(a), DtrIndex.parse(b)) for a, b in args.pair] if args.pair else cfg.pairs
    out = []
    if times:
        if pairs:
            from .inference import mean_row

            for a, b in pairs:
                for t in times:
                    c = mean_row(cfg.model, a, t) - mean_row(cfg.model, b, t)
                    out.append(linear_contrast(result, c, cfg.level, label=f"{a.label()} - {b.label()}", time=t))
        else:
            out.extend(pairwise_contrasts(result, cfg.model, cfg.design, times, cfg.level))
    window = tuple(float(v) for v in args.omnibus_auc.split(",")) if args.omnibus_auc else cfg.omnibus_auc
    if window:
        out.append(omnibus_auc_test(result, cfg.model, cfg.design, window))
    if not out:
        raise UsageError("nothing to compute: give --times and/or --omnibus-auc")
    stem = _stem(args.out)
    fields = ["label", "time", "estimate", "se", "ci_low", "ci_high", "statistic", "dof", "p_value"]
    write_csv(stem.with_suffix(".csv"), fields, [[r.to_dict()[f] for f in fields] for r in out])
    write_json(stem.with_suffix(".json"), dict(level=cfg.level, results=[r.to_dict() for r in out]))
    write_sidecar(stem, args.argv)
    return 0


def cmd_predict(args) -> int:
    cfg = _load(args)
    if cfg.estimator != "lmm":
        raise ValidationError("prediction needs the mixed-model estimator")
    subjects, _ = _subjects(cfg)
    result = _fit(cfg, subjects)
    grid = None
    if args.grid:
        lo, hi, n = args.grid.split(",")
        grid = np.linspace(float(lo), float(hi), int(n))
    preds = [predict_random_effects(result, s, cfg.model, cfg.design, grid) for s in subjects]
    stem = _stem(args.out)
    rows = [[r["id"], r["dtr"], r["time"], r["fitted"]] for p in preds for r in p.rows()]
    write_csv(stem.with_suffix(".csv"), ["id", "dtr", "time", "fitted"], rows)
    write_json(
        stem.with_suffix(".json"),
        dict(subjects=[dict(id=p.id, b_hat=p.b_hat, g_at_boundary=p.g_at_boundary,
                            dtrs=[d.label() for d in p.trajectories]) for p in preds]),
    )
    write_sidecar(stem, args.argv)
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sim = cfg.simulation
    if sim is None:
        raise ValidationError("config has no simulation block")
    sizes = tuple(int(n) for n in args.sizes.split(",")) if args.sizes else sim.sizes
    reps = args.replicates or sim.replicates
    seed = sim.seed if args.seed is None else args.seed
    dropout = DropoutRule() if args.dropout else sim.dropout
    report = run_study(sim.generative, cfg.design, sim.estimators, sizes, reps, seed, dropout, cfg.model,
                       level=cfg.level, n_workers=args.workers)
    stem = _stem(args.out)
    header = ["N", "Method", "Bias", "Monte Carlo SD", "SE Estimate", "CI Coverage", "RMSE", "RMSE Inflation",
              "V Frobenius Rel Error", "Failed"]
    rows = [[r.N, r.label, r.bias, r.monte_carlo_sd, r.mean_se, r.ci_coverage, r.rmse, r.rmse_inflation,
             r.v_frobenius_rel_error, r.n_failed] for r in report.rows]
    write_csv(stem.with_suffix(".csv"), header, rows)
    write_json(stem.with_suffix(".json"), report.to_dict())
    write_sidecar(stem, args.argv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smartlmm", description="Mixed-model analysis of longitudinal SMARTs.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--out", required=True, help="output stem; .csv, .json and .meta.json are written")
        if data:
            sp.add_argument("--data", help="long-format CSV (overrides data.path)")
            sp.add_argument("--estimator", choices=ESTIMATOR_CHOICES)
        sp.add_argument("--level", type=float, help="confidence level (default 0.95)")

    sp = sub.add_parser("fit", help="fit the model and write a coefficient table")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("contrast", help="pairwise contrasts and the AUC omnibus test")
    common(sp)
    sp.add_argument("--pair", nargs=2, action="append", metavar=("DTR_A", "DTR_B"), help='e.g. --pair "1,1" "-1,."')
    sp.add_argument("--times", help="comma-separated times")
    sp.add_argument("--omnibus-auc", help="window t0,t1")
    sp.set_defaults(func=cmd_contrast)

    sp = sub.add_parser("predict", help="empirical-Bayes random effects and trajectories")
    common(sp)
    sp.add_argument("--grid", help="lo,hi,n uniform grid (default: observed times plus 50 points)")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("simulate", help="Monte Carlo replicate study")
    common(sp, data=False)
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--sizes", help="comma-separated sample sizes")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--dropout", action="store_true", help="apply the default dropout rule")
    sp.add_argument("--workers", type=int, help="parallel processes (default: SMARTLMM_THREADS or 1)")
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required: fit, contrast, predict or simulate")
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
