"""Command-line entry point: ``debias simulate|fit|predict|evaluate|inspect``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .domain import STRATUM_LABELS, Scope
from .evaluate import TOTAL, CvScheme, EvaluationOptions, compare, covariate_correlation
from .ingest import (
    AggregationOptions,
    IngestError,
    aggregate_user_records,
    align,
    parse_census,
    parse_covariates,
    parse_platform_aggregated,
    parse_users,
    write_census,
    write_platform,
    write_users,
)
from .models import FitOptions, ModelFamily, fit, from_json, inclusion_probabilities, predict_population, to_json
from .regress import RegressionError
from .simulate import ConfigError, SimulationError, effective_pi, generate, parse_config

log = logging.getLogger("debias")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, command: str, options: dict, inputs: list, seed, started: float) -> None:
    manifest = {
        "command": command,
        "options": options,
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "seed": seed,
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 6),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _options_of(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def _load_dataset(args):
    census = parse_census(args.census)
    if getattr(args, "users", None) and getattr(args, "platform", None):
        raise UsageError("--platform and --users are mutually exclusive")
    if getattr(args, "users", None):
        records, parse_diag = parse_users(args.users)
        try:
            opts = AggregationOptions(args.org_threshold, args.min_conf_age, args.min_conf_gender)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        platform, diag = aggregate_user_records(records, opts, census.region_country)
        print(
            f"users: {diag.total} records, {diag.retained} retained, {diag.org_excluded} organizations excluded, "
            f"{diag.confidence_excluded} below confidence, {diag.unresolvable} unresolvable regions, "
            f"{parse_diag.rejected_gender + parse_diag.rejected_age} rejected labels",
            file=sys.stderr,
        )
    elif getattr(args, "platform", None):
        platform = parse_platform_aggregated(args.platform)
    else:
        raise UsageError("one of --platform or --users is required")
    ds = align(census, platform)
    if ds.dropped_census or ds.dropped_platform:
        print(
            f"align: dropped {len(ds.dropped_census)} census-only and {len(ds.dropped_platform)} platform-only regions",
            file=sys.stderr,
        )
    return ds


def _fit_options(args) -> FitOptions:
    return FitOptions(
        multilevel=args.multilevel, solver=args.solver, zero_policy=args.zero_policy, intercept=args.intercept
    )


# -- commands ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    try:
        config = parse_config(Path(args.config).read_text(encoding="utf-8"))
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        result = generate(config)
    except (ConfigError, SimulationError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "census.csv", "w", newline="", encoding="utf-8") as fh:
        write_census(result.census, fh)
    with open(out / "platform.csv", "w", newline="", encoding="utf-8") as fh:
        write_platform(result.platform, fh)
    with open(out / "truth_pi.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scope", "country", "age_bucket", "gender", "pi"])
        for scope, country, label, value in effective_pi(result.census, result.truth):
            age, _, gender = label.partition("|")
            w.writerow([scope, country, age, gender, repr(value)])
    if result.users is not None:
        with open(out / "users.csv", "w", newline="", encoding="utf-8") as fh:
            write_users(result.users, fh)
    options = _options_of(args) | {"config": dataclasses.asdict(config)}
    _write_manifest(out, "simulate", options, [args.config], config.seed, started)
    print(f"wrote {len(result.census.regions)} regions in {len(result.census.countries)} countries to {out}")
    return EXIT_OK


def _print_pi(model, ds) -> None:
    table = model.pi
    print(f"family: {model.family.value}  ({model.family.formula})")
    print(f"solver: {model.fit.solver}  observations: {model.fit.n_obs}  dropped cells: {model.dropped_cells}")
    for name, value in model.fit.coef_dict().items():
        print(f"coef  {name:<18} {float(value)!r}")
    if model.family.homogeneous:
        print("inclusion probabilities (global):")
        for col, v, ok in zip(table.columns, table.values[0], table.valid[0]):
            print(f"pi_hat  {col:<14} {float(v)!r}{'' if ok else '  OUT-OF-RANGE'}")
        if model.multilevel:
            per = inclusion_probabilities(model, Scope.COUNTRY, ds.platform)
            for unit, row, ok in zip(per.units, per.values, per.valid):
                flags = "" if ok.all() else f"  ({int((~ok).sum())} out of range)"
                print(f"pi_hat[{unit}]  " + " ".join(f"{v:.6g}" for v in row) + flags)
    else:
        print(f"nu_hat  {float(table.nu)!r}")
        print(f"stratum factors ({table.normalization}):")
        for col, v in zip(table.columns, table.phi):
            print(f"phi  {col:<14} {float(v)!r}")
        print(f"per-region inclusion probabilities: {table.values.size} cells, {table.n_flagged} out of range")
    if table.n_flagged:
        print(f"warning: {table.n_flagged} inclusion probabilities outside (0, 1]")


def cmd_fit(args) -> int:
    started = time.perf_counter()
    ds = _load_dataset(args)
    model = fit(args.family, ds, _fit_options(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(to_json(model), encoding="utf-8")
    _write_manifest(out, "fit", _options_of(args), [args.census, args.platform, args.users], None, started)
    _print_pi(model, ds)
    return EXIT_OK


def write_predictions(model, platform, fh, use_random_effects: bool = True) -> None:
    pred = predict_population(model, platform, use_random_effects)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["region", "country", "stratum_or_total", "pred_n", "used_random_effects"])
    for i, r in enumerate(pred.regions):
        used = "true" if pred.used_random_effects[i] else "false"
        if pred.strata is not None:
            for k, label in enumerate(STRATUM_LABELS):
                w.writerow([r, pred.countries[i], label, repr(float(pred.strata[i, k])), used])
        w.writerow([r, pred.countries[i], TOTAL, repr(float(pred.totals[i])), used])


def cmd_predict(args) -> int:
    started = time.perf_counter()
    try:
        model = from_json(Path(args.model).read_text(encoding="utf-8"))
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot read model {args.model}: {exc}") from None
    platform = parse_platform_aggregated(args.platform)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        write_predictions(model, platform, fh, not args.no_random_effects)
    _write_manifest(out, "predict", _options_of(args), [args.model, args.platform], None, started)
    print(f"wrote predictions for {len(platform.regions)} regions to {out / 'predictions.csv'}")
    return EXIT_OK


def _threads() -> int:
    env = os.environ.get("DEBIAS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"DEBIAS_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def report_dict(reports, scheme: CvScheme, options: EvaluationOptions, focus) -> dict:
    fams = {}
    for fam, rep in reports.items():
        fams[fam.value] = {
            "formula": fam.formula,
            "unit": rep.headline_unit,
            "mape": rep.mape,
            "ci95": list(rep.ci),
            "mape_strata": rep.mape_strata,
            "n_units": len(rep.headline_records()),
            "folds": rep.fold_mape,
            "failed_folds": rep.failed_folds,
            "invalid_units": [list(u) for u in rep.invalid_units],
        }
    return {
        "scheme": scheme.value,
        "options": {
            "multilevel": options.fit.multilevel,
            "solver": options.fit.solver,
            "zero_policy": options.fit.zero_policy.value,
            "intercept": options.fit.intercept,
            "bootstrap": options.bootstrap,
            "seed": options.seed,
        },
        "families": fams,
        "region_mape_family": focus.value,
    }


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    try:
        families = [ModelFamily(f.strip()) for f in args.families.split(",") if f.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not families:
        raise UsageError("--families is empty")
    scheme = CvScheme(args.cv)
    if scheme is CvScheme.LOSO and any(f is not ModelFamily.JOINT_LOG for f in families):
        raise UsageError("--cv loso is only valid for the joint-log family")
    if args.bootstrap < 100:
        raise UsageError("--bootstrap must be >= 100")
    ds = _load_dataset(args)
    options = EvaluationOptions(_fit_options(args), args.bootstrap, args.seed, _threads())
    reports = compare(families, ds, scheme, options)
    focus = ModelFamily.JOINT_LOG if ModelFamily.JOINT_LOG in reports else min(reports, key=lambda f: reports[f].mape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report_dict(reports, scheme, options, focus)
    with open(out / "scatter.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "country", "true_n", "pred_n", "family"])
        for fam, rep in reports.items():
            for r in rep.headline_records():
                w.writerow([r.region, r.country, repr(r.true_n), repr(r.pred_n), fam.value])
    with open(out / "region_mape.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "country", "mape"])
        for region, country, m in reports[focus].region_mape():
            w.writerow([region, country, repr(m)])
    inputs = [args.census, args.platform, args.users]
    if args.covariates:
        covs = parse_covariates(args.covariates)
        inputs.append(args.covariates)
        table = covariate_correlation(reports[focus], covs)
        with open(out / "correlations.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", "country", "n", "pearson", "pearson_p", "spearman", "spearman_p", "status"])
            for c in table:
                w.writerow([c.covariate, c.country, c.n, repr(c.pearson), repr(c.pearson_p), repr(c.spearman), repr(c.spearman_p), c.status])
        doc["correlations"] = [c.__dict__ for c in table]
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    _write_manifest(out, "evaluate", _options_of(args), inputs, args.seed, started)
    print(f"{scheme.value} cross-validation")
    print(f"{'family':<10} {'formula':<34} {'MAPE %':>8}  95% CI")
    for fam, rep in reports.items():
        failed = f"  ({len(rep.failed_folds)} failed folds)" if rep.failed_folds else ""
        print(f"{fam.value:<10} {fam.formula:<34} {rep.mape:8.2f}  [{rep.ci[0]:.2f}, {rep.ci[1]:.2f}]{failed}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        doc = json.loads(Path(args.model).read_text(encoding="utf-8"))
        model = from_json(json.dumps(doc))
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot read model {args.model}: {exc}") from None
    print(f"model: {args.model}")
    print(f"family: {model.family.value}  ({model.family.formula})")
    print(f"options: {json.dumps(model.options.to_dict())}")
    print(f"countries: {', '.join(model.countries)}")
    print("coefficients:")
    cov = np.asarray(model.fit.cov)
    for i, (name, v) in enumerate(model.fit.coef_dict().items()):
        print(f"  {name:<18} {v: .6g}  (se {np.sqrt(max(cov[i, i], 0.0)):.3g})")
    if model.multilevel:
        print("variance components:")
        for name, v in zip(model.fit.random_columns, model.fit.variances):
            print(f"  {name:<18} {v:.6g}")
        print(f"  residual           {model.fit.residual_variance:.6g}")
        print(f"restricted log-likelihood: {model.fit.restricted_loglik:.6f}")
    if model.pi is not None:
        t = model.pi
        print(f"inclusion probabilities ({t.scope.value}, {len(t.units)} units, {t.n_flagged} flagged)")
        if t.nu is not None:
            print(f"  nu = {t.nu:.6g}")
    print(f"provenance: {json.dumps(dict(model.provenance))}")
    return EXIT_OK


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--census", required=True, help="census.csv")
    p.add_argument("--platform", help="aggregated platform.csv")
    p.add_argument("--users", help="user-level users.csv (alternative to --platform)")
    p.add_argument("--org-threshold", type=float, default=None, help="exclude accounts with p_org >= threshold")
    p.add_argument("--min-conf-age", type=float, default=0.0)
    p.add_argument("--min-conf-gender", type=float, default=0.0)
    p.add_argument("--multilevel", action="store_true", help="per-country random effects on every coefficient")
    p.add_argument("--solver", choices=["ols", "nnls"], default="ols")
    p.add_argument("--zero-policy", choices=["drop", "add-one"], default="drop")
    p.add_argument("--intercept", action="store_true", help="add an intercept to homogeneous families")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debias", description=__doc__)
    parser.add_argument("--version", action="version", version=f"debias {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic census/platform dataset")
    p.add_argument("config", help="key = value configuration file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one debiasing model")
    p.add_argument("--family", required=True, choices=[f.value for f in ModelFamily])
    _add_data_args(p)
    p.add_argument("--out", required=True, help="output directory for model.json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict populations from a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--platform", required=True)
    p.add_argument("--no-random-effects", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="cross-validate model families")
    p.add_argument("--families", required=True, help="comma-separated: " + ",".join(f.value for f in ModelFamily))
    p.add_argument("--cv", required=True, choices=[s.value for s in CvScheme])
    _add_data_args(p)
    p.add_argument("--covariates")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="pretty-print a model file")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, IngestError, OSError) as exc:
        print(f"debias {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RegressionError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"debias {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
