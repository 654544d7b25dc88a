"""Cross-validation, MAPE, bootstrap intervals and covariate diagnostics."""

from __future__ import annotations

import enum
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .domain import N_STRATA, STRATUM_LABELS, CovariateTable
from .ingest import Dataset
from .models import FitOptions, ModelFamily, fit, predict_population
from .regress import RegressionError

log = logging.getLogger(__name__)

TOTAL = "total"


class CvScheme(str, enum.Enum):
    LORO = "loro"
    LOCO = "loco"
    LOSO = "loso"


def mape(predicted, actual) -> float:
    """Mean absolute percentage error, in percent."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise ValueError("empty input")
    if np.any(actual == 0):
        raise ValueError("actual values must be non-zero")
    return float(100.0 * np.mean(np.abs(predicted - actual) / np.abs(actual)))


def ape(predicted, actual) -> np.ndarray:
    """Per-element absolute percentage errors, in percent."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    return 100.0 * np.abs(predicted - actual) / np.abs(actual)


def bootstrap_ci(errors, B: int = 1000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval of the mean, resampling units with replacement."""
    if B < 100:
        raise ValueError("B must be >= 100")
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        return (math.nan, math.nan)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, errors.size, size=(B, errors.size))
    means = errors[idx].mean(axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return float(low), float(high)


@dataclass(frozen=True)
class PredictionRecord:
    fold: str
    region: str
    country: str
    unit: str
    true_n: float
    pred_n: float
    used_random_effects: bool
    imputed: bool = False


@dataclass
class EvaluationReport:
    family: ModelFamily
    scheme: CvScheme
    records: list[PredictionRecord]
    folds: list[str]
    failed_folds: dict[str, str]
    fold_mape: dict[str, float]
    mape: float
    ci: tuple[float, float]
    invalid_units: list[tuple[str, str]] = field(default_factory=list)
    mape_strata: float | None = None
    runtime_s: float = 0.0

    @property
    def headline_unit(self) -> str:
        return "stratum" if self.scheme is CvScheme.LOSO else TOTAL

    def headline_records(self) -> list[PredictionRecord]:
        invalid = set(self.invalid_units)
        if self.scheme is CvScheme.LOSO:
            rows = [r for r in self.records if r.unit != TOTAL]
        else:
            rows = [r for r in self.records if r.unit == TOTAL]
        return [r for r in rows if (r.region, r.unit) not in invalid]

    def errors(self) -> np.ndarray:
        rows = self.headline_records()
        return ape([r.pred_n for r in rows], [r.true_n for r in rows])

    def region_mape(self) -> list[tuple[str, str, float]]:
        per: dict[str, list[float]] = {}
        country: dict[str, str] = {}
        for r, e in zip(self.headline_records(), self.errors()):
            per.setdefault(r.region, []).append(float(e))
            country[r.region] = r.country
        return [(reg, country[reg], float(np.mean(v))) for reg, v in per.items()]


@dataclass(frozen=True)
class EvaluationOptions:
    fit: FitOptions = field(default_factory=FitOptions)
    bootstrap: int = 1000
    seed: int = 0
    n_jobs: int = 1


def _folds(ds: Dataset, scheme: CvScheme) -> list[tuple[str, Dataset, list[str], list[int] | None]]:
    """(fold id, training data, held-out regions, held-out strata or None for all)."""
    out = []
    if scheme is CvScheme.LORO:
        for r in ds.regions:
            out.append((r, ds.subset([x for x in ds.regions if x != r]), [r], None))
    elif scheme is CvScheme.LOCO:
        for c in ds.countries:
            held = [x for x in ds.regions if ds.region_country[x] == c]
            out.append((c, ds.subset([x for x in ds.regions if ds.region_country[x] != c]), held, None))
    else:
        for k in range(N_STRATA):
            out.append((STRATUM_LABELS[k], ds.without_strata([k]), list(ds.regions), [k]))
    return out


def _run_fold(family, ds, scheme, opts: FitOptions, fold):
    name, train, held, strata = fold
    try:
        model = fit(family, train, opts)
    except (RegressionError, ValueError, np.linalg.LinAlgError) as exc:
        return name, None, str(exc)
    test = ds.subset(held)
    pred = predict_population(model, test.platform, use_random_effects=scheme is not CvScheme.LOCO)
    N = test.N
    records = []
    for i, r in enumerate(test.regions):
        c, used = pred.countries[i], bool(pred.used_random_effects[i])
        if strata is None:
            imputed = bool(pred.imputed[i].all()) if pred.imputed is not None else False
            records.append(PredictionRecord(name, r, c, TOTAL, float(N[i].sum()), float(pred.totals[i]), used, imputed))
        if pred.strata is not None:
            for k in strata if strata is not None else range(N_STRATA):
                records.append(
                    PredictionRecord(name, r, c, STRATUM_LABELS[k], float(N[i, k]), float(pred.strata[i, k]), used, bool(pred.imputed[i, k]))
                )
    return name, records, None


def cross_validate(
    family: ModelFamily | str,
    ds: Dataset,
    scheme: CvScheme | str,
    options: EvaluationOptions | None = None,
) -> EvaluationReport:
    """Refit on each training split and score predictions for the held-out units.

    Held-out regions are predicted with their country's random effects
    under leave-one-region-out and leave-one-stratum-out, and with fixed
    effects only under leave-one-country-out. Folds whose fit fails are
    reported and left out of the averages.
    """
    family, scheme = ModelFamily(family), CvScheme(scheme)
    options = options or EvaluationOptions()
    if scheme is CvScheme.LOSO and family is not ModelFamily.JOINT_LOG:
        raise ValueError("leave-one-stratum-out is only defined for the joint-log family")
    folds = _folds(ds, scheme)
    if len(folds) < 2:
        raise ValueError(f"{scheme.value} needs at least two folds, got {len(folds)}")
    t0 = time.perf_counter()
    if options.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=options.n_jobs) as pool:
            results = list(pool.map(lambda f: _run_fold(family, ds, scheme, options.fit, f), folds))
    else:
        results = [_run_fold(family, ds, scheme, options.fit, f) for f in folds]
    records: list[PredictionRecord] = []
    failed: dict[str, str] = {}
    for name, recs, err in results:
        if err is not None:
            log.warning("fold %s failed: %s", name, err)
            failed[name] = err
        else:
            records.extend(recs)
    report = EvaluationReport(family, scheme, records, [f[0] for f in folds], failed, {}, math.nan, (math.nan, math.nan))
    if scheme is CvScheme.LOSO:
        candidates = [r for r in records if r.unit != TOTAL]
    else:
        candidates = [r for r in records if r.unit == TOTAL]
    report.invalid_units = sorted({(r.region, r.unit) for r in candidates if r.imputed or r.true_n <= 0})
    rows = report.headline_records()
    errs = report.errors()
    if len(rows):
        report.mape = float(np.mean(errs))
        report.ci = bootstrap_ci(errs, options.bootstrap, options.seed)
    for name in report.folds:
        e = [x for r, x in zip(rows, errs) if r.fold == name]
        if e:
            report.fold_mape[name] = float(np.mean(e))
    if family is ModelFamily.JOINT_LOG and scheme is not CvScheme.LOSO:
        cells = [r for r in records if r.unit != TOTAL and r.true_n > 0 and not r.imputed]
        if cells:
            report.mape_strata = mape([r.pred_n for r in cells], [r.true_n for r in cells])
    report.runtime_s = time.perf_counter() - t0
    return report


def compare(
    families: Sequence[ModelFamily | str], ds: Dataset, scheme: CvScheme | str, options: EvaluationOptions | None = None
) -> dict[ModelFamily, EvaluationReport]:
    return {ModelFamily(f): cross_validate(f, ds, scheme, options) for f in families}


# -- covariate diagnostics ---------------------------------------------------


@dataclass(frozen=True)
class Correlation:
    covariate: str
    country: str
    n: int
    pearson: float
    pearson_p: float
    spearman: float
    spearman_p: float
    status: str = "ok"


def _t_pvalue(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def _correlate(name: str, country: str, x: np.ndarray, y: np.ndarray) -> Correlation:
    n = len(x)
    nan = math.nan
    if n < 3:
        return Correlation(name, country, n, nan, nan, nan, nan, "insufficient")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return Correlation(name, country, n, nan, nan, nan, nan, "insufficient")
    r = float(stats.pearsonr(x, y).statistic)
    rho = float(stats.spearmanr(x, y).statistic)
    return Correlation(name, country, n, r, _t_pvalue(r, n), rho, _t_pvalue(rho, n))


def covariate_correlation(report: EvaluationReport, covariates: CovariateTable) -> list[Correlation]:
    """Pearson and Spearman correlation of per-region MAPE with each covariate.

    Computed over all regions and per country; regions missing a covariate
    are skipped for that covariate only.
    """
    per_region = report.region_mape()
    cov_row = {r: i for i, r in enumerate(covariates.regions)}
    out = []
    countries = list(dict.fromkeys(c for _, c, _ in per_region))
    for name in CovariateTable.NAMES:
        col = covariates.column(name)
        pts = [(c, col[cov_row[r]], e) for r, c, e in per_region if r in cov_row and not np.isnan(col[cov_row[r]])]
        for country in ["all"] + countries:
            sel = [(x, e) for c, x, e in pts if country == "all" or c == country]
            x = np.array([p[0] for p in sel], dtype=float)
            y = np.array([p[1] for p in sel], dtype=float)
            out.append(_correlate(name, country, x, y))
    return out
