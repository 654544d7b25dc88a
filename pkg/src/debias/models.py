"""The five debiasing regressions and inclusion-probability extraction.

Homogeneous families regress region totals on platform counts without an
intercept, so each slope is an inverse inclusion probability. The log
family regresses log stratum populations on log stratum counts plus
reference-coded age and gender indicators.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

import numpy as np

from . import __version__
from .domain import (
    AGES,
    GENDERS,
    N_STRATA,
    STRATA,
    STRATUM_LABELS,
    InclusionProbabilityTable,
    PlatformTable,
    Scope,
    age_of,
    gender_of,
)
from .ingest import Dataset
from .regress import INTERCEPT, DesignMatrix, FixedFit, MixedFit, nnls, ols, predict, reml_fit


class ModelFamily(str, enum.Enum):
    BASELINE = "baseline"
    GENDER = "gender"
    AGE = "age"
    JOINT = "joint"
    JOINT_LOG = "joint-log"

    @property
    def formula(self) -> str:
        return {
            "baseline": "N ~ M",
            "gender": "N ~ sum_g M(g)",
            "age": "N ~ sum_a M(a)",
            "joint": "N ~ sum_ag M(a,g)",
            "joint-log": "log N(a,g) ~ log M(a,g) + a + g",
        }[self.value]

    @property
    def homogeneous(self) -> bool:
        return self is not ModelFamily.JOINT_LOG


class ZeroPolicy(str, enum.Enum):
    DROP = "drop"
    ADD_ONE = "add-one"


LOG_M = "logM"
AGE_DUMMIES = tuple(f"age:{a.value}" for a in AGES[1:])
GENDER_DUMMIES = tuple(f"gender:{g.value}" for g in GENDERS[1:])
LOG_COLUMNS = (LOG_M, INTERCEPT) + AGE_DUMMIES + GENDER_DUMMIES
F_NORMALIZATION = "f1(0-18) = exp(-intercept), f2(female) = 1"


def _aggregate(M: np.ndarray, family: ModelFamily) -> tuple[np.ndarray, tuple[str, ...]]:
    """Platform predictors for a homogeneous family; returns (columns array, labels)."""
    if family is ModelFamily.BASELINE:
        return M.sum(axis=1, keepdims=True), ("all",)
    if family is ModelFamily.GENDER:
        X = np.stack([M[:, [k for k in range(N_STRATA) if gender_of(k) == j]].sum(axis=1) for j in range(len(GENDERS))], axis=1)
        return X, tuple(g.value for g in GENDERS)
    if family is ModelFamily.AGE:
        X = np.stack([M[:, [k for k in range(N_STRATA) if age_of(k) == j]].sum(axis=1) for j in range(len(AGES))], axis=1)
        return X, tuple(a.value for a in AGES)
    if family is ModelFamily.JOINT:
        return M.copy(), STRATUM_LABELS
    raise ValueError(f"{family} is not a homogeneous family")


def predictor_labels(family: ModelFamily) -> tuple[str, ...]:
    if family is ModelFamily.JOINT_LOG:
        return STRATUM_LABELS
    return _aggregate(np.zeros((1, N_STRATA)), family)[1]


def _homogeneous_columns(family: ModelFamily) -> tuple[str, ...]:
    labels = predictor_labels(family)
    return ("M",) if family is ModelFamily.BASELINE else tuple(f"M({lab})" for lab in labels)


def _log_row(k: int) -> np.ndarray:
    a, g = age_of(k), gender_of(k)
    row = np.zeros(len(LOG_COLUMNS) - 1)
    row[0] = 1.0
    if a > 0:
        row[a] = 1.0
    if g > 0:
        row[len(AGES) + g - 1] = 1.0
    return row


STRATUM_DUMMIES = np.stack([_log_row(k) for k in range(N_STRATA)])


@dataclass(frozen=True)
class BuiltDesign:
    dm: DesignMatrix
    dropped_cells: int = 0


def build_design(
    family: ModelFamily | str,
    ds: Dataset,
    zero_policy: ZeroPolicy | str = ZeroPolicy.DROP,
    intercept: bool = False,
) -> BuiltDesign:
    family, zero_policy = ModelFamily(family), ZeroPolicy(zero_policy)
    countries = np.array([ds.region_country[r] for r in ds.regions], dtype=object)
    regions = np.array(ds.regions, dtype=object)
    if family.homogeneous:
        X, _ = _aggregate(ds.M, family)
        dm = DesignMatrix(
            ds.N.sum(axis=1), X, _homogeneous_columns(family), groups=countries, regions=regions,
            strata=np.full(len(regions), -1),
        )
        return BuiltDesign(dm.with_intercept() if intercept else dm)
    N, M, mask = ds.N, ds.M, ds.mask
    if zero_policy is ZeroPolicy.ADD_ONE:
        M = M + 1.0
    usable = mask & (N > 0) & (M > 0)
    dropped = int((mask & ~usable).sum())
    ri, ki = np.nonzero(usable)
    X = np.column_stack([np.log(M[ri, ki]), STRATUM_DUMMIES[ki]])
    dm = DesignMatrix(np.log(N[ri, ki]), X, LOG_COLUMNS, groups=countries[ri], regions=regions[ri], strata=ki)
    return BuiltDesign(dm, dropped)


@dataclass(frozen=True)
class FitOptions:
    multilevel: bool = False
    solver: str = "ols"
    zero_policy: ZeroPolicy = ZeroPolicy.DROP
    intercept: bool = False

    def __post_init__(self):
        object.__setattr__(self, "zero_policy", ZeroPolicy(self.zero_policy))
        if self.solver not in ("ols", "nnls"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.multilevel and self.solver == "nnls":
            raise ValueError("nnls is not available for multilevel fits")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["zero_policy"] = self.zero_policy.value
        return d


@dataclass(frozen=True)
class FittedDebiasModel:
    family: ModelFamily
    options: FitOptions
    fit: FixedFit | MixedFit
    countries: tuple[str, ...]
    dropped_cells: int = 0
    pi: InclusionProbabilityTable | None = None
    provenance: Mapping[str, str] = field(default_factory=dict)

    @property
    def multilevel(self) -> bool:
        return isinstance(self.fit, MixedFit)

    def coef_for(self, country: str | None, use_random_effects: bool = True) -> np.ndarray:
        if use_random_effects and country is not None and isinstance(self.fit, MixedFit):
            return self.fit.group_coef(country)
        return np.array(self.fit.coef, dtype=float)

    def slopes_for(self, country: str | None = None, use_random_effects: bool = True) -> np.ndarray:
        """Coefficients on the platform-count predictors only."""
        beta = self.coef_for(country, use_random_effects)
        if self.fit.columns[0] == INTERCEPT:
            return beta[1:]
        return beta


def fit(family: ModelFamily | str, ds: Dataset, options: FitOptions | None = None) -> FittedDebiasModel:
    family = ModelFamily(family)
    options = options or FitOptions()
    built = build_design(family, ds, options.zero_policy, options.intercept)
    dm = built.dm
    if options.multilevel:
        if len(ds.countries) < 2:
            raise ValueError("multilevel fits need at least two countries")
        result = reml_fit(dm, dm.columns)
    elif options.solver == "nnls":
        result = nnls(dm)
    else:
        result = ols(dm)
    model = FittedDebiasModel(
        family=family,
        options=options,
        fit=result,
        countries=ds.countries,
        dropped_cells=built.dropped_cells,
        provenance={"dataset": ds.digest(), "version": __version__},
    )
    scope = Scope.REGION if family is ModelFamily.JOINT_LOG else Scope.GLOBAL
    table = inclusion_probabilities(model, scope, ds.platform)
    return dataclasses.replace(model, pi=table)


def _log_split(beta: np.ndarray):
    """(slope on log M, combined stratum offset per cell) from log-family coefficients."""
    b1 = beta[0]
    offsets = STRATUM_DUMMIES @ beta[1:]
    return b1, offsets


def _log_predict(beta: np.ndarray, M_row: np.ndarray, zero_policy: ZeroPolicy):
    b1, offsets = _log_split(beta)
    M_use = M_row + 1.0 if zero_policy is ZeroPolicy.ADD_ONE else M_row
    with np.errstate(divide="ignore"):
        logm = np.log(M_use)
    ok = M_use > 0
    pred = np.where(ok, np.exp(b1 * np.where(ok, logm, 0.0) + offsets), 0.0)
    return pred, ~ok


def inclusion_probabilities(
    model: FittedDebiasModel,
    scope: Scope | str = Scope.GLOBAL,
    platform: PlatformTable | None = None,
) -> InclusionProbabilityTable:
    """Invert fitted coefficients into inclusion probabilities.

    Homogeneous families give 1/slope per predictor. The log family gives
    per-region, per-stratum values M / N_hat and therefore needs the
    platform counts; its exponent and stratum factors come from the fixed
    effects.
    """
    scope = Scope(scope)
    labels = predictor_labels(model.family)
    if model.family.homogeneous:
        if scope is Scope.GLOBAL:
            units: tuple[str, ...] = ("all",)
            unit_country: list[str | None] = [None]
        elif scope is Scope.COUNTRY:
            units = model.countries
            unit_country = list(units)
        else:
            if platform is None:
                raise ValueError("per-region probabilities need a platform table")
            units = platform.regions
            unit_country = [platform.region_country[r] for r in units]
        slopes = np.stack([model.slopes_for(c) for c in unit_country])
        with np.errstate(divide="ignore"):
            values = 1.0 / slopes
        return InclusionProbabilityTable(scope, units, labels, values)
    if platform is None:
        raise ValueError("log-family probabilities need a platform table")
    beta = model.coef_for(None)
    values = np.empty((len(platform.regions), N_STRATA))
    M = platform.counts.astype(float)
    for i, r in enumerate(platform.regions):
        country = None if scope is Scope.GLOBAL else platform.region_country[r]
        pred, _ = _log_predict(model.coef_for(country), M[i], model.options.zero_policy)
        with np.errstate(divide="ignore", invalid="ignore"):
            values[i] = np.where(pred > 0, M[i] / np.where(pred > 0, pred, 1.0), 0.0)
    b1, offsets = _log_split(beta)
    phi = np.exp(-offsets)
    f1 = np.exp(-(beta[1] + np.concatenate([[0.0], beta[2 : 1 + len(AGES)]])))
    f2 = np.exp(-np.concatenate([[0.0], beta[1 + len(AGES) :]]))
    return InclusionProbabilityTable(
        scope, platform.regions, labels, values, nu=float(1.0 - b1), phi=phi, f1=f1, f2=f2,
        normalization=F_NORMALIZATION,
    )


@dataclass(frozen=True)
class PopulationPrediction:
    regions: tuple[str, ...]
    countries: tuple[str, ...]
    totals: np.ndarray
    used_random_effects: np.ndarray
    strata: np.ndarray | None = None
    imputed: np.ndarray | None = None


def predict_population(
    model: FittedDebiasModel, platform: PlatformTable, use_random_effects: bool = True
) -> PopulationPrediction:
    """Predicted populations for every region of `platform`.

    Countries without a fitted random effect (or ``use_random_effects=False``)
    are predicted from fixed effects alone. For the log family each stratum
    is exponentiated and the region total is their sum; strata that cannot
    be predicted under the drop policy contribute zero and are marked in
    ``imputed``.
    """
    regions = platform.regions
    countries = tuple(platform.region_country[r] for r in regions)
    fit_ = model.fit
    seen = set(fit_.blups) if isinstance(fit_, MixedFit) else set()
    used = np.array([use_random_effects and c in seen for c in countries], dtype=bool)
    M = platform.counts.astype(float)
    if model.family.homogeneous:
        X, _ = _aggregate(M, model.family)
        dm = DesignMatrix(np.zeros(len(regions)), X, _homogeneous_columns(model.family), groups=np.array(countries, dtype=object))
        totals = predict(fit_, dm, use_random_effects)
        return PopulationPrediction(regions, countries, totals, used)
    strata = np.empty((len(regions), N_STRATA))
    imputed = np.zeros((len(regions), N_STRATA), dtype=bool)
    for i, c in enumerate(countries):
        strata[i], imputed[i] = _log_predict(model.coef_for(c, use_random_effects), M[i], model.options.zero_policy)
    return PopulationPrediction(regions, countries, strata.sum(axis=1), used, strata, imputed)


# -- serialization -----------------------------------------------------------

FORMAT = "debias-model/1"


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _pi_to_dict(t: InclusionProbabilityTable | None):
    if t is None:
        return None
    return {
        "scope": t.scope.value,
        "units": list(t.units),
        "columns": list(t.columns),
        "values": _floats(t.values),
        "valid": t.valid.tolist(),
        "nu": t.nu,
        "phi": None if t.phi is None else _floats(t.phi),
        "f1": None if t.f1 is None else _floats(t.f1),
        "f2": None if t.f2 is None else _floats(t.f2),
        "normalization": t.normalization,
    }


def _pi_from_dict(d) -> InclusionProbabilityTable | None:
    if d is None:
        return None
    return InclusionProbabilityTable(
        Scope(d["scope"]), tuple(d["units"]), tuple(d["columns"]),
        np.array(d["values"], dtype=float).reshape(len(d["units"]), len(d["columns"])),
        nu=d["nu"],
        phi=None if d["phi"] is None else np.array(d["phi"]),
        f1=None if d["f1"] is None else np.array(d["f1"]),
        f2=None if d["f2"] is None else np.array(d["f2"]),
        normalization=d["normalization"],
    )


def to_dict(model: FittedDebiasModel) -> dict[str, Any]:
    f = model.fit
    out: dict[str, Any] = {
        "format": FORMAT,
        "family": model.family.value,
        "formula": model.family.formula,
        "options": model.options.to_dict(),
        "columns": list(f.columns),
        "coefficients": {c: float(v) for c, v in zip(f.columns, f.coef)},
        "solver": f.solver,
        "residual_variance": float(f.residual_variance),
        "coefficient_cov": _floats(f.cov),
        "n_obs": int(f.n_obs),
        "countries": list(model.countries),
        "dropped_cells": int(model.dropped_cells),
    }
    if isinstance(f, MixedFit):
        out["random_columns"] = list(f.random_columns)
        out["variance_components"] = {c: float(v) for c, v in zip(f.random_columns, f.variances)}
        out["random_effects"] = {g: {c: float(v) for c, v in zip(f.random_columns, f.blups[g])} for g in f.groups}
        out["restricted_loglik"] = float(f.restricted_loglik)
        out["convergence"] = {"iterations": int(f.iterations), "grad_norm": float(f.grad_norm), "converged": bool(f.converged)}
    else:
        out["rank"] = int(f.rank)
        out["condition"] = float(f.condition)
    out["inclusion_probabilities"] = _pi_to_dict(model.pi)
    out["provenance"] = dict(model.provenance)
    return out


def to_json(model: FittedDebiasModel) -> str:
    return json.dumps(to_dict(model), indent=2) + "\n"


def from_dict(d: Mapping[str, Any]) -> FittedDebiasModel:
    if d.get("format") != FORMAT:
        raise ValueError(f"unsupported model format {d.get('format')!r}")
    family = ModelFamily(d["family"])
    columns = tuple(d["columns"])
    expected = LOG_COLUMNS if family is ModelFamily.JOINT_LOG else _homogeneous_columns(family)
    if columns not in (expected, (INTERCEPT,) + expected):
        raise ValueError(f"columns {list(columns)} do not match family {family.value!r}")
    coef = np.array([d["coefficients"][c] for c in columns], dtype=float)
    cov = np.array(d["coefficient_cov"], dtype=float).reshape(len(columns), len(columns))
    if d["solver"] == "reml":
        rcols = tuple(d["random_columns"])
        fit_: FixedFit | MixedFit = MixedFit(
            columns=columns,
            coef=coef,
            random_columns=rcols,
            variances=np.array([d["variance_components"][c] for c in rcols], dtype=float),
            residual_variance=d["residual_variance"],
            blups={g: np.array([v[c] for c in rcols], dtype=float) for g, v in d["random_effects"].items()},
            restricted_loglik=d["restricted_loglik"],
            cov=cov,
            n_obs=d["n_obs"],
            iterations=d["convergence"]["iterations"],
            grad_norm=d["convergence"]["grad_norm"],
            converged=d["convergence"]["converged"],
            groups=tuple(d["random_effects"]),
        )
    else:
        fit_ = FixedFit(columns, coef, d["residual_variance"], cov, d["rank"], d["condition"], d["n_obs"], d["solver"])
    return FittedDebiasModel(
        family=family,
        options=FitOptions(**d["options"]),
        fit=fit_,
        countries=tuple(d["countries"]),
        dropped_cells=d["dropped_cells"],
        pi=_pi_from_dict(d["inclusion_probabilities"]),
        provenance=dict(d["provenance"]),
    )


def from_json(text: str) -> FittedDebiasModel:
    return from_dict(json.loads(text))


def stratum_label(k: int) -> str:
    return STRATA[k].label
