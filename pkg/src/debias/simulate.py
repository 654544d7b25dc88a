"""Synthetic census and platform data with known inclusion probabilities.

Homogeneous bias draws platform counts with probability
``pi(a,g) * m_country * eps_region``. Inhomogeneous bias uses the forward
form ``pi = N^theta * (f1(a) f2(g) m_country eps_region)^(1/(1-nu))`` with
``theta = nu / (1 - nu)``; when ``M = pi N`` this is exactly
``pi = M^nu f1 f2 m eps``, so noiseless data satisfy the log-linear model
``log N = (1-nu) log M - log f1 - log f2 - log m - log eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .domain import (
    N_STRATA,
    STRATUM_LABELS,
    CensusTable,
    InclusionProbabilityTable,
    PlatformTable,
    Scope,
    age_of,
    gender_of,
    stratum_at,
)
from .ingest import UserRecord


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    seed: int = 0
    countries: int = 1
    regions_per_country: int = 10
    region_median: float = 1e5
    region_sigma: float = 0.8
    stratum_shares: tuple[float, ...] | None = None
    # Dirichlet concentration of per-region stratum shares; None keeps shares fixed
    share_concentration: float | None = 10.0
    inclusion: str = "homogeneous"
    pi: tuple[float, ...] = (0.1,) * N_STRATA
    country_multipliers: tuple[float, ...] | None = None
    nu: float = 0.0
    f1: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    f2: tuple[float, ...] = (1.0, 1.0)
    region_noise: float = 0.0
    org_rate: float = 0.0
    org_concentration: float = 1.0
    noise: str = "binomial"
    emit_users: bool = False

    def __post_init__(self):
        def bad(name, msg):
            raise ConfigError(name, msg)

        if self.countries < 1:
            bad("countries", "must be >= 1")
        if self.regions_per_country < 1:
            bad("regions_per_country", "must be >= 1")
        if not self.region_median > 0:
            bad("region_median", "must be > 0")
        if not self.region_sigma >= 0:
            bad("region_sigma", "must be >= 0")
        if self.stratum_shares is not None:
            shares = np.asarray(self.stratum_shares, dtype=float)
            if shares.shape != (N_STRATA,) or np.any(shares < 0):
                bad("stratum_shares", f"need {N_STRATA} non-negative values")
            if abs(shares.sum() - 1.0) > 1e-9:
                bad("stratum_shares", f"must sum to 1, got {shares.sum()!r}")
        if self.share_concentration is not None and not self.share_concentration > 0:
            bad("share_concentration", "must be > 0")
        if self.inclusion not in ("homogeneous", "inhomogeneous"):
            bad("inclusion", "must be 'homogeneous' or 'inhomogeneous'")
        if len(self.pi) != N_STRATA:
            bad("pi", f"need {N_STRATA} values")
        if self.inclusion == "homogeneous" and not all(0 < p <= 1 for p in self.pi):
            bad("pi", "every value must lie in (0, 1]")
        if self.country_multipliers is not None:
            if len(self.country_multipliers) != self.countries:
                bad("country_multipliers", f"need {self.countries} values")
            if not all(m > 0 for m in self.country_multipliers):
                bad("country_multipliers", "must be > 0")
        if not 0 <= self.nu < 1:
            bad("nu", "must lie in [0, 1)")
        if len(self.f1) != 4 or not all(v > 0 for v in self.f1):
            bad("f1", "need 4 positive values")
        if len(self.f2) != 2 or not all(v > 0 for v in self.f2):
            bad("f2", "need 2 positive values")
        if not self.region_noise >= 0:
            bad("region_noise", "must be >= 0")
        if not 0 <= self.org_rate < 1:
            bad("org_rate", "must lie in [0, 1)")
        if self.noise not in ("binomial", "expected"):
            bad("noise", "must be 'binomial' or 'expected'")

    @property
    def multipliers(self) -> np.ndarray:
        if self.country_multipliers is None:
            return np.ones(self.countries)
        return np.asarray(self.country_multipliers, dtype=float)

    @property
    def shares(self) -> np.ndarray:
        if self.stratum_shares is None:
            return np.full(N_STRATA, 1.0 / N_STRATA)
        return np.asarray(self.stratum_shares, dtype=float)


@dataclass(frozen=True)
class SimulationResult:
    census: CensusTable
    platform: PlatformTable
    truth: InclusionProbabilityTable
    users: list[UserRecord] | None = None
    org_counts: np.ndarray | None = None
    human_platform: PlatformTable | None = None
    region_factor: np.ndarray | None = None


def region_ids(config: SimulationConfig) -> tuple[list[str], dict[str, str]]:
    width = max(2, len(str(config.countries)))
    rwidth = max(3, len(str(config.regions_per_country)))
    regions, mapping = [], {}
    for c in range(config.countries):
        country = f"C{c + 1:0{width}d}"
        for r in range(config.regions_per_country):
            rid = f"{country}R{r + 1:0{rwidth}d}"
            regions.append(rid)
            mapping[rid] = country
    return regions, mapping


def inclusion_probability(config: SimulationConfig, N: np.ndarray, country_idx: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Per-(region, stratum) inclusion probabilities for populations `N`."""
    m = config.multipliers[country_idx] * eps
    if config.inclusion == "homogeneous":
        return np.asarray(config.pi)[None, :] * m[:, None]
    nu = config.nu
    theta = nu / (1.0 - nu)
    f = np.array([config.f1[age_of(k)] * config.f2[gender_of(k)] for k in range(N_STRATA)])
    factor = (f[None, :] * m[:, None]) ** (1.0 / (1.0 - nu))
    return np.maximum(N, 1.0) ** theta * factor


def generate(config: SimulationConfig) -> SimulationResult:
    rng = np.random.default_rng(config.seed)
    regions, mapping = region_ids(config)
    R = len(regions)
    country_idx = np.repeat(np.arange(config.countries), config.regions_per_country)

    sizes = np.maximum(
        np.rint(config.region_median * np.exp(config.region_sigma * rng.standard_normal(R))), N_STRATA
    ).astype(np.int64)
    if config.share_concentration is None:
        shares = np.tile(config.shares, (R, 1))
    else:
        alpha = np.maximum(config.share_concentration * config.shares, 1e-12)
        shares = rng.dirichlet(alpha, size=R)
    shares = shares / shares.sum(axis=1, keepdims=True)
    if config.noise == "expected":
        # no sampling noise anywhere: census cells are rounded expectations too
        N = np.rint(sizes[:, None] * shares).astype(np.int64)
    else:
        N = np.stack([rng.multinomial(sizes[i], shares[i]) for i in range(R)]).astype(np.int64)
    eps = np.exp(config.region_noise * rng.standard_normal(R)) if config.region_noise > 0 else np.ones(R)

    pi = inclusion_probability(config, N.astype(float), country_idx, eps)
    bad = np.argwhere(~((pi > 0) & (pi <= 1)) & (N > 0))
    if len(bad):
        i, k = bad[0]
        raise SimulationError(
            f"inclusion probability {float(pi[i, k])!r} outside (0, 1] for region {regions[i]}, stratum {stratum_at(k).label}"
        )
    if config.noise == "expected":
        M = np.rint(pi * N).astype(np.int64)
    else:
        M = rng.binomial(N, np.clip(pi, 0.0, 1.0)).astype(np.int64)

    census = CensusTable(tuple(regions), mapping, N)
    humans = PlatformTable(tuple(regions), mapping, M)
    truth = InclusionProbabilityTable(Scope.REGION, tuple(regions), STRATUM_LABELS, pi)

    platform, orgs = humans, np.zeros_like(M)
    if config.org_rate > 0:
        platform, orgs = inject_organizations(
            humans, config.org_rate, config.org_concentration, rng, populations=census.totals
        )
    users = _expand_users(humans, orgs) if config.emit_users else None
    return SimulationResult(census, platform, truth, users, orgs, humans, eps)


def inject_organizations(
    platform: PlatformTable,
    rate: float,
    concentration: float,
    seed: int | np.random.Generator,
    populations: Sequence[float] | None = None,
) -> tuple[PlatformTable, np.ndarray]:
    """Add organization accounts, concentrated in populous regions.

    Adds about ``rate / (1 - rate)`` times the current total, spread over
    regions in proportion to ``population ** concentration`` (platform
    totals stand in for population when none is given) and over strata in
    proportion to the platform-wide stratum mix. Returns the new table and
    the added counts per (region, stratum).
    """
    if not 0 <= rate < 1:
        raise ValueError(f"rate {rate} outside [0, 1)")
    added = np.zeros_like(platform.counts)
    if rate == 0:
        return platform, added
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pop = np.asarray(platform.totals if populations is None else populations, dtype=float)
    total = int(round(rate / (1.0 - rate) * platform.total))
    w = pop**concentration
    per_region = rng.multinomial(total, w / w.sum())
    mix = platform.counts.sum(axis=0).astype(float)
    mix = mix / mix.sum() if mix.sum() > 0 else np.full(N_STRATA, 1.0 / N_STRATA)
    for i, n in enumerate(per_region):
        added[i] = rng.multinomial(n, mix)
    return PlatformTable(platform.regions, platform.region_country, platform.counts + added), added


def _expand_users(humans: PlatformTable, orgs: np.ndarray) -> list[UserRecord]:
    users = []
    n = 0
    for i, r in enumerate(humans.regions):
        for k in range(N_STRATA):
            s = stratum_at(k)
            for p_org, count in ((0.0, humans.counts[i, k]), (1.0, orgs[i, k])):
                for _ in range(int(count)):
                    n += 1
                    users.append(UserRecord(f"u{n:09d}", r, s.age, s.gender, p_org))
    return users


def effective_pi(census: CensusTable, truth: InclusionProbabilityTable) -> list[tuple[str, str, str, float]]:
    """Expected platform share per stratum, globally and per country.

    Rows are ``(scope, country, stratum_label, pi)`` with ``pi`` the
    population-weighted mean of the true per-region probabilities.
    """
    N = census.counts.astype(float)
    expected = N * np.asarray(truth.values)
    rows = []
    with np.errstate(invalid="ignore", divide="ignore"):
        glob = expected.sum(axis=0) / N.sum(axis=0)
    rows += [("global", "", STRATUM_LABELS[k], float(glob[k])) for k in range(N_STRATA)]
    countries = census.country_of_rows
    for c in census.countries:
        sel = countries == c
        with np.errstate(invalid="ignore", divide="ignore"):
            v = expected[sel].sum(axis=0) / N[sel].sum(axis=0)
        rows += [("country", c, STRATUM_LABELS[k], float(v[k])) for k in range(N_STRATA)]
    return rows


# -- flat key = value config files -------------------------------------------

_TUPLE_FIELDS = {"stratum_shares", "pi", "country_multipliers", "f1", "f2"}


def parse_config(text: str) -> SimulationConfig:
    known = {f.name: f for f in fields(SimulationConfig)}
    values: dict[str, object] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(key or f"line {line_no}", "expected 'key = value'")
        if key not in known:
            raise ConfigError(key, "unknown field")
        values[key] = _coerce(key, val)
    try:
        return SimulationConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from None


def _coerce(key: str, val: str):
    try:
        if key in _TUPLE_FIELDS:
            if val.lower() in ("", "none", "uniform"):
                return None
            return tuple(float(v) for v in val.split(","))
        if key in ("seed", "countries", "regions_per_country"):
            return int(val)
        if key in ("inclusion", "noise"):
            return val
        if key == "emit_users":
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return val.lower() in ("true", "1", "yes")
        if key == "share_concentration" and val.lower() in ("none", "fixed"):
            return None
        return float(val)
    except ValueError:
        raise ConfigError(key, f"cannot parse {val!r}") from None


def format_config(config: SimulationConfig) -> str:
    lines = []
    for f in fields(SimulationConfig):
        v = getattr(config, f.name)
        if v is None:
            text = "none"
        elif isinstance(v, tuple):
            text = ",".join(repr(float(x)) for x in v)
        elif isinstance(v, bool):
            text = "true" if v else "false"
        else:
            text = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def homogeneous_pi_draw(seed: int, low: float = 0.02, high: float = 0.3) -> tuple[float, ...]:
    """Eight stratum probabilities drawn uniformly from [low, high]."""
    rng = np.random.default_rng(seed)
    return tuple(float(x) for x in rng.uniform(low, high, N_STRATA))
