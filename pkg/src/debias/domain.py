"""Core vocabulary: strata, census and platform count tables, inclusion probabilities."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np


class AgeBucket(str, enum.Enum):
    A0_18 = "0-18"
    A19_29 = "19-29"
    A30_39 = "30-39"
    A40_99 = "40-99"

    @classmethod
    def parse(cls, token: str) -> "AgeBucket":
        try:
            return cls(token.strip())
        except ValueError:
            raise ValueError(f"unknown age bucket {token!r}") from None


class Gender(str, enum.Enum):
    FEMALE = "female"
    MALE = "male"

    @classmethod
    def parse(cls, token: str) -> "Gender":
        try:
            return cls(token.strip())
        except ValueError:
            raise ValueError(f"unknown gender {token!r}") from None


AGES: tuple[AgeBucket, ...] = tuple(AgeBucket)
GENDERS: tuple[Gender, ...] = tuple(Gender)
N_STRATA = len(AGES) * len(GENDERS)


@dataclass(frozen=True, order=True)
class Stratum:
    age: AgeBucket
    gender: Gender

    @property
    def label(self) -> str:
        return f"{self.age.value}|{self.gender.value}"

    @classmethod
    def from_label(cls, label: str) -> "Stratum":
        age, _, gender = label.partition("|")
        return cls(AgeBucket.parse(age), Gender.parse(gender))

    def __str__(self) -> str:
        return self.label


def stratum_index(s: Stratum) -> int:
    """Position of `s` in the canonical age-major ordering."""
    return AGES.index(s.age) * len(GENDERS) + GENDERS.index(s.gender)


def stratum_at(index: int) -> Stratum:
    if not 0 <= index < N_STRATA:
        raise IndexError(f"stratum index {index} outside [0, {N_STRATA})")
    a, g = divmod(index, len(GENDERS))
    return Stratum(AGES[a], GENDERS[g])


STRATA: tuple[Stratum, ...] = tuple(stratum_at(k) for k in range(N_STRATA))
STRATUM_LABELS: tuple[str, ...] = tuple(s.label for s in STRATA)


def iter_strata() -> Iterator[Stratum]:
    return iter(STRATA)


def age_of(k: int) -> int:
    return k // len(GENDERS)


def gender_of(k: int) -> int:
    return k % len(GENDERS)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class _CountTable:
    """Per-(region, stratum) integer counts, one row per region in canonical stratum order."""

    regions: tuple[str, ...]
    region_country: Mapping[str, str]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[1] != N_STRATA:
            raise ValueError(f"counts must have shape (regions, {N_STRATA}), got {counts.shape}")
        if counts.shape[0] != len(self.regions):
            raise ValueError("counts rows do not match region list")
        if len(set(self.regions)) != len(self.regions):
            raise ValueError("duplicate region identifiers")
        for r in self.regions:
            if not r:
                raise ValueError("empty region identifier")
            if not self.region_country.get(r):
                raise ValueError(f"region {r!r} has no country")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise ValueError("counts must be integers")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            bad = np.argwhere(counts < 0)[0]
            raise ValueError(
                f"negative count in region {self.regions[bad[0]]!r}, stratum {STRATUM_LABELS[bad[1]]}"
            )
        object.__setattr__(self, "counts", _frozen(counts))
        object.__setattr__(
            self, "region_country", dict((r, self.region_country[r]) for r in self.regions)
        )

    @property
    def countries(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for r in self.regions:
            seen.setdefault(self.region_country[r], None)
        return tuple(seen)

    @property
    def country_of_rows(self) -> np.ndarray:
        return np.array([self.region_country[r] for r in self.regions], dtype=object)

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def distribution(self) -> np.ndarray:
        """Global stratum distribution, summing to one."""
        joint = self.counts.sum(axis=0).astype(float)
        return joint / joint.sum()

    def row(self, region: str) -> np.ndarray:
        return self.counts[self.regions.index(region)]

    def subset(self, regions: Sequence[str]) -> "_CountTable":
        idx = [self.regions.index(r) for r in regions]
        return type(self)(tuple(regions), self.region_country, self.counts[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.regions:
            h.update(f"{self.region_country[r]}\x1f{r}\x1e".encode())
        h.update(np.ascontiguousarray(self.counts, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class CensusTable(_CountTable):
    """Ground-truth population counts N^i(a,g)."""

    def __post_init__(self):
        super().__post_init__()
        empty = [r for r, t in zip(self.regions, self.totals) if t <= 0]
        if empty:
            raise ValueError(f"region {empty[0]!r} has zero population in every stratum")


@dataclass(frozen=True)
class PlatformTable(_CountTable):
    """Observed platform account counts M^i(a,g)."""

    @property
    def zero_regions(self) -> tuple[str, ...]:
        return tuple(r for r, t in zip(self.regions, self.totals) if t == 0)


class Scope(str, enum.Enum):
    GLOBAL = "global"
    COUNTRY = "per-country"
    REGION = "per-region"


@dataclass(frozen=True)
class InclusionProbabilityTable:
    """Estimated or true inclusion probabilities.

    ``values`` has one row per unit (``units``) and one column per label in
    ``columns`` (8 joint strata, or the 4 ages / 2 genders of a marginal fit).
    Values outside (0, 1] are kept as-is and marked in ``valid``.
    """

    scope: Scope
    units: tuple[str, ...]
    columns: tuple[str, ...]
    values: np.ndarray
    nu: float | None = None
    phi: np.ndarray | None = None
    f1: np.ndarray | None = None
    f2: np.ndarray | None = None
    normalization: str | None = None
    valid: np.ndarray = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.units), len(self.columns)):
            raise ValueError(f"values shape {values.shape} does not match units x columns")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "valid", _frozen(np.isfinite(values) & (values > 0) & (values <= 1)))
        for name in ("phi", "f1", "f2"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen(np.asarray(v, dtype=float)))

    @property
    def n_flagged(self) -> int:
        return int((~self.valid).sum())

    def get(self, unit: str, column: str) -> float:
        return float(self.values[self.units.index(unit), self.columns.index(column)])


@dataclass(frozen=True)
class CovariateTable:
    """Per-region covariates; NaN marks an absent value."""

    regions: tuple[str, ...]
    area: np.ndarray
    density: np.ndarray
    income: np.ndarray

    NAMES = ("area_km2", "density", "income")

    def __post_init__(self):
        for name, col in zip(self.NAMES, (self.area, self.density, self.income)):
            col = np.asarray(col, dtype=float)
            if col.shape != (len(self.regions),):
                raise ValueError(f"{name} has wrong length")
            present = col[~np.isnan(col)]
            if np.any(~np.isfinite(present)) or np.any(present <= 0):
                raise ValueError(f"{name} values must be finite and > 0")
        object.__setattr__(self, "area", _frozen(np.asarray(self.area, dtype=float)))
        object.__setattr__(self, "density", _frozen(np.asarray(self.density, dtype=float)))
        object.__setattr__(self, "income", _frozen(np.asarray(self.income, dtype=float)))

    def column(self, name: str) -> np.ndarray:
        return {"area_km2": self.area, "density": self.density, "income": self.income}[name]

