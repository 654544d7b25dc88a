"""CSV ingestion, user-record aggregation and census/platform alignment."""

from __future__ import annotations

import csv
import io
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO, Union

import numpy as np

from .domain import (
    N_STRATA,
    STRATA,
    AgeBucket,
    CensusTable,
    CovariateTable,
    Gender,
    PlatformTable,
    Stratum,
    stratum_index,
)

CsvSource = Union[str, os.PathLike, TextIO]

CENSUS_HEADER = ("country", "region", "age_bucket", "gender", "population")
PLATFORM_HEADER = ("country", "region", "age_bucket", "gender", "count")
USERS_HEADER = ("user_id", "region", "age_bucket", "gender", "p_org", "conf_age", "conf_gender")
USERS_REQUIRED = 4
COVARIATES_HEADER = ("region", "area_km2", "density", "income")


class IngestError(ValueError):
    """Malformed or inconsistent input file."""


def _open(source: CsvSource) -> tuple[TextIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8"), True
    return source, False


def _read_rows(source: CsvSource, header: Sequence[str], min_columns: int | None = None):
    fh, owned = _open(source)
    try:
        reader = csv.reader(fh)
        try:
            got = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError("empty file, expected header " + ",".join(header)) from None
        if got and got[0].startswith("﻿"):
            got[0] = got[0][1:]
        n_min = len(header) if min_columns is None else min_columns
        if not (n_min <= len(got) <= len(header)) or tuple(got) != tuple(header[: len(got)]):
            raise IngestError(f"bad header {','.join(got)!r}, expected {','.join(header)!r}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(got):
                raise IngestError(f"line {line_no}: expected {len(got)} fields, got {len(row)}")
            rows.append((line_no, dict(zip(got, (c.strip() for c in row)))))
        return rows
    finally:
        if owned:
            fh.close()


def _parse_stratum(row: dict, line_no: int) -> Stratum:
    try:
        return Stratum(AgeBucket.parse(row["age_bucket"]), Gender.parse(row["gender"]))
    except ValueError as exc:
        raise IngestError(f"line {line_no}: {exc}") from None


def _parse_count(text: str, line_no: int, name: str) -> int:
    try:
        value = int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise IngestError(f"line {line_no}: unparsable {name} {text!r}") from None
        if not f.is_integer():
            raise IngestError(f"line {line_no}: {name} {text!r} is not an integer")
        value = int(f)
    if value < 0:
        raise IngestError(f"line {line_no}: negative {name} {value}")
    return value


def _parse_counts(source: CsvSource, header: Sequence[str], value_col: str):
    rows = _read_rows(source, header)
    region_country: dict[str, str] = {}
    cells: dict[str, dict[int, int]] = {}
    for line_no, row in rows:
        country, region = row["country"], row["region"]
        if not country or not region:
            raise IngestError(f"line {line_no}: empty country or region")
        prev = region_country.setdefault(region, country)
        if prev != country:
            raise IngestError(f"line {line_no}: region {region!r} assigned to both {prev!r} and {country!r}")
        s = _parse_stratum(row, line_no)
        k = stratum_index(s)
        per_region = cells.setdefault(region, {})
        if k in per_region:
            raise IngestError(f"line {line_no}: duplicate cell ({region}, {s.label})")
        per_region[k] = _parse_count(row[value_col], line_no, value_col)
    if not cells:
        raise IngestError("no data rows")
    regions = tuple(cells)
    counts = np.zeros((len(regions), N_STRATA), dtype=np.int64)
    for i, r in enumerate(regions):
        missing = [STRATA[k].label for k in range(N_STRATA) if k not in cells[r]]
        if missing:
            raise IngestError(f"missing stratum {missing[0]} for region {r!r}")
        counts[i] = [cells[r][k] for k in range(N_STRATA)]
    return regions, region_country, counts


def parse_census(source: CsvSource) -> CensusTable:
    regions, region_country, counts = _parse_counts(source, CENSUS_HEADER, "population")
    try:
        return CensusTable(regions, region_country, counts)
    except ValueError as exc:
        raise IngestError(str(exc)) from None


def parse_platform_aggregated(source: CsvSource) -> PlatformTable:
    regions, region_country, counts = _parse_counts(source, PLATFORM_HEADER, "count")
    return PlatformTable(regions, region_country, counts)


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    region: str
    age: AgeBucket
    gender: Gender
    p_org: float = 0.0
    conf_age: float = 1.0
    conf_gender: float = 1.0

    def __post_init__(self):
        for name in ("p_org", "conf_age", "conf_gender"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1] for user {self.user_id!r}")

    @property
    def stratum(self) -> Stratum:
        return Stratum(self.age, self.gender)


@dataclass(frozen=True)
class UserParseDiagnostics:
    total_rows: int
    rejected_gender: int
    rejected_age: int


def parse_users(source: CsvSource) -> tuple[list[UserRecord], UserParseDiagnostics]:
    """Read user-level labels.

    Rows whose gender or age token is outside the schema (e.g. non-binary or
    unknown) are rejected and counted rather than raising; any other
    malformed field is a hard error.
    """
    rows = _read_rows(source, USERS_HEADER, min_columns=USERS_REQUIRED)
    records = []
    bad_gender = bad_age = 0
    for line_no, row in rows:
        try:
            gender = Gender.parse(row["gender"])
        except ValueError:
            bad_gender += 1
            continue
        try:
            age = AgeBucket.parse(row["age_bucket"])
        except ValueError:
            bad_age += 1
            continue
        extra = {}
        for name in ("p_org", "conf_age", "conf_gender"):
            text = row.get(name, "")
            if text == "":
                continue
            try:
                extra[name] = float(text)
            except ValueError:
                raise IngestError(f"line {line_no}: unparsable {name} {text!r}") from None
        try:
            records.append(UserRecord(row["user_id"], row["region"], age, gender, **extra))
        except ValueError as exc:
            raise IngestError(f"line {line_no}: {exc}") from None
    return records, UserParseDiagnostics(len(rows), bad_gender, bad_age)


@dataclass(frozen=True)
class AggregationOptions:
    """``org_threshold=None`` keeps organizations; otherwise p_org >= threshold is excluded."""

    org_threshold: float | None = None
    min_conf_age: float = 0.0
    min_conf_gender: float = 0.0

    def __post_init__(self):
        for name in ("org_threshold", "min_conf_age", "min_conf_gender"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class AggregationDiagnostics:
    total: int
    retained: int
    org_excluded: int
    confidence_excluded: int
    unresolvable: int
    unresolvable_regions: tuple[str, ...] = field(default=())


def aggregate_user_records(
    records: Iterable[UserRecord],
    opts: AggregationOptions,
    region_country: Mapping[str, str],
) -> tuple[PlatformTable, AggregationDiagnostics]:
    """Tally user records into a PlatformTable over the regions of `region_country`."""
    regions = tuple(region_country)
    row_of = {r: i for i, r in enumerate(regions)}
    counts = np.zeros((len(regions), N_STRATA), dtype=np.int64)
    total = org = conf = 0
    unresolved: Counter[str] = Counter()
    for rec in records:
        total += 1
        i = row_of.get(rec.region)
        if i is None:
            unresolved[rec.region] += 1
            continue
        if opts.org_threshold is not None and rec.p_org >= opts.org_threshold:
            org += 1
            continue
        if rec.conf_age < opts.min_conf_age or rec.conf_gender < opts.min_conf_gender:
            conf += 1
            continue
        counts[i, stratum_index(rec.stratum)] += 1
    n_unres = sum(unresolved.values())
    diag = AggregationDiagnostics(
        total=total,
        retained=total - org - conf - n_unres,
        org_excluded=org,
        confidence_excluded=conf,
        unresolvable=n_unres,
        unresolvable_regions=tuple(sorted(unresolved)),
    )
    return PlatformTable(regions, region_country, counts), diag


def parse_covariates(source: CsvSource) -> CovariateTable:
    rows = _read_rows(source, COVARIATES_HEADER)
    regions: list[str] = []
    cols: dict[str, list[float]] = {n: [] for n in COVARIATES_HEADER[1:]}
    for line_no, row in rows:
        region = row["region"]
        if not region:
            raise IngestError(f"line {line_no}: empty region")
        if region in regions:
            raise IngestError(f"line {line_no}: duplicate region {region!r}")
        regions.append(region)
        for name in COVARIATES_HEADER[1:]:
            text = row[name]
            if text == "":
                cols[name].append(float("nan"))
                continue
            try:
                v = float(text)
            except ValueError:
                raise IngestError(f"line {line_no}: unparsable {name} {text!r}") from None
            if not np.isfinite(v) or v <= 0:
                raise IngestError(f"line {line_no}: {name} must be finite and > 0, got {text!r}")
            cols[name].append(v)
    return CovariateTable(tuple(regions), *(np.array(cols[n]) for n in COVARIATES_HEADER[1:]))


@dataclass(frozen=True)
class Dataset:
    """Census and platform counts over a common, ordered region set.

    ``cell_mask`` marks (region, stratum) cells usable for training; cells
    masked out are held out from per-stratum models.
    """

    census: CensusTable
    platform: PlatformTable
    dropped_census: tuple[str, ...] = ()
    dropped_platform: tuple[str, ...] = ()
    cell_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.census.regions != self.platform.regions:
            raise ValueError("census and platform regions differ")
        if self.cell_mask is not None:
            mask = np.array(self.cell_mask, dtype=bool)
            if mask.shape != self.census.counts.shape:
                raise ValueError("cell_mask shape mismatch")
            mask.setflags(write=False)
            object.__setattr__(self, "cell_mask", mask)

    @property
    def regions(self) -> tuple[str, ...]:
        return self.census.regions

    @property
    def region_country(self) -> Mapping[str, str]:
        return self.census.region_country

    @property
    def countries(self) -> tuple[str, ...]:
        return self.census.countries

    @property
    def N(self) -> np.ndarray:
        return self.census.counts.astype(float)

    @property
    def M(self) -> np.ndarray:
        return self.platform.counts.astype(float)

    @property
    def mask(self) -> np.ndarray:
        if self.cell_mask is None:
            return np.ones(self.census.counts.shape, dtype=bool)
        return self.cell_mask

    def subset(self, regions: Sequence[str]) -> "Dataset":
        idx = [self.regions.index(r) for r in regions]
        mask = None if self.cell_mask is None else self.cell_mask[idx]
        return Dataset(self.census.subset(regions), self.platform.subset(regions), cell_mask=mask)

    def with_platform(self, platform: PlatformTable) -> "Dataset":
        return Dataset(self.census, platform.subset(self.regions), cell_mask=self.cell_mask)

    def without_strata(self, strata: Iterable[int]) -> "Dataset":
        mask = self.mask.copy()
        mask[:, list(strata)] = False
        return Dataset(self.census, self.platform, cell_mask=mask)

    def digest(self) -> str:
        return self.census.digest()[:32] + self.platform.digest()[:32]


def align(census: CensusTable, platform: PlatformTable) -> Dataset:
    """Restrict both tables to their common regions, in census order."""
    plat = set(platform.regions)
    common = [r for r in census.regions if r in plat]
    if not common:
        raise IngestError("census and platform tables share no regions")
    for r in common:
        if census.region_country[r] != platform.region_country[r]:
            raise IngestError(
                f"region {r!r} belongs to {census.region_country[r]!r} in census "
                f"but {platform.region_country[r]!r} in platform data"
            )
    common_set = set(common)
    return Dataset(
        census.subset(common),
        platform.subset(common),
        dropped_census=tuple(r for r in census.regions if r not in common_set),
        dropped_platform=tuple(r for r in platform.regions if r not in common_set),
    )


def _write_counts(table, out: TextIO, header: Sequence[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r, row in zip(table.regions, table.counts):
        for s, v in zip(STRATA, row):
            w.writerow([table.region_country[r], r, s.age.value, s.gender.value, int(v)])


def write_census(table: CensusTable, out: TextIO) -> None:
    _write_counts(table, out, CENSUS_HEADER)


def write_platform(table: PlatformTable, out: TextIO) -> None:
    _write_counts(table, out, PLATFORM_HEADER)


def write_users(records: Iterable[UserRecord], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(USERS_HEADER)
    for u in records:
        w.writerow([u.user_id, u.region, u.age.value, u.gender.value, repr(u.p_org), repr(u.conf_age), repr(u.conf_gender)])


def write_covariates(table: CovariateTable, out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(COVARIATES_HEADER)
    for i, r in enumerate(table.regions):
        vals = [table.area[i], table.density[i], table.income[i]]
        w.writerow([r] + ["" if np.isnan(v) else repr(float(v)) for v in vals])


def to_text(writer, obj) -> str:
    buf = io.StringIO()
    writer(obj, buf)
    return buf.getvalue()
