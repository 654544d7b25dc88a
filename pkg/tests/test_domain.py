import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debias.domain import (
    AGES,
    GENDERS,
    N_STRATA,
    STRATUM_LABELS,
    AgeBucket,
    CensusTable,
    CovariateTable,
    Gender,
    InclusionProbabilityTable,
    PlatformTable,
    Scope,
    Stratum,
    age_of,
    gender_of,
    iter_strata,
    stratum_at,
    stratum_index,
)


def test_first_and_last_index():
    assert stratum_index(Stratum(AgeBucket("0-18"), Gender("female"))) == 0
    assert stratum_index(Stratum(AgeBucket("40-99"), Gender("male"))) == 7


def test_index_round_trip():
    for k in range(N_STRATA):
        assert stratum_index(stratum_at(k)) == k
        assert age_of(k) == AGES.index(stratum_at(k).age)
        assert gender_of(k) == GENDERS.index(stratum_at(k).gender)


def test_canonical_order_is_age_major():
    assert STRATUM_LABELS == (
        "0-18|female", "0-18|male", "19-29|female", "19-29|male",
        "30-39|female", "30-39|male", "40-99|female", "40-99|male",
    )
    assert [s.label for s in iter_strata()] == list(STRATUM_LABELS)


def test_label_parse():
    s = Stratum.from_label("30-39|male")
    assert s.age is AgeBucket.A30_39 and s.gender is Gender.MALE
    with pytest.raises(ValueError, match="unknown gender"):
        Stratum.from_label("30-39|nonbinary")
    with pytest.raises(ValueError, match="unknown age"):
        AgeBucket.parse("18-29")


def _census(counts, regions=("a", "b")):
    return CensusTable(tuple(regions), {r: "X" for r in regions}, np.asarray(counts))


def test_census_totals_and_distribution():
    c = _census([[100] * 8, [1, 2, 3, 4, 5, 6, 7, 8]])
    assert c.totals.tolist() == [800, 36]
    assert c.total == 836
    assert c.distribution.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 10**9), min_size=8, max_size=8), min_size=1, max_size=20))
def test_sum_invariants(rows):
    rows = [r if sum(r) > 0 else [1] * 8 for r in rows]
    regions = [f"r{i}" for i in range(len(rows))]
    c = _census(rows, regions)
    assert int(c.totals.sum()) == c.total
    assert abs(c.distribution.sum() - 1.0) <= 1e-12


def test_census_rejects_bad_values():
    with pytest.raises(ValueError):
        _census([[-1] + [1] * 7, [1] * 8])
    with pytest.raises(ValueError):
        _census([[0] * 8, [1] * 8])
    with pytest.raises(ValueError):
        _census([[1.5] * 8, [1] * 8])
    with pytest.raises(ValueError):
        _census([[1] * 7, [1] * 7])
    with pytest.raises(ValueError):
        CensusTable(("a", "a"), {"a": "X"}, np.ones((2, 8), dtype=int))


def test_counts_are_read_only():
    c = _census([[1] * 8, [2] * 8])
    with pytest.raises(ValueError):
        c.counts[0, 0] = 5


def test_platform_zero_region_flagged():
    p = PlatformTable(("a", "b"), {"a": "X", "b": "X"}, np.array([[0] * 8, [1] * 8]))
    assert p.zero_regions == ("a",)


def test_digest_changes_with_counts():
    a = _census([[1] * 8, [2] * 8])
    b = _census([[1] * 8, [3] * 8])
    assert a.digest() == _census([[1] * 8, [2] * 8]).digest()
    assert a.digest() != b.digest()


def test_inclusion_table_flags_without_clamping():
    t = InclusionProbabilityTable(Scope.GLOBAL, ("all",), ("M",), np.array([[2.0]]))
    assert t.n_flagged == 1
    assert t.get("all", "M") == 2.0
    ok = InclusionProbabilityTable(Scope.GLOBAL, ("all",), ("M",), np.array([[0.1]]))
    assert ok.n_flagged == 0


def test_covariate_table_absent_and_positive():
    t = CovariateTable(("a",), np.array([100.0]), np.array([50.0]), np.array([np.nan]))
    assert np.isnan(t.column("income")[0])
    with pytest.raises(ValueError):
        CovariateTable(("a",), np.array([100.0]), np.array([-1.0]), np.array([1.0]))
