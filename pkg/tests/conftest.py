from __future__ import annotations

import sys

import numpy as np
import pytest

from debias.domain import N_STRATA, CensusTable, PlatformTable
from debias.ingest import align
from debias.simulate import SimulationConfig, generate, homogeneous_pi_draw


def make_tables(N, M, countries=None):
    N = np.asarray(N, dtype=np.int64)
    M = np.asarray(M, dtype=np.int64)
    regions = tuple(f"R{i:03d}" for i in range(len(N)))
    countries = countries or ["C1"] * len(N)
    mapping = dict(zip(regions, countries))
    return CensusTable(regions, mapping, N), PlatformTable(regions, mapping, M)


@pytest.fixture(scope="session")
def noiseless_homogeneous():
    pi = homogeneous_pi_draw(11)
    cfg = SimulationConfig(seed=5, regions_per_country=25, region_median=1e10, noise="expected", pi=pi)
    return pi, generate(cfg)


@pytest.fixture(scope="session")
def two_country_ds():
    cfg = SimulationConfig(
        seed=2, countries=3, regions_per_country=12, region_median=2e5, region_sigma=0.6,
        pi=homogeneous_pi_draw(2), country_multipliers=(0.7, 1.0, 1.5), region_noise=0.1,
    )
    r = generate(cfg)
    return align(r.census, r.platform)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def uniform_counts(R, value):
    return np.full((R, N_STRATA), value, dtype=np.int64)


AGE_F = (300, 500, 700, 900)
GENDER_F = (2, 3)


def exact_log_tables(R=12, countries=None):
    """Integer tables with log N = 0.7 log M + log A(a) + log G(g) exactly.

    M = k**10 and N = k**7 * A * G for small integers k, so the joint-log
    regression has beta_1 = 0.7, intercept log(A0 G0), age effects
    log(A_a / A0) and gender effect log(G1 / G0).
    """
    from debias.domain import age_of, gender_of

    k = 2 + (np.arange(R)[:, None] + 3 * np.arange(N_STRATA)[None, :]) % 5
    A = np.array([AGE_F[age_of(s)] for s in range(N_STRATA)])
    G = np.array([GENDER_F[gender_of(s)] for s in range(N_STRATA)])
    M = k.astype(np.int64) ** 10
    N = k.astype(np.int64) ** 7 * A * G
    return make_tables(N, M, countries)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
