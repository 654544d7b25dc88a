import csv
import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from debias.cli import main
from debias.evaluate import mape
from debias.ingest import align, parse_census, parse_platform_aggregated
from debias.models import from_json, predict_population

NOISELESS = """\
# noiseless homogeneous, two countries
seed = 1
countries = 2
regions_per_country = 15
region_median = 1e10
noise = expected
pi = 0.05,0.1,0.15,0.2,0.12,0.08,0.25,0.03
"""

SMALL = """\
seed = 4
countries = 3
regions_per_country = 10
region_median = 5e4
pi = 0.05,0.1,0.15,0.2,0.12,0.08,0.25,0.03
country_multipliers = 0.8,1.0,1.3
region_noise = 0.1
org_rate = 0.1
org_concentration = 1.5
emit_users = true
"""


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def noiseless(tmp_path_factory):
    d = tmp_path_factory.mktemp("noiseless")
    (d / "cfg.txt").write_text(NOISELESS)
    assert main(["simulate", str(d / "cfg.txt"), "--out", str(d / "sim")]) == 0
    return d


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    (d / "cfg.txt").write_text(SMALL)
    assert main(["simulate", str(d / "cfg.txt"), "--out", str(d / "sim")]) == 0
    return d


def test_simulate_writes_files_and_is_deterministic(small, tmp_path):
    sim = small / "sim"
    names = {"census.csv", "platform.csv", "truth_pi.csv", "users.csv", "manifest.json"}
    assert {p.name for p in sim.iterdir()} == names
    assert main(["simulate", str(small / "cfg.txt"), "--out", str(tmp_path / "again")]) == 0
    for name in names - {"manifest.json"}:
        assert (sim / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    m1 = json.loads((sim / "manifest.json").read_text())
    m2 = json.loads((tmp_path / "again" / "manifest.json").read_text())
    m1.pop("duration_s"), m2.pop("duration_s")
    m1["options"].pop("out"), m2["options"].pop("out")
    assert m1 == m2
    assert m1["inputs"][str(small / "cfg.txt")] == _sha(small / "cfg.txt")
    assert m1["seed"] == 4 and m1["version"]


def test_simulate_output_reingests_cleanly(small):
    census = parse_census(small / "sim" / "census.csv")
    platform = parse_platform_aggregated(small / "sim" / "platform.csv")
    ds = align(census, platform)
    assert ds.dropped_census == () and ds.dropped_platform == ()
    truth = _read(small / "sim" / "truth_pi.csv")
    assert list(truth[0]) == ["scope", "country", "age_bucket", "gender", "pi"]
    assert len(truth) == 8 * (1 + 3)


def test_simulate_seed_override(small, tmp_path):
    assert main(["simulate", str(small / "cfg.txt"), "--seed", "5", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "census.csv").read_bytes() != (small / "sim" / "census.csv").read_bytes()
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 5


def test_simulate_invalid_config(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("pi = 0.1,0.1,0.1,0.1,0.1,0.1,0.1,1.5\n")
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "pi" in capsys.readouterr().err
    cfg.write_text("regions = 4\n")
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "regions" in capsys.readouterr().err


def test_fit_prints_pi_matching_truth(noiseless, tmp_path, capsys):
    sim = noiseless / "sim"
    rc = main(["fit", "--family", "joint", "--census", str(sim / "census.csv"),
               "--platform", str(sim / "platform.csv"), "--out", str(tmp_path)])
    assert rc == 0
    printed = {}
    for line in capsys.readouterr().out.splitlines():
        if line.startswith("pi_hat "):
            _, label, value = line.split()[:3]
            printed[label] = float(value)
    truth = {f"{r['age_bucket']}|{r['gender']}": float(r["pi"]) for r in _read(sim / "truth_pi.csv") if r["scope"] == "global"}
    assert printed.keys() == truth.keys()
    for k in truth:
        assert printed[k] == pytest.approx(truth[k], rel=1e-6)
    assert {p.name for p in tmp_path.iterdir()} == {"model.json", "manifest.json"}


def test_fit_unknown_family(capsys):
    with pytest.raises(SystemExit) as e:
        main(["fit", "--family", "bogus", "--census", "x", "--out", "y"])
    assert e.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_fit_from_users_with_org_filter(small, tmp_path, capsys):
    sim = small / "sim"
    base = ["fit", "--family", "joint", "--census", str(sim / "census.csv"), "--users", str(sim / "users.csv")]
    assert main(base + ["--org-threshold", "0.5", "--out", str(tmp_path / "a")]) == 0
    err = capsys.readouterr().err
    assert "organizations excluded" in err and " 0 organizations" not in err
    assert main(base + ["--org-threshold", "1.5", "--out", str(tmp_path / "b")]) == 2


def test_solver_failure_exit_one(tmp_path, capsys):
    rows = ["country,region,age_bucket,gender,population"]
    prow = ["country,region,age_bucket,gender,count"]
    strata = [(a, g) for a in ("0-18", "19-29", "30-39", "40-99") for g in ("female", "male")]
    for i in range(4):
        for a, g in strata:
            rows.append(f"C1,r{i},{a},{g},{1000 * (i + 1)}")
            prow.append(f"C1,r{i},{a},{g},{10 * (i + 1)}")
    (tmp_path / "c.csv").write_text("\n".join(rows) + "\n")
    (tmp_path / "p.csv").write_text("\n".join(prow) + "\n")
    rc = main(["fit", "--family", "joint", "--census", str(tmp_path / "c.csv"), "--platform", str(tmp_path / "p.csv"),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "observations for 8 coefficients" in capsys.readouterr().err


def test_missing_input_is_usage_error(tmp_path):
    assert main(["fit", "--family", "joint", "--census", str(tmp_path / "nope.csv"),
                 "--platform", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2


def _fit(sim, out, family, *extra):
    assert main(["fit", "--family", family, "--census", str(sim / "census.csv"),
                 "--platform", str(sim / "platform.csv"), "--out", str(out), *extra]) == 0
    return out / "model.json"


def test_predict_round_trip_bit_exact(small, tmp_path):
    sim = small / "sim"
    for family, extra in (("joint", ("--multilevel",)), ("joint-log", ())):
        model_path = _fit(sim, tmp_path / family, family, *extra)
        out = tmp_path / f"pred-{family}"
        assert main(["predict", "--model", str(model_path), "--platform", str(sim / "platform.csv"), "--out", str(out)]) == 0
        rows = _read(out / "predictions.csv")
        assert list(rows[0]) == ["region", "country", "stratum_or_total", "pred_n", "used_random_effects"]
        model = from_json(model_path.read_text())
        pred = predict_population(model, parse_platform_aggregated(sim / "platform.csv"))
        totals = [float(r["pred_n"]) for r in rows if r["stratum_or_total"] == "total"]
        assert np.array(totals).tobytes() == pred.totals.tobytes()
        if family == "joint-log":
            by_region = {}
            for r in rows:
                if r["stratum_or_total"] != "total":
                    by_region[r["region"]] = by_region.get(r["region"], 0.0) + float(r["pred_n"])
            for r in rows:
                if r["stratum_or_total"] == "total":
                    assert float(r["pred_n"]) == pytest.approx(by_region[r["region"]], rel=1e-9)


def test_predict_noiseless_interpolates(noiseless, tmp_path):
    sim = noiseless / "sim"
    model_path = _fit(sim, tmp_path / "m", "joint")
    assert main(["predict", "--model", str(model_path), "--platform", str(sim / "platform.csv"), "--out", str(tmp_path / "p")]) == 0
    census = parse_census(sim / "census.csv")
    pred = {r["region"]: float(r["pred_n"]) for r in _read(tmp_path / "p" / "predictions.csv")}
    for region, total in zip(census.regions, census.totals):
        assert pred[region] == pytest.approx(float(total), rel=1e-6)


def test_predict_unseen_country_flag(small, tmp_path):
    sim = small / "sim"
    model_path = _fit(sim, tmp_path / "m", "joint", "--multilevel")
    lines = (sim / "platform.csv").read_text().splitlines()
    moved = [lines[0]] + [ln.replace("C01,", "NEW,", 1) if ln.startswith("C01,") else ln for ln in lines[1:]]
    (tmp_path / "p.csv").write_text("\n".join(moved) + "\n")
    assert main(["predict", "--model", str(model_path), "--platform", str(tmp_path / "p.csv"), "--out", str(tmp_path / "o")]) == 0
    for r in _read(tmp_path / "o" / "predictions.csv"):
        assert r["used_random_effects"] == ("false" if r["country"] == "NEW" else "true")


def test_predict_rejects_tampered_model(small, tmp_path):
    sim = small / "sim"
    model_path = _fit(sim, tmp_path / "m", "joint")
    doc = json.loads(model_path.read_text())
    doc["family"] = "gender"
    model_path.write_text(json.dumps(doc))
    assert main(["predict", "--model", str(model_path), "--platform", str(sim / "platform.csv"), "--out", str(tmp_path / "o")]) != 0


def _evaluate(sim, out, families="joint,joint-log", cv="loro", *extra):
    return main(["evaluate", "--families", families, "--cv", cv, "--census", str(sim / "census.csv"),
                 "--platform", str(sim / "platform.csv"), "--bootstrap", "200", "--seed", "3", "--out", str(out), *extra])


def test_evaluate_outputs(small, tmp_path, capsys):
    sim = small / "sim"
    regions = [r["region"] for r in _read(sim / "census.csv")][::8]
    cov = ["region,area_km2,density,income"] + [f"{r},{10 + i},{5 + 2 * i},{'' if i == 0 else 100 + i}" for i, r in enumerate(regions)]
    (tmp_path / "cov.csv").write_text("\n".join(cov) + "\n")
    assert _evaluate(sim, tmp_path / "a", "joint,joint-log", "loro", "--covariates", str(tmp_path / "cov.csv")) == 0
    out = capsys.readouterr().out
    assert "joint-log" in out and "MAPE" in out
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert list(report["families"]) == ["joint", "joint-log"]
    assert report["region_mape_family"] == "joint-log"
    assert {p.name for p in (tmp_path / "a").iterdir()} == {
        "report.json", "scatter.csv", "region_mape.csv", "correlations.csv", "manifest.json"}
    scatter = _read(tmp_path / "a" / "scatter.csv")
    for fam, entry in report["families"].items():
        rows = [r for r in scatter if r["family"] == fam]
        recomputed = mape([float(r["pred_n"]) for r in rows], [float(r["true_n"]) for r in rows])
        assert abs(recomputed - entry["mape"]) <= 1e-9
    corr = _read(tmp_path / "a" / "correlations.csv")
    assert {r["covariate"] for r in corr} == {"area_km2", "density", "income"}


def test_evaluate_deterministic_with_threads(small, tmp_path, monkeypatch):
    sim = small / "sim"
    monkeypatch.setenv("DEBIAS_THREADS", "1")
    assert _evaluate(sim, tmp_path / "a", "baseline,joint", "loco", "--multilevel") == 0
    monkeypatch.setenv("DEBIAS_THREADS", "3")
    assert _evaluate(sim, tmp_path / "b", "baseline,joint", "loco", "--multilevel") == 0
    for name in ("report.json", "scatter.csv", "region_mape.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    monkeypatch.setenv("DEBIAS_THREADS", "many")
    assert _evaluate(sim, tmp_path / "c", "joint") == 2


def test_evaluate_invalid_combinations(small, tmp_path):
    sim = small / "sim"
    assert _evaluate(sim, tmp_path / "x", "joint,joint-log", "loso") == 2
    assert _evaluate(sim, tmp_path / "y", "joint,nonsense") == 2
    assert _evaluate(sim, tmp_path / "z", "joint-log", "loso") == 0
    report = json.loads((tmp_path / "z" / "report.json").read_text())
    assert report["families"]["joint-log"]["unit"] == "stratum"


def test_inspect(small, tmp_path, capsys):
    model_path = _fit(small / "sim", tmp_path / "m", "joint-log", "--multilevel")
    capsys.readouterr()
    assert main(["inspect", str(model_path)]) == 0
    out = capsys.readouterr().out
    assert "variance components" in out and "nu =" in out
    (tmp_path / "junk.json").write_text("{}")
    assert main(["inspect", str(tmp_path / "junk.json")]) == 2


def test_commands_do_not_touch_inputs(small, tmp_path):
    sim = tmp_path / "sim"
    shutil.copytree(small / "sim", sim)
    before = {p.name: _sha(p) for p in sim.iterdir()}
    model_path = _fit(sim, tmp_path / "m", "joint")
    main(["predict", "--model", str(model_path), "--platform", str(sim / "platform.csv"), "--out", str(tmp_path / "p")])
    _evaluate(sim, tmp_path / "e", "joint")
    assert before == {p.name: _sha(p) for p in sim.iterdir()}


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("debias")
    cmd = [exe] if exe else [sys.executable, "-m", "debias"]
    done = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert done.returncode == 0 and "debias" in done.stdout
    done = subprocess.run([sys.executable, "-m", "debias", "evaluate"], capture_output=True, text=True)
    assert done.returncode == 2
