import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from odsate.cli import (
    EXIT_INPUT,
    EXIT_NUMERIC,
    EXIT_OK,
    load_dataset,
    load_schema,
    main,
    write_dataset,
)
from odsate.core_model import MismeasureSpec
from odsate.errors import ParseError, SchemaError
from odsate.glm_ee import fit_glm_ee

SURROGATE = ["--model", "M1", "--v", "0.036", "--p10", "0.2", "--p01", "0.01", "--treatment-coef", "1.0",
             "--n-sample", "2000", "--replications", "1", "--methods", "glm", "--seed", "7", "--export-sample"]


def run(*argv):
    return main([str(a) for a in argv])


def read(path):
    return json.loads(path.read_text())


def write_csv(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--model", "M1", "--v", 0.01, "--p10", 0.2, "--n-sample", 1000, "--replications", 2,
               "--pool-size", 300_000, "--n-mc", 200_000, "--seed", 5, "--methods", "glm", "--export-sample",
               "--out", out) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def surrogate(tmp_path_factory):
    out = tmp_path_factory.mktemp("surrogate")
    assert run("simulate", *SURROGATE, "--out", out) == EXIT_OK
    return out / "sample.csv"


# -- ingestion ---------------------------------------------------------------------


def test_load_four_rows(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["outcome_star,treatment,age,sex", "1,0,0.5,1", "0,1,0.25,0",
                                       "1,1,1.5,1", "0,0,2.0,0"])
    s = load_dataset(p)
    assert s.n == 4 and s.covariate_names == ("age", "sex")
    np.testing.assert_array_equal(s.x[:, 0], [0.5, 0.25, 1.5, 2.0])


def test_bad_outcome_names_row(tmp_path):
    rows = ["outcome_star,treatment,x"] + [f"{k % 2},{k % 2},{k}" for k in range(6)] + ["2,1,0.3"]
    with pytest.raises(ParseError) as err:
        load_dataset(write_csv(tmp_path / "d.csv", rows))
    assert err.value.row == 7 and "row 7" in str(err.value)


def test_missing_value_and_column(tmp_path):
    with pytest.raises(ParseError) as err:
        load_dataset(write_csv(tmp_path / "a.csv", ["outcome_star,treatment,x", "1,0,0.1", "0,1,"]))
    assert err.value.row == 2 and err.value.column == "x"
    with pytest.raises(SchemaError):
        load_dataset(write_csv(tmp_path / "b.csv", ["outcome_star,x", "1,0.1"]))
    with pytest.raises(SchemaError):
        load_dataset(write_csv(tmp_path / "c.csv", ["outcome_star,treatment,x", "1,0,0.1"]), covariates=["z"])


def test_export_round_trip(exported, tmp_path):
    s = load_dataset(exported / "sample.csv")
    write_dataset(s, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == (exported / "sample.csv").read_bytes()
    again = load_dataset(tmp_path / "again.csv")
    for name in ("y_star", "t", "x"):
        assert np.array_equal(getattr(s, name), getattr(again, name))
    assert s.n == 1000 and s.y_star.sum() == 500


# -- commands ----------------------------------------------------------------------


def test_fit_both_engines(exported, tmp_path):
    code = run("fit", "--input", exported / "sample.csv", "--v", 0.01, "--p10", 0.2, "--engine", "both",
               "--lambda-grid", "1,10,100", "--out", tmp_path)
    assert code == EXIT_OK
    rep = read(tmp_path / "results.json")
    assert [b["engine"] for b in rep["estimates"]] == ["glm", "gam"]
    assert rep["spec"] == {"v": 0.01, "p01": 0.0, "p10": 0.2, "v_star": pytest.approx(0.008)}
    gam = rep["estimates"][1]
    assert gam["lambda_selected"] in (1.0, 10.0, 100.0)
    jsonschema.validate(rep, load_schema())


def test_fit_matches_library(exported, tmp_path):
    run("fit", "--input", exported / "sample.csv", "--v", 0.01, "--p10", 0.2, "--engine", "glm", "--out", tmp_path)
    block = read(tmp_path / "results.json")["estimates"][0]
    direct = fit_glm_ee(load_dataset(exported / "sample.csv"), MismeasureSpec(0.01, 0.0, 0.2))
    assert block["tau_hat"] == direct.tau_hat and block["tau_se"] == direct.tau_se


def test_invalid_rates_exit_two(exported, tmp_path, capsys):
    code = run("fit", "--input", exported / "sample.csv", "--v", 0.01, "--p01", 0.5, "--p10", 0.6, "--out", tmp_path)
    assert code == EXIT_INPUT
    assert "p01+p10<1" in capsys.readouterr().err


def test_input_errors_exit_two(tmp_path):
    assert run("fit", "--input", tmp_path / "missing.csv", "--v", 0.1, "--out", tmp_path) == EXIT_INPUT
    bad = write_csv(tmp_path / "bad.csv", ["outcome_star,treatment,x", "3,0,1"])
    assert run("fit", "--input", bad, "--v", 0.1, "--out", tmp_path) == EXIT_INPUT
    assert run("fit", "--v", 0.1, "--out", tmp_path) == EXIT_INPUT


def test_numerical_failure_exit_three(exported, tmp_path):
    # an assumed false positive rate above the observed case share cannot fit
    code = run("fit", "--input", exported / "sample.csv", "--v", 0.3, "--p01", 0.45, "--p10", 0.0,
               "--engine", "glm", "--out", tmp_path)
    assert code == EXIT_NUMERIC
    block = read(tmp_path / "results.json")["estimates"][0]
    assert block["converged"] is False and "RangeCollapse" in block["error"]


def test_simulate_report(exported):
    rep = read(exported / "results.json")
    jsonschema.validate(rep, load_schema())
    assert rep["scenario"]["model_id"] == "M1" and len(rep["metrics"]) == 1
    header = (exported / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("method,model_id")


def test_simulate_oracle_and_two_rows(tmp_path):
    assert run("simulate", "--v", 0.1, "--n-sample", 400, "--replications", 3, "--pool-size", 50_000,
               "--n-mc", 100_000, "--methods", "glm,oracle", "--out", tmp_path) == EXIT_OK
    rows = read(tmp_path / "results.json")["metrics"]
    assert [r["method"] for r in rows] == ["glm", "oracle"]
    assert rows[1]["coverage_pct"] == 100.0


def test_config_file_with_flag_override(exported, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(f'command = "fit"\ninput = "{exported / "sample.csv"}"\nv = 0.01\np10 = 0.3\nengine = "glm"\n'
                   f'out = "{tmp_path / "a"}"\n')
    assert run("--config", cfg) == EXIT_OK
    assert run("--config", cfg, "--p10", 0.2, "--out", tmp_path / "b") == EXIT_OK
    a = read(tmp_path / "a" / "results.json")
    b = read(tmp_path / "b" / "results.json")
    assert a["spec"]["p10"] == 0.3 and b["spec"]["p10"] == 0.2
    cfg.write_text('command = "fit"\nbogus = 1\n')
    assert run("--config", cfg) == EXIT_INPUT


def test_single_point_grid_equals_fit(exported, tmp_path):
    common = ["--input", exported / "sample.csv", "--v", 0.01, "--p10", 0.2, "--engine", "glm"]
    run("fit", *common, "--out", tmp_path / "f")
    run("sensitivity", *common, "--out", tmp_path / "s")
    fit = read(tmp_path / "f" / "results.json")["estimates"][0]
    point = read(tmp_path / "s" / "results.json")["points"][0]
    assert point["tau_hat"] == fit["tau_hat"]
    assert [point["ci_low"], point["ci_high"]] == fit["tau_ci95"]


def test_grid_row_count_and_schema(exported, tmp_path):
    code = run("sensitivity", "--input", exported / "sample.csv", "--v", "0.008,0.01,0.012", "--p10", "0.15,0.25",
               "--p01", "0,0.001", "--engine", "glm", "--out", tmp_path)
    assert code == EXIT_OK
    rep = read(tmp_path / "results.json")
    jsonschema.validate(rep, load_schema())
    assert rep["n_points"] == 12
    assert len((tmp_path / "sensitivity.csv").read_text().splitlines()) == 13


def test_grid_rejects_invalid_point(exported, tmp_path):
    assert run("sensitivity", "--input", exported / "sample.csv", "--v", "0.01", "--p10", "0.2,0.7",
               "--p01", "0.4", "--out", tmp_path) == EXIT_INPUT


def test_surrogate_sensitivity_cis_exclude_zero(surrogate, tmp_path):
    code = run("sensitivity", "--input", surrogate, "--v", "0.030,0.036,0.045", "--p10", "0.1,0.2,0.3",
               "--p01", "0,0.01,0.02", "--engine", "both", "--lambda-grid", "0.1,1,10,100,1000", "--out", tmp_path)
    assert code == EXIT_OK
    rep = read(tmp_path / "results.json")
    assert rep["n_points"] == 54
    assert rep["n_converged"] == 54
    assert rep["fraction_ci_excludes_zero"] == 1.0
    assert all(p["ci_low"] > 0 for p in rep["points"])


def test_fit_covers_truth_across_seeds(tmp_path):
    hits = 0
    seeds = range(101, 141)
    for seed in seeds:
        d = tmp_path / str(seed)
        assert run("simulate", "--model", "M1", "--v", 0.01, "--p10", 0.2, "--n-sample", 2000, "--replications", 1,
                   "--pool-size", 300_000, "--n-mc", 400_000, "--seed", seed, "--methods", "oracle",
                   "--export-sample", "--out", d) == EXIT_OK
        truth = read(d / "results.json")["true_tau"]
        assert run("fit", "--input", d / "sample.csv", "--v", 0.01, "--p10", 0.2, "--engine", "glm",
                   "--out", d / "fit") == EXIT_OK
        lo, hi = read(d / "fit" / "results.json")["estimates"][0]["tau_ci95"]
        hits += lo <= truth <= hi
    assert hits >= 0.9 * len(seeds)


def test_deterministic_given_seed(tmp_path):
    args = ["simulate", "--v", 0.1, "--n-sample", 400, "--replications", 4, "--pool-size", 50_000,
            "--n-mc", 100_000, "--methods", "glm,iptw", "--seed", 9]
    run(*args, "--out", tmp_path / "a")
    run(*args, "--out", tmp_path / "b", "--jobs", 2)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_console_script_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "odsate.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sensitivity" in proc.stdout
