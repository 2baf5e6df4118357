import csv
import json
from importlib.resources import files

import numpy as np
import pytest

from cvdose.cli import main
from cvdose.data import OutcomeKind
from cvdose.errors import ParseError, ValidationError
from cvdose.io import AnalysisConfig, load_scenarios, parse_dataset, write_dataset
from conftest import triangular

DATA = files("cvdose") / "data"
SYNTH = str(DATA / "cart19_synthetic.csv")
CART_CFG = str(DATA / "cart19_config.json")
HEADER = "subject_id,dose_arm,dose_value,exposure,outcome\n"


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def _read(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _config(tmp_path, **fields):
    return _write(tmp_path / "cfg.json", json.dumps(fields))


def test_parse_small_binary_file(tmp_path):
    rows = "".join(f"p{i},{i % 2},{(i % 2) + 1},{1.0 + i / 10},{i % 2}\n" for i in range(6))
    ds = parse_dataset(_write(tmp_path / "d.csv", HEADER + rows))
    assert ds.n_arms == 2 and ds.n == 6
    assert ds.outcome_kind is OutcomeKind.BINARY


def test_parse_with_covariates(tmp_path):
    text = "subject_id,dose_arm,dose_value,exposure,outcome,covariate_age\na,0,1,1.0,2.5,40\nb,1,2,2.0,3.5,50\n"
    ds = parse_dataset(_write(tmp_path / "d.csv", text))
    assert ds.covariate_names == ("age",)
    assert ds.outcome_kind is OutcomeKind.CONTINUOUS
    np.testing.assert_array_equal(ds.covariates[:, 0], [40, 50])


def test_conflicting_dose_names_lines(tmp_path):
    text = HEADER + "a,0,5e7,7.1,0\nb,0,5e8,8.0,1\nc,1,5e8,8.3,1\n"
    with pytest.raises(ParseError) as err:
        parse_dataset(_write(tmp_path / "d.csv", text))
    assert "line 3" in str(err.value) and "line 2" in str(err.value)


def test_bad_number_names_line(tmp_path):
    with pytest.raises(ParseError, match="line 3"):
        parse_dataset(_write(tmp_path / "d.csv", HEADER + "a,0,1,1.0,0\nb,1,2,abc,1\n"))


def test_round_trip(tmp_path):
    ds = triangular(7, seed=1)
    path = tmp_path / "rt.csv"
    write_dataset(ds, path)
    back = parse_dataset(path, outcome_kind="continuous")
    for name in ("arm", "exposure", "outcome", "subject_ids"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    assert back.dose_levels == ds.dose_levels


def test_config_rejects_bad_fields():
    with pytest.raises(ValidationError):
        AnalysisConfig.from_dict({"methods": []})
    with pytest.raises(ValidationError):
        AnalysisConfig.from_dict({"ci_level": 0.96})
    with pytest.raises(ValidationError):
        AnalysisConfig.from_dict({"bootstrap": 50})


def test_analyze_table_layout(tmp_path):
    assert main(["analyze", SYNTH, "--config", CART_CFG, "--out", str(tmp_path)]) == 0
    rows = _read(tmp_path / "estimates.csv")
    assert [(r["label"], r["arm_index"]) for r in rows] == [
        (label, str(k)) for label in ("ANCOVA II", "ANCOVA I", "No adjustment") for k in (0, 1)
    ]
    assert set(rows[0]) >= {"method", "estimate", "se", "ci_low", "ci_high"}
    log = (tmp_path / "analyze.log").read_text()
    assert "form=anova" in log and "family=logistic" in log


def test_analyze_invalid_outcome_exit_2(tmp_path, capsys):
    data = _write(tmp_path / "d.csv", HEADER + "a,0,1,1.0,0\nb,0,1,1.1,0.5\nc,1,2,2.0,1\nd,1,2,2.1,0\n")
    cfg = _config(tmp_path, outcome_kind="binary", working={"family": "logistic"})
    assert main(["analyze", data, "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "binary outcome" in capsys.readouterr().err


def test_analyze_numerical_failure_exit_3(tmp_path):
    # arm 1 all responders: logistic per-arm fit is separated
    rows = "".join(f"l{i},0,1,{1 + i / 10},{i % 2}\n" for i in range(6)) + "".join(f"h{i},1,2,{2 + i / 10},1\n" for i in range(6))
    data = _write(tmp_path / "d.csv", HEADER + rows)
    cfg = _config(tmp_path, working={"family": "logistic", "structure": "ancova2"}, methods=["ancova2"])
    assert main(["analyze", data, "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_intercept_only_matches_unadjusted(tmp_path):
    ds = triangular(10, seed=2)
    data = tmp_path / "d.csv"
    write_dataset(ds, data)
    cfg = _config(tmp_path, working={"include_cv": False}, methods=["ancova2", "ancova1", "unadjusted"])
    assert main(["analyze", str(data), "--config", cfg, "--out", str(tmp_path)]) == 0
    est = {(r["method"], r["arm_index"]): float(r["estimate"]) for r in _read(tmp_path / "estimates.csv")}
    for k in "012":
        assert est[("ancova2", k)] == pytest.approx(est[("unadjusted", k)], abs=1e-10)
        assert est[("ancova1", k)] == pytest.approx(est[("unadjusted", k)], abs=1e-10)


def test_analyze_coefficient_methods(tmp_path):
    ds = triangular(15, seed=3)
    data = tmp_path / "d.csv"
    write_dataset(ds, data)
    cfg = _config(tmp_path, de_spec="proportional", methods=["linear_dr", "composite_slope", "residual_inclusion"])
    assert main(["analyze", str(data), "--config", cfg, "--out", str(tmp_path)]) == 0
    terms = [(r["method"], r["term"]) for r in _read(tmp_path / "coefficients.csv")]
    assert ("linear_dr", "dose") in terms and ("composite_slope", "dose") in terms


def test_diagnose_outputs(tmp_path):
    rng = np.random.default_rng(4)
    arm = np.repeat([0, 1, 2], 50)
    ds = triangular(50, seed=5).replace(exposure=arm + 1.0 + rng.standard_normal(150))
    data = tmp_path / "d.csv"
    write_dataset(ds, data)
    cfg = _config(tmp_path, de_spec="anova")
    assert main(["diagnose", str(data), "--config", cfg, "--out", str(tmp_path)]) == 0
    assert len(_read(tmp_path / "density.csv")) == 3 * 256
    means = [abs(float(r["residual_mean"])) for r in _read(tmp_path / "balance_arms.csv")]
    assert max(means) <= 1e-12
    ks = [float(r["ks_statistic"]) for r in _read(tmp_path / "balance_pairs.csv")]
    assert len(ks) == 3 and max(ks) < 0.25


def _scenario_file(tmp_path, runs, **extra):
    items = [s.to_dict() | {"runs": runs, "truth_sample": 10000, **extra} for s in load_scenarios(DATA / "table1_ancova2.json")]
    return _write(tmp_path / "scen.json", json.dumps(items))


def test_simulate_eight_rows(tmp_path):
    assert main(["simulate", _scenario_file(tmp_path, 4), "--out", str(tmp_path)]) == 0
    assert len(_read(tmp_path / "simulation_report.csv")) == 8
    assert len(_read(tmp_path / "simulation_detail.csv")) == 8


def test_simulate_single_run_marks_na(tmp_path):
    path = _write(tmp_path / "one.json", json.dumps({"n": 60, "runs": 1, "truth_sample": 10000}))
    assert main(["simulate", path, "--out", str(tmp_path)]) == 0
    report = _read(tmp_path / "simulation_report.csv")[0]
    detail = _read(tmp_path / "simulation_detail.csv")[0]
    assert report["var_ratio_mu1"] == "NA"
    assert detail["mc_se_var_ratio_mu1"] == "NA" and detail["mc_se_bias_x10_adj_mu1"] == "NA"


def test_simulate_too_many_failures_exit_3(tmp_path):
    path = _write(tmp_path / "s.json", json.dumps({"n": 60, "b1": 0.3, "b2": 0.2, "outcome_kind": "binary",
                                                   "working_family": "logistic", "runs": 40, "truth_sample": 10000}))  # fmt: skip
    assert main(["simulate", path, "--max-failure-rate", "0", "--out", str(tmp_path)]) == 3


def test_simulate_bad_scenario_exit_2(tmp_path):
    path = _write(tmp_path / "s.json", json.dumps({"n": 60, "runs": 0}))
    assert main(["simulate", path, "--out", str(tmp_path)]) == 2


def test_simulate_repeatable_bytes(tmp_path):
    scen = _scenario_file(tmp_path, 6)
    main(["simulate", scen, "--out", str(tmp_path / "a")])
    main(["simulate", scen, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/simulation_report.csv").read_bytes() == (tmp_path / "b/simulation_report.csv").read_bytes()


def test_true_means_command(tmp_path):
    path = _write(tmp_path / "s.json", json.dumps({"n": 60, "truth_sample": 10000}))
    assert main(["--seed", "5", "true-means", path, "--out", str(tmp_path)]) == 0
    rows = _read(tmp_path / "true_means.csv")
    assert [float(r["true_mu"]) for r in rows] == pytest.approx([1, 2, 3], abs=0.05)
