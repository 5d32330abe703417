import csv
import json

import pytest

from mmhop.calibrate import synthetic_drop_log
from mmhop.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, SIM_COLUMNS, main


@pytest.fixture(scope="module")
def solution_files(tmp_path_factory, double_solutions, single_solutions):
    d = tmp_path_factory.mktemp("sols")
    files = {}
    for name, sol in (("double", double_solutions[0.3]), ("single", single_solutions[0.3])):
        files[name] = d / f"{name}.json"
        sol.save(files[name])
    return files


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def strip_meta(path):
    d = json.loads(path.read_text())
    d.pop("metadata", None)
    return d


def test_optimize_outputs(tmp_path):
    out = tmp_path / "opt"
    assert main(["optimize", "--variant", "double", "--heights", "0.3", "--knots", "10", "--out", str(out)]) == EXIT_OK
    names = {p.name for p in out.iterdir()}
    assert names == {"solution_H0.300.json", "control_H0.300.csv", "summary.json", "summary.csv"}
    assert rows(out / "control_H0.300.csv")[0] == ["t", "u", "I"]
    summary = rows(out / "summary.csv")
    assert summary[1][1] == "True" and summary[1][5].isdigit()


def test_optimize_rerun_identical_except_metadata(tmp_path):
    args = ["optimize", "--variant", "single", "--heights", "0.2", "--knots", "8"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("solution_H0.200.json", "summary.json"):
        assert strip_meta(tmp_path / "a" / name) == strip_meta(tmp_path / "b" / name)
    for name in ("control_H0.200.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate(tmp_path, solution_files):
    out = tmp_path / "sim"
    code = main(["simulate", "--solution", str(solution_files["double"]), "--hops", "5", "--out", str(out)])
    assert code == EXIT_OK
    assert tuple(rows(out / "timeseries.csv")[0]) == SIM_COLUMNS
    apex = rows(out / "apexes.csv")
    assert len(apex) == 6 and all(abs(float(r[3])) < 0.01 for r in apex[1:])
    assert json.loads((out / "simulate.json").read_text())["hops_completed"] == 5


def test_simulate_zero_hops_writes_headers(tmp_path, solution_files):
    out = tmp_path / "sim0"
    assert main(["simulate", "--solution", str(solution_files["double"]), "--hops", "0", "--out", str(out)]) == EXIT_OK
    assert (out / "apexes.csv").read_text() == "hop,t,clearance,relative_error\n"


def test_simulate_with_pd(tmp_path, solution_files):
    out = tmp_path / "simpd"
    code = main(["simulate", "--solution", str(solution_files["single"]), "--pd", "100,30", "--hops", "3",
                 "--out", str(out)])
    assert code == EXIT_OK
    assert json.loads((out / "simulate.json").read_text())["pd"] == [100.0, 30.0]


def test_stability_single_open_loop_not_stable(tmp_path, solution_files):
    out = tmp_path / "stab"
    assert main(["stability", "--solution", str(solution_files["single"]), "--out", str(out)]) == EXIT_OK
    d = json.loads((out / "stability.json").read_text())
    assert d["stable"] is False and d["lambda_max"] > 0.99
    assert rows(out / "jacobian.csv")[0] == ["z_b", "y", "dy", "delta", "ddelta"]


def test_stability_single_with_pd(tmp_path, solution_files):
    out = tmp_path / "stabpd"
    args = ["stability", "--solution", str(solution_files["single"]), "--pd", "100,30", "--out", str(out)]
    assert main(args) == EXIT_OK
    d = json.loads((out / "stability.json").read_text())
    assert d["stable"] is True and d["lambda_max"] < 1.0


def test_report(tmp_path):
    out = tmp_path / "rep"
    assert main(["report", "--heights", "0.2", "--knots", "10", "--out", str(out)]) == EXIT_OK
    table = rows(out / "table.csv")
    assert table[0][0] == "H_f" and len(table) == 2
    assert float(table[1][4]) < float(table[1][1])  # double-spring needs less peak force


def test_fit(tmp_path, double_params):
    log = tmp_path / "drop.csv"
    synthetic_drop_log(double_params, duration=0.4, rate=250).to_csv(log)
    out = tmp_path / "fit"
    code = main(["fit", "--log", str(log), "--free", "k_s,c_s", "--perturb", "0.1", "--seed", "3", "--out", str(out)])
    assert code == EXIT_OK
    d = json.loads((out / "fit.json").read_text())
    assert d["fitted"]["k_s"] == pytest.approx(double_params.k_s, rel=1e-3)
    assert (out / "fitted_params.json").is_file()
    assert rows(out / "fit_trace.csv")[0] == ["t", "z_b_log", "z_b_fit", "y_log", "y_fit", "delta_log", "delta_fit"]


def test_config_file_and_override(tmp_path, solution_files):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"solution": str(solution_files["double"]), "hops": 2, "out": str(tmp_path / "c")}))
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    assert json.loads((tmp_path / "c" / "simulate.json").read_text())["hops_completed"] == 2
    assert main(["simulate", "--config", str(cfg), "--hops", "3"]) == EXIT_OK
    assert json.loads((tmp_path / "c" / "simulate.json").read_text())["hops_completed"] == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["optimize", "--heights", "1.5"],
        ["optimize", "--heights", "abc"],
        ["stability", "--pd", "1"],
        ["simulate", "--solution", "/no/such/file.json"],
        ["optimize", "--params", "/no/such/params.json"],
    ],
)
def test_config_errors_exit_2(tmp_path, argv, capsys):
    assert main(argv + ["--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "mmhop" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_bad_params_file_reports_line(tmp_path, capsys):
    bad = tmp_path / "p.json"
    bad.write_text('{\n"M0": 2.7,\n"Mm": oops\n}\n')
    assert main(["optimize", "--params", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "p.json:3" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_invalid_params_values_exit_2(tmp_path, double_params):
    d = double_params.to_dict()
    d["k_s"] = -1.0
    bad = tmp_path / "p.json"
    bad.write_text(json.dumps(d))
    assert main(["optimize", "--params", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_unknown_variant_rejected_by_parser():
    with pytest.raises(SystemExit) as exc:
        main(["optimize", "--variant", "triple"])
    assert exc.value.code == 2


def test_unconverged_solution_exit_3(tmp_path, solution_files):
    d = json.loads(solution_files["double"].read_text())
    d["converged"] = False
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    assert main(["simulate", "--solution", str(bad), "--out", str(tmp_path / "x")]) == EXIT_NUMERIC
