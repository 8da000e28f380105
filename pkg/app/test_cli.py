# app/test_cli.py
import json

from app.cli import build_parser, main, parse_seeds


def test_parse_seeds():
    assert parse_seeds("1..5") == [1, 2, 3, 4, 5]
    assert parse_seeds("3,7, 9") == [3, 7, 9]


def test_audit_command(capsys):
    assert main(["audit", "--model", "1 - n", "--instance", "II.11.28", "--samples", "1000"]) == 0
    assert capsys.readouterr().out.startswith("infeasible(")


def test_run_and_table_commands(tmp_path, capsys):
    runs = tmp_path / "runs.jsonl"
    argv = ["run", "--instance", "I.6.20", "--algorithm", "gpsc", "--population-size", "20", "--generations", "2",
            "--max-length", "10", "--audit-samples", "1000", "--out", str(runs)]
    assert main(argv) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["algorithm"] == "GPSC" and printed["instance"] == "I.6.20"
    assert len(runs.read_text(encoding="utf-8").splitlines()) == 1

    assert main(["table", "--in", str(runs), "--style", "median-nmse"]) == 0
    assert "I.6.20" in capsys.readouterr().out


def test_export_command(tmp_path, capsys):
    assert main(["export", "--instance", "Kotanchek", "--split", "out-of-domain", "--noise", "0.1",
                 "--out", str(tmp_path)]) == 0
    written = capsys.readouterr().out.split()
    assert len(written) == 4
    assert (tmp_path / "Kotanchek_out-of-domain_noise0.1_train.csv").exists()


def test_errors_exit_with_status_one(tmp_path):
    assert main(["run", "--instance", "nope", "--algorithm", "GP", "--population-size", "20"]) == 1
    assert main(["experiment", "--config", str(tmp_path / "missing.json")]) == 1


def test_run_flag_enables_check_before_scaling(capsys):
    argv = ["run", "--instance", "II.11.28", "--algorithm", "GPOptSC", "--population-size", "20", "--generations", "2",
            "--max-length", "10", "--audit-samples", "1000", "--paper-faithful"]
    assert main(argv) == 0
    assert json.loads(capsys.readouterr().out)["check_before_scaling"] is True


def test_ordering_flag_on_every_run_command():
    parser = build_parser()
    common = ["--instance", "I.6.20", "--algorithm", "GPOptSC"]
    assert parser.parse_args(["run", *common, "--paper-faithful"]).check_before_scaling
    assert parser.parse_args(["gridsearch", *common, "--paper-faithful"]).check_before_scaling
    assert parser.parse_args(["experiment", "--config", "c.json", "--paper-faithful"]).check_before_scaling
    assert parser.parse_args(["run", *common, "--check-before-scaling"]).check_before_scaling
    assert not parser.parse_args(["run", *common]).check_before_scaling


def test_experiment_flag_overrides_config(tmp_path):
    config = tmp_path / "experiment.json"
    config.write_text(json.dumps({"instances": ["I.6.20"], "algorithms": ["GPOptSC"], "noise_levels": [0.0],
                                  "repetitions": 1, "population_size": 20, "generations": 2, "max_length": 10,
                                  "audit_samples": 1000}))
    out = tmp_path / "results"
    assert main(["experiment", "--config", str(config), "--out", str(out), "--workers", "1", "--paper-faithful"]) == 0
    record = json.loads((out / "runs.jsonl").read_text(encoding="utf-8").splitlines()[0])
    assert record["check_before_scaling"] is True


def test_instance_file_without_variables_exits_with_status_one(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(json.dumps({"name": "Empty", "variables": [], "expression": "1"}), encoding="utf-8")
    assert main(["run", "--instance", str(path), "--algorithm", "GP", "--population-size", "20"]) == 1
