import csv
import json
import os

import pytest

from plisim.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, main
from plisim.errors import ConfigurationError
from plisim.experiment import (ExperimentConfig, ExperimentResults, config_from_dict, config_from_yaml,
                               emit_reports, run_experiment)

SMALL = """\
cohort:
  seed: 3
  count: 1
controllers: [pid]
engines: [oracle]
horizon: 240
reps: 1
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = config_from_yaml("{}")
        assert cfg.horizon == 2880 and cfg.q_sim == 1.0 and cfg.count == 12
        assert cfg.budgets == ((0.03, 0.05), (0.05, 0.10), (0.10, 0.15))
        assert cfg.q_inv0 == 60.0 and cfg.decrement == 1.0

    @pytest.mark.parametrize("text, line, needle", [
        ("horizon: -5\n", 1, "horizon"),
        ("cohort:\n  seed: 1\n  count: 0\n", 3, "count"),
        ("controllers: [pid, fuzzy]\n", 1, "fuzzy"),
        ("budgets:\n  - [0.1, 0.05]\n", 2, "budgets[0]"),
        ("plan:\n  trace_mode: best\n", 2, "trace_mode"),
        ("q_sim: 1\ncolour: red\n", 2, "unknown key"),
        ("engines: [plis]\n", 1, "oracle"),
        ("mpc:\n  Q: -1\n", 2, "mpc.Q"),
    ])
    def test_errors_carry_line_numbers(self, text, line, needle):
        with pytest.raises(ConfigurationError) as err:
            config_from_yaml(text, "exp.yaml")
        assert err.value.line == line
        assert needle in str(err.value)
        assert f"exp.yaml:{line}" in str(err.value)

    def test_manifest_round_trip(self):
        cfg = config_from_yaml(SMALL)
        assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestRun:
    def test_minimal_matrix(self, tmp_path):
        cfg = config_from_yaml(SMALL)
        res = run_experiment(cfg)
        assert len(res.cells) == 1 and not res.failures
        files = emit_reports(res, tmp_path)
        traces = [f for f in files if "traces" in f]
        assert len(traces) == 1
        rows = _rows(traces[0])
        assert rows[0] == ["time", "i", "i_s", "G", "u_insulin", "u_meal", "p3"]
        assert len(rows) == 1 + 240 + 1
        assert len(_rows(tmp_path / "glycemic.csv")) == 2
        assert len(_rows(tmp_path / "optimality.csv")) == 1
        assert len(_rows(tmp_path / "speedup.csv")) == 1
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert config_from_dict(manifest["config"]) == cfg
        assert manifest["seed"] == 3

    def test_empty_results_write_manifest_only(self, tmp_path):
        cfg = ExperimentConfig()
        files = emit_reports(ExperimentResults(cfg, []), tmp_path)
        assert [os.path.basename(f) for f in files] == ["manifest.json"]

    def test_table_structure(self, tmp_path):
        cfg = config_from_yaml("cohort: {count: 1}\nhorizon: 180\nreps: 1\nkoopman: {training_days: 0.5}\n")
        res = run_experiment(cfg)
        emit_reports(res, tmp_path)
        gl = _rows(tmp_path / "glycemic.csv")
        approaches = [r[0] for r in gl[1:6]]
        assert approaches == ["ORACLE", "PLIS (eps=3%, psi=5%)", "PLIS (eps=5%, psi=10%)",
                              "PLIS (eps=10%, psi=15%)", "Koopman"]
        assert [r[1] for r in gl[1::5]] == ["PID", "MPC", "Bayesian LQG"]
        op = _rows(tmp_path / "optimality.csv")
        assert len(op) == 1 + 3 * 4
        assert op[0][:4] == ["approach", "control_method", "rho_mean", "rho_sd"]
        text = (tmp_path / "summary.txt").read_text()
        assert "Speedup S_p" in text and "Failed cells: 0" in text

    def test_rerun_is_deterministic(self, tmp_path):
        cfg = config_from_yaml("cohort: {count: 1}\ncontrollers: [mpc]\nhorizon: 120\nreps: 1\n"
                               "koopman: {training_days: 0.3}\n")
        for d in ("a", "b"):
            emit_reports(run_experiment(cfg), tmp_path / d)
        for name in ("glycemic.csv", "optimality.csv", "cells.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in os.listdir(tmp_path / "a" / "traces"):
            assert (tmp_path / "a" / "traces" / name).read_bytes() == (tmp_path / "b" / "traces" / name).read_bytes()


class TestCli:
    def test_validate_ok(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text(SMALL)
        assert main(["validate", str(p)]) == EXIT_OK

    def test_validate_reports_line(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("cohort:\n  seed: -1\n")
        assert main(["validate", str(p)]) == EXIT_INVALID
        assert f"{p}:2" in capsys.readouterr().err

    def test_missing_config_is_io_error(self, tmp_path):
        assert main(["validate", str(tmp_path / "nope.yaml")]) == EXIT_IO

    def test_run_and_fit(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text(SMALL)
        out = tmp_path / "out"
        assert main(["run", str(p), "--out", str(out), "--quiet", "--horizon", "600"]) == EXIT_OK
        assert (out / "summary.txt").exists()
        assert len(_rows(next((out / "traces").iterdir()))) == 602
        model_dir = tmp_path / "model"
        assert main(["fit-koopman", str(out / "traces"), "--order", "5", "--out", str(model_dir)]) == EXIT_OK
        assert (model_dir / "koopman_model.txt").exists()

    def test_fit_with_too_little_data(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(SMALL)
        out = tmp_path / "out"
        assert main(["run", str(p), "--out", str(out), "--quiet", "--horizon", "30"]) == EXIT_OK
        assert main(["fit-koopman", str(out / "traces"), "--order", "13"]) == EXIT_INVALID

    def test_unwritable_output(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(SMALL)
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["run", str(p), "--out", str(blocker / "sub"), "--quiet"]) == EXIT_IO

    def test_plan_command(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text(SMALL)
        assert main(["plan", str(p), "--eps", "0.03", "--psi", "0.05", "--quiet", "--horizon", "600"]) == EXIT_OK
        assert "q_inv=" in capsys.readouterr().out
        assert main(["plan", str(p), "--eps", "0.2", "--psi", "0.05", "--quiet"]) == EXIT_INVALID
