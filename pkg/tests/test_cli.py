import json

import numpy as np
import pandas as pd
import pytest

import app
from controllers import experiment_controller
from controllers.experiment_controller import BENCH_COLUMNS, cmd_bench, cmd_demo_constraint, cmd_sweep_h
from core.errors import ConfigError, NumericalFailure, OracleError
from utils.config_utils import ExperimentConfig

SMALL = {
    "T": "3",
    "batch": "8",
    "iterations": "2",
    "eval_samples": "400",
    "oracle_samples": "400",
    "mmd_samples": "200",
    "mmd_lengths": "1,3",
    "histogram_bins": "5",
    "ais_temps": "50",
    "ais_chains": "64",
}


@pytest.fixture
def small_config(tmp_path):
    def write(**extra):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({**SMALL, **extra}))
        return str(path)

    return write


def small(tmp_path, **extra):
    values = dict(T=3, batch=8, iterations=2, eval_samples=400, oracle_samples=400, mmd_samples=200,
                  mmd_lengths=(1, 3), histogram_bins=5, ais_temps=50, ais_chains=64, out=str(tmp_path / "out"))
    values.update(extra)
    return ExperimentConfig(**values).validate()


class TestExitCodes:
    def test_mapping(self):
        assert app.exit_code_for(None) == 0
        assert app.exit_code_for(ConfigError("x")) == 1
        assert app.exit_code_for(OracleError("x")) == 1
        assert app.exit_code_for(NumericalFailure("x")) == 2

    def test_invalid_flag_value(self, tmp_path):
        assert app.main(["train", "--T", "-1", "--out", str(tmp_path)]) == 1

    def test_entropy_floor_above_p0_entropy(self, tmp_path):
        assert app.main(["train", "--h", "10", "--iters", "1", "--out", str(tmp_path)]) == 1

    def test_numerical_failure_exit_code(self, tmp_path, monkeypatch):
        def broken(config):
            return None, NumericalFailure("non-finite gradient", iteration=0)

        monkeypatch.setattr("commands.experiment_commands.cmd_train", broken)
        assert app.main(["train", "--out", str(tmp_path)]) == 2


class TestTrain:
    def test_zero_iterations_keeps_initial_parameters(self, tmp_path, small_config):
        out = tmp_path / "out"
        code = app.main(["train", "--config", small_config(), "--iters", "0", "--out", str(out)])
        assert code == 0
        params = json.loads((out / "params.json").read_text())
        assert len(params["steps"]) == 3
        assert all(0.01 <= s["step_size"] <= 0.025 for s in params["steps"])
        np.testing.assert_allclose(params["p0"]["std"], [np.sqrt(3.0)] * 2)

    def test_small_run(self, tmp_path, small_config):
        out = tmp_path / "out"
        assert app.main(["train", "--config", small_config(), "--out", str(out), "--seed", "4"]) == 0
        report = pd.read_csv(out / "train_report.csv")
        assert len(report) == 2
        assert (out / "resolved_config.json").exists()
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["seed"] == "4"

    def test_root_config_file_is_the_default(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "config.json").write_text(json.dumps({**SMALL, "T": "2", "iterations": "1"}))
        assert app.main(["train", "--out", "out"]) == 0
        params = json.loads((tmp_path / "out" / "params.json").read_text())
        assert len(params["steps"]) == 2

    def test_explicit_config_wins_over_root_file(self, tmp_path, monkeypatch, small_config):
        explicit = small_config()
        work = tmp_path / "work"
        work.mkdir()
        monkeypatch.chdir(work)
        (work / "config.json").write_text(json.dumps({"T": "not-a-number"}))
        assert app.main(["train", "--config", explicit, "--out", "out"]) == 0


class TestEvaluate:
    def test_missing_params(self, tmp_path):
        assert app.main(["evaluate", "--out", str(tmp_path), "--params", str(tmp_path / "none.json")]) == 1

    def test_outputs_and_oracle_cache(self, tmp_path, small_config):
        out = tmp_path / "out"
        config = small_config()
        assert app.main(["train", "--config", config, "--out", str(out)]) == 0
        assert app.main(["evaluate", "--config", config, "--out", str(out)]) == 0
        for name in ("convergence_trained.tsv", "convergence_untrained.tsv", "mmd_curve.tsv",
                     "histogram_trained.tsv", "histogram_oracle.tsv", "metrics.csv"):
            assert (out / name).exists()
        cache = out / "oracle_corr-gauss_400_0.csv"
        assert cache.exists()

        curve = pd.read_csv(out / "convergence_trained.tsv", sep="\t")
        assert curve["t"].tolist() == [0, 1, 2, 3]
        mmd_curve = pd.read_csv(out / "mmd_curve.tsv", sep="\t")
        assert mmd_curve["t"].tolist() == [1, 3]
        hist = pd.read_csv(out / "histogram_oracle.tsv", sep="\t")
        assert hist["count"].sum() <= 400

        before = cache.stat().st_mtime_ns
        assert app.main(["evaluate", "--config", config, "--out", str(out)]) == 0
        assert cache.stat().st_mtime_ns == before


class TestBench:
    def test_table(self, tmp_path):
        config = small(tmp_path, bench_targets=("corr-gauss", "bench-c"), bench_T=1, iterations=1)
        result, error = cmd_bench(config)
        assert error is None
        table = result["table"]
        assert list(table.columns) == BENCH_COLUMNS
        for target_id in ("corr-gauss", "bench-c"):
            methods = table[table["target"] == target_id]["method"].tolist()
            assert methods == ["HEI", "HEI-untrained", "oracle", "AIS"]
        assert (table["error"] == "").all()
        written = pd.read_csv(result["path"])
        assert len(written) == 8

    def test_ais_row_reports_log_z_and_ess(self, tmp_path):
        config = small(tmp_path, bench_targets=("corr-gauss",), bench_T=1, iterations=1)
        result, _ = cmd_bench(config)
        ais = result["table"].set_index("method").loc["AIS"]
        assert ais["log_z"] == pytest.approx(1.81223, abs=0.5)
        assert 2.0 <= ais["ess"] <= 64.0
        assert ais["neg_e_logpi"] == pytest.approx(1.0, abs=0.6)

    def test_failure_stays_in_its_row(self, tmp_path, monkeypatch):
        original = experiment_controller._bench_target

        def flaky(config, target_id):
            if target_id == "bench-c":
                raise OracleError("box too large")
            return original(config, target_id)

        monkeypatch.setattr(experiment_controller, "_bench_target", flaky)
        config = small(tmp_path, bench_targets=("bench-c", "corr-gauss"), bench_T=1, iterations=1)
        result, error = cmd_bench(config)
        assert error is None
        table = result["table"]
        failed = table[table["target"] == "bench-c"]
        assert len(failed) == 1
        assert "box too large" in failed["error"].iloc[0]
        assert (table[table["target"] == "corr-gauss"]["error"] == "").all()

    def test_compare_stop_gradient(self, tmp_path):
        config = small(tmp_path, bench_targets=("corr-gauss",), bench_T=1, iterations=1,
                       bench_compare_stop_gradient=True)
        result, _ = cmd_bench(config)
        assert "HEI-full-backprop" in result["table"]["method"].tolist()


class TestDemoAndSweep:
    def test_demo_constraint(self, tmp_path, small_config):
        out = tmp_path / "out"
        assert app.main(["demo-constraint", "--config", small_config(), "--out", str(out)]) == 0
        for label in ("valid", "invalid"):
            for suffix in ("untrained.tsv", "trained.tsv", "histogram.tsv", "report.csv"):
                assert (out / f"demo_{label}_{suffix}").exists()

    def test_demo_result(self, tmp_path):
        result, error = cmd_demo_constraint(small(tmp_path))
        assert error is None
        assert result["entropy_target"] == pytest.approx(2.81223, abs=1e-5)
        assert result["valid"]["p0_entropy"] > result["entropy_target"]
        assert result["invalid"]["p0_entropy"] < result["entropy_target"]
        assert result["valid"]["guard_events"] == 0

    def test_sweep_rejects_unreachable_floor(self, tmp_path):
        config = small(tmp_path, sweep_h_values=(2.0, 5.0), iterations=1)
        result, error = cmd_sweep_h(config)
        assert error is None
        table = result["table"]
        assert table["error"].tolist()[0] == ""
        assert "must exceed" in table["error"].tolist()[1]
        assert (tmp_path / "out" / "sweep_h_2.tsv").exists()
