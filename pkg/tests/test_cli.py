import json

import numpy as np
import pytest

from flowpool.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main, read_pointcloud, write_pointcloud
from flowpool.experiments import random_graphs
from flowpool.graphs import GraphDataset, write_tu_dataset


def config_of(path):
    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert first.startswith("# config: ")
    return json.loads(first[len("# config: "):])


def write_cloud(path, P):
    path.write_text("x0,x1\n" + "".join(f"{a},{b}\n" for a, b in P), encoding="utf-8")
    return path


@pytest.fixture
def dataset_dir(tmp_path):
    graphs = random_graphs(12, kinds=3, min_nodes=4, max_nodes=8, seed=0)
    return write_tu_dataset(GraphDataset(graphs, 3, 2, "SYN"), tmp_path / "SYN")


class TestPointcloud:
    def test_round_trip(self, tmp_path):
        P = np.random.default_rng(0).normal(size=(4, 3))
        write_pointcloud(tmp_path / "p.csv", P, {"a": 1})
        np.testing.assert_array_equal(read_pointcloud(tmp_path / "p.csv"), P)

    @pytest.mark.parametrize("text", ["", "a,b\n1,2\n", "x0,x1\n1\n", "x0\nfoo\n", "x0\n"])
    def test_bad_files(self, tmp_path, text):
        (tmp_path / "p.csv").write_text(text, encoding="utf-8")
        assert main(["pool", "--input", str(tmp_path / "p.csv"), "--out", str(tmp_path / "o")]) == EXIT_USAGE


class TestPool:
    def test_singleton(self, tmp_path):
        inp = write_cloud(tmp_path / "y.csv", [(0.25, -1.5)])
        assert main(["pool", "--input", str(inp), "--m", "1", "--tau", "0.25", "--objective", "loss",
                     "--out", str(tmp_path / "o")]) == EXIT_OK
        np.testing.assert_allclose(read_pointcloud(tmp_path / "o" / "x_star.csv"), [[0.25, -1.5]], atol=1e-4)

    def test_gaussian_cloud_deterministic_and_decreasing(self, tmp_path):
        inp = write_cloud(tmp_path / "y.csv", np.random.default_rng(0).normal(size=(20, 2)))
        for out in ("a", "b"):
            assert main(["pool", "--input", str(inp), "--m", "12", "--out", str(tmp_path / out)]) == EXIT_OK
        for name in ("x_star.csv", "energy_trace.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        trace = np.loadtxt(tmp_path / "a" / "energy_trace.csv", delimiter=",", skiprows=2)[:, 1]
        assert np.all(np.diff(trace) < 0)
        cfg = config_of(tmp_path / "a" / "x_star.csv")
        assert cfg["m"] == 12 and cfg["epsilon"] == 0.1

    def test_config_file_and_flag_precedence(self, tmp_path):
        inp = write_cloud(tmp_path / "y.csv", np.random.default_rng(1).normal(size=(6, 2)))
        (tmp_path / "c.json").write_text(json.dumps({"m": 2, "epsilon": 0.5}), encoding="utf-8")
        assert main(["pool", "--input", str(inp), "--config", str(tmp_path / "c.json"), "--m", "3",
                     "--out", str(tmp_path / "o")]) == EXIT_OK
        cfg = config_of(tmp_path / "o" / "x_star.csv")
        assert cfg["m"] == 3 and cfg["epsilon"] == 0.5
        assert read_pointcloud(tmp_path / "o" / "x_star.csv").shape == (3, 2)

    def test_unknown_config_key(self, tmp_path):
        inp = write_cloud(tmp_path / "y.csv", [(0.0, 0.0)])
        (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}), encoding="utf-8")
        assert main(["pool", "--input", str(inp), "--config", str(tmp_path / "c.json"),
                     "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_flow_failure(self, tmp_path, capsys):
        inp = write_cloud(tmp_path / "y.csv", np.random.default_rng(2).normal(size=(8, 2)))
        code = main(["pool", "--input", str(inp), "--m", "3", "--tau", "80", "--objective", "loss",
                     "--out", str(tmp_path / "o")])
        assert code == EXIT_FAIL and "flow failed" in capsys.readouterr().err

    def test_bad_usage(self, tmp_path):
        assert main(["pool"]) == EXIT_USAGE
        assert main(["nope"]) == EXIT_USAGE
        assert main(["pool", "--input", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == EXIT_USAGE


class TestDemoCircle:
    def test_zero_iterations(self, tmp_path):
        assert main(["demo-circle", "--iters", "0", "--out", str(tmp_path)]) == EXIT_OK
        Y = np.loadtxt(tmp_path / "y_trajectory.csv", delimiter=",", skiprows=2)
        np.testing.assert_array_equal(Y[:, 2:], np.random.default_rng(0).standard_normal((20, 2)))
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["config"]["iters"] == 0


class TestConditionStudy:
    def test_one_cloud(self, tmp_path):
        assert main(["condition-study", "--clouds", "1", "--eps-grid", "1,10", "--m", "6", "--n", "10",
                     "--fp-m", "3", "--fp-n", "5", "--out", str(tmp_path)]) == EXIT_OK
        rows = np.loadtxt(tmp_path / "condition_numbers.csv", delimiter=",", skiprows=2)
        np.testing.assert_array_equal(rows[:, 2], 0)
        np.testing.assert_array_equal(rows[:, 5], 0)
        assert config_of(tmp_path / "linear_operator_condition.csv")["clouds"] == 1

    def test_bad_grid(self, tmp_path):
        assert main(["condition-study", "--eps-grid", "a,b", "--out", str(tmp_path)]) == EXIT_USAGE


class TestGraphCommands:
    def test_missing_dataset_dir(self, tmp_path, capsys):
        assert main(["classify", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_USAGE
        assert "does not exist" in capsys.readouterr().err

    def test_perm_check(self, tmp_path, dataset_dir):
        common = ["perm-check", "--dataset", str(dataset_dir), "--trials", "2", "--d", "4", "--M", "3"]
        assert main(common + ["--out", str(tmp_path / "a")]) == EXIT_OK
        report = json.loads((tmp_path / "a" / "perm_check.json").read_text())
        assert report["passed"] and report["pairs"] == 24 and report["config"]["tau"] is None
        assert main(common + ["--break-reference", "--out", str(tmp_path / "b")]) == EXIT_FAIL

    def test_perm_check_zero_trials(self, tmp_path, dataset_dir):
        assert main(["perm-check", "--dataset", str(dataset_dir), "--trials", "0", "--out", str(tmp_path)]) == EXIT_OK

    def test_classify_sortpool_tag(self, tmp_path, dataset_dir):
        (tmp_path / "c.json").write_text(json.dumps({"folds": 2, "epochs": 2, "d": 3, "M": 2}), encoding="utf-8")
        assert main(["classify", "--dataset", str(dataset_dir), "--pooling", "sortpool", "--config",
                     str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == EXIT_OK
        report = json.loads((tmp_path / "o" / "cv_report_sortpool.json").read_text())
        assert report["tag"] == "baseline" and len(report["fold_accuracies"]) == 2
        assert report["cli_config"]["folds"] == 2
