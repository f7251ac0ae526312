import csv
import json
import math

import numpy as np
import pytest

from imgp.constants import VARIANCE_FLOOR
from imgp.domain.datasets import export_csv, gen_circle
from imgp.domain.experiment import load_dataset, metrics, run_experiment
from imgp.domain.train import load_checkpoint
from imgp.errors import ConfigError, LengthMismatch, NoLabeledRows, StageError
from imgp.models import ExperimentConfig, ModelKind, PointCloud
from imgp.tasks import ablate


def _config(tmp_path, **changes):
    document = {
        "n_points": 60,
        "n_labeled": 10,
        "K": 6,
        "L": 10,
        "generator_params": {"test_mesh": 200},
        "train": {"iters": 5},
        "reoptimize": False,
        "out": str(tmp_path / "run"),
    }
    document.update(changes)
    return ExperimentConfig.from_dict(document)


class TestMetrics:
    def test_exact_means_with_unit_variance(self):
        report = metrics([1.0, 2.0], [1.0, 1.0], [1.0, 2.0])
        assert report.rmse == 0.0
        assert report.nll == pytest.approx(0.5 * math.log(2.0 * math.pi))
        assert report.nll == pytest.approx(0.91894, abs=1e-5)

    def test_variance_one_over_two_pi_gives_zero_nll(self):
        report = metrics([0.0], [1.0 / (2.0 * math.pi)], [0.0])
        assert report.nll == pytest.approx(0.0, abs=1e-12)

    def test_rmse(self):
        assert metrics([0.0, 0.0], [1.0, 1.0], [3.0, 4.0]).rmse == pytest.approx(math.sqrt(12.5))

    def test_variances_are_floored(self):
        report = metrics([0.0, 0.0], [0.0, 1.0], [0.0, 0.0])
        assert report.floored_variance_count == 1
        expected = 0.5 * (0.5 * math.log(2.0 * math.pi * VARIANCE_FLOOR) + 0.5 * math.log(2.0 * math.pi))
        assert report.nll == pytest.approx(expected)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            metrics([0.0, 1.0], [1.0], [0.0, 1.0])


class TestDatasets:
    def test_unknown_generator(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(_config(tmp_path, generator="spiral"))

    def test_labeled_fraction(self, tmp_path):
        dataset = load_dataset(_config(tmp_path, n_labeled=None, labeled_fraction=0.25))
        assert dataset.cloud.n == 15
        assert dataset.test_points.shape == (200, 2)

    def test_csv_rows_are_split_into_train_and_test(self, tmp_path):
        points = gen_circle(40, seed=2).points
        labeled = np.arange(0, 40, 2)
        values = np.sin(np.arctan2(points[labeled, 1], points[labeled, 0]))
        path = export_csv(PointCloud.from_raw(points, labeled, values), tmp_path / "circle.csv")

        dataset = load_dataset(_config(tmp_path, csv_path=str(path), n_labeled=8))
        assert dataset.cloud.N == 40
        assert dataset.cloud.n == 8
        assert dataset.test_values.shape == (12,)
        train_rows = set(dataset.cloud.labeled_idx.tolist())
        test_rows = {int(np.flatnonzero(np.all(points == p, axis=1))[0]) for p in dataset.test_points}
        assert not train_rows & test_rows
        assert train_rows | test_rows == set(labeled.tolist())

    def test_csv_without_labels(self, tmp_path):
        path = export_csv(gen_circle(20, seed=1), tmp_path / "bare.csv")
        with pytest.raises(NoLabeledRows):
            load_dataset(_config(tmp_path, csv_path=str(path)))


class TestRunExperiment:
    """End to end runs on small clouds."""

    def test_euclidean_baseline(self, tmp_path):
        report = run_experiment(_config(tmp_path, model="euclidean"))
        assert np.isfinite(report.rmse) and np.isfinite(report.nll)
        document = json.loads((tmp_path / "run" / "metrics.json").read_text())
        assert document["config_echo"]["model"] == "euclidean"
        checkpoint = json.loads((tmp_path / "run" / "checkpoint.json").read_text())
        assert checkpoint["euclidean"]["kappa"] > 0

    def test_semisupervised_run_writes_outputs(self, tmp_path):
        report = run_experiment(_config(tmp_path, reoptimize=True))
        assert np.isfinite(report.rmse) and np.isfinite(report.nll)
        assert set(report.stage_seconds) == {"knn", "fit", "eig", "predict"}

        out = tmp_path / "run"
        with open(out / "predictions.csv", newline="") as csvfile:
            rows = list(csv.DictReader(csvfile))
        assert len(rows) == 200
        assert list(rows[0]) == ["x1", "x2", "mean", "variance", "gamma"]
        assert all(0.0 <= float(row["gamma"]) <= 1.0 for row in rows)
        assert all(float(row["variance"]) >= 0.0 for row in rows)

        checkpoint = load_checkpoint(out / "checkpoint.json")
        assert checkpoint.params.K == 6
        assert checkpoint.params.L == 10
        document = json.loads((out / "metrics.json").read_text())
        assert document["rmse"] == report.rmse
        assert "stage_seconds" in document

    def test_repeated_runs_are_identical(self, tmp_path):
        config = _config(tmp_path, record_timings=False)
        run_experiment(config)
        first = (tmp_path / "run" / "metrics.json").read_bytes()
        run_experiment(config)
        assert (tmp_path / "run" / "metrics.json").read_bytes() == first
        assert b"stage_seconds" not in first

    def test_supervised_graph_reduces_k(self, tmp_path):
        report = run_experiment(_config(tmp_path, model="imgp_supervised", n_labeled=8, K=10, blend=False))
        assert any("K reduced from 10 to 7" in message for message in report.warnings)
        assert load_checkpoint(tmp_path / "run" / "checkpoint.json").params.K == 7

    def test_csv_input(self, tmp_path):
        points = gen_circle(50, seed=3).points
        labeled = np.arange(0, 50, 2)
        values = points[labeled, 0] * 10.0 + 5.0
        path = export_csv(PointCloud.from_raw(points, labeled, values), tmp_path / "circle.csv")
        report = run_experiment(_config(tmp_path, csv_path=str(path), n_labeled=15))
        assert np.isfinite(report.rmse)
        # predictions come back on the raw label scale
        assert report.rmse < np.std(values)

    def test_no_labels_is_a_data_stage_failure(self, tmp_path):
        with pytest.raises(StageError) as error:
            run_experiment(_config(tmp_path, n_labeled=0))
        assert error.value.stage == "data"
        assert isinstance(error.value.error, NoLabeledRows)
        assert error.value.exit_code == 2


class TestAblate:
    def test_rows_per_grid_point_and_model(self, tmp_path):
        config = _config(tmp_path)
        rows = ablate(config, "noise", [0.0, 0.05], models=["euclidean", "imgp_semisupervised"], out=tmp_path / "ab", threads=1)
        assert [(row.value, row.model) for row in rows] == [
            (0.0, "euclidean"),
            (0.0, "imgp_semisupervised"),
            (0.05, "euclidean"),
            (0.05, "imgp_semisupervised"),
        ]
        assert all(row.error is None for row in rows)
        with open(tmp_path / "ab" / "ablation.csv", newline="") as csvfile:
            table = list(csv.DictReader(csvfile))
        assert len(table) == 4

    def test_failing_grid_point_is_recorded(self, tmp_path):
        rows = ablate(_config(tmp_path), "noise", [-1.0, 0.0], models=["euclidean"], out=tmp_path / "ab", threads=1)
        assert rows[0].error.startswith("ConfigError")
        assert rows[0].rmse is None
        assert rows[1].error is None and np.isfinite(rows[1].rmse)

    def test_empty_grid(self, tmp_path):
        with pytest.raises(ConfigError):
            ablate(_config(tmp_path), "eigenpairs", [])

    def test_unknown_axis(self, tmp_path):
        with pytest.raises(ValueError):
            ablate(_config(tmp_path), "bandwidth", [1.0])


@pytest.mark.slow
class TestDumbbellReproduction:
    """Full-size dumbbell runs: 1556 points, 10 labels, nu = 1, L = 50."""

    def _run(self, tmp_path, model, beta):
        config = ExperimentConfig.from_dict(
            {"model": model, "beta": beta, "nu": 1, "L": 50, "out": str(tmp_path / f"{model}-{beta}")}
        )
        return run_experiment(config)

    @pytest.mark.parametrize("beta", [0.0, 0.01])
    def test_geometric_model_beats_euclidean(self, tmp_path, beta):
        geometric = self._run(tmp_path, ModelKind.imgp_semisupervised, beta)
        euclidean = self._run(tmp_path, ModelKind.euclidean, beta)
        assert geometric.nll < euclidean.nll
        assert geometric.rmse < euclidean.rmse

    def test_high_noise_rmse_stays_competitive(self, tmp_path):
        geometric = self._run(tmp_path, ModelKind.imgp_semisupervised, 0.05)
        euclidean = self._run(tmp_path, ModelKind.euclidean, 0.05)
        assert geometric.rmse <= 1.05 * euclidean.rmse

    def test_advantage_shrinks_with_more_labels(self, tmp_path):
        config = ExperimentConfig.from_dict({"nu": 1, "L": 50, "n_labeled": None, "labeled_fraction": 0.01})
        rows = ablate(
            config,
            "labeled_fraction",
            [0.01, 0.05, 0.1, 0.25],
            models=["imgp_semisupervised", "euclidean"],
            out=tmp_path / "sweep",
        )
        nll = {(row.value, row.model): row.nll for row in rows}
        gap_small = nll[(0.01, "euclidean")] - nll[(0.01, "imgp_semisupervised")]
        gap_large = nll[(0.25, "euclidean")] - nll[(0.25, "imgp_semisupervised")]
        assert gap_small > gap_large
