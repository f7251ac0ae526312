import csv
import json
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from loguru import logger

from imgp.constants import VARIANCE_FLOOR
from imgp.domain.datasets import GENERATORS, ingest_csv
from imgp.domain.predict import EuclideanPosterior, GeometricPosterior, HybridPredictor
from imgp.domain.priors import bandwidth_prior_fit
from imgp.domain.train import fit_map, reoptimize_truncated, save_checkpoint
from imgp.errors import ConfigError, ImgpError, KTooLarge, LengthMismatch, NoLabeledRows, StageError
from imgp.models import MetricsReport, ModelKind, PointCloud
from imgp.services.graph import build_graph, build_knn_index
from imgp.services.kernel import graph_eigenbasis
from imgp.services.utils import make_rng
from imgp.settings import Config


@dataclass
class Dataset:
    cloud: PointCloud
    test_points: np.ndarray
    test_values: np.ndarray


# ============================================================
# Metrics
# ============================================================
def metrics(means, variances, truths):
    """
    RMSE and mean Gaussian negative log predictive density. Variances are
    floored at VARIANCE_FLOOR and the number of floored points reported.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if not means.shape == variances.shape == truths.shape:
        raise LengthMismatch(
            f"means {means.shape}, variances {variances.shape}, truths {truths.shape}"
        )
    floored = variances < VARIANCE_FLOOR
    variances = np.where(floored, VARIANCE_FLOOR, variances)
    residual2 = (means - truths) ** 2
    rmse = float(np.sqrt(np.mean(residual2)))
    nll = float(np.mean(0.5 * np.log(2.0 * np.pi * variances) + residual2 / (2.0 * variances)))
    return MetricsReport(rmse=rmse, nll=nll, floored_variance_count=int(floored.sum()))


# ============================================================
# Data
# ============================================================
def load_dataset(config):
    if config.csv_path is not None:
        return _csv_dataset(config)
    if config.generator not in GENERATORS:
        raise ConfigError(f"unknown generator {config.generator!r}; choose from {sorted(GENERATORS)}")
    n_labeled = config.resolve_n_labeled(config.n_points)
    data = GENERATORS[config.generator](
        N=config.n_points,
        beta=config.beta,
        n_labeled=n_labeled,
        seed=config.seed,
        **config.generator_params,
    )
    return Dataset(cloud=data.cloud, test_points=data.test_points, test_values=data.test_values)


def _csv_dataset(config):
    """
    Labeled rows of the file are split into a training set of the configured
    size and a held-out test set; held-out rows stay in the graph unlabeled.
    """
    source = ingest_csv(config.csv_path)
    if source.n == 0:
        raise NoLabeledRows(f"{config.csv_path} has no labeled rows")
    n_train = min(config.resolve_n_labeled(source.n), source.n)
    order = make_rng(config.seed).permutation(source.n)
    train = np.sort(order[:n_train])
    test = np.sort(order[n_train:])
    if test.size == 0:
        raise ConfigError("every labeled row is used for training; nothing left to evaluate")
    cloud = PointCloud.from_raw(source.points, source.labeled_idx[train], source.raw_labels[train])
    return Dataset(
        cloud=cloud,
        test_points=source.points[source.labeled_idx[test]],
        test_values=source.raw_labels[test],
    )


# ============================================================
# Experiment
# ============================================================
class _WarningCollector:
    """Collects WARNING records logged from the thread running the experiment."""

    def __init__(self):
        self.messages = []
        self.thread_id = threading.get_ident()

    def __enter__(self):
        self.handler = logger.add(
            lambda message: self.messages.append(message.record["message"]),
            level="WARNING",
            filter=lambda record: record["thread"].id == self.thread_id,
            format="{message}",
        )
        return self

    def __exit__(self, *exc):
        logger.remove(self.handler)
        return False


@contextmanager
def _stage(name, timings):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (ImgpError, OSError) as error:
        raise StageError(name, error) from error
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def _output_dir(config):
    if config.out is not None:
        return Path(config.out)
    return Path(Config.OUTPUT_FOLDER) / f"{config.model}-seed{config.seed}"


def _fit_euclidean(cloud, config):
    labeled = cloud.points[cloud.labeled_idx]
    return EuclideanPosterior(labeled, cloud.labels, nu=config.euclid_nu, n_features=config.L, seed=config.seed).fit()


def _fit_geometric(cloud, config, timings, warnings):
    """KNN index, MAP fit, eigenpairs and optional re-optimization of the truncated model."""
    train = config.train
    if config.beta > 0 and not train.learn_noise:
        train = replace(train, learn_noise=True)

    with _stage("knn", timings):
        if config.model == ModelKind.imgp_supervised:
            graph_cloud = cloud.labeled_subcloud()
            K = config.K
            if K >= graph_cloud.N:
                K = graph_cloud.N - 1
                if K < 1:
                    raise KTooLarge("the supervised graph needs at least two labeled points")
                message = f"K reduced from {config.K} to {K} for {graph_cloud.N} labeled points"
                logger.warning(message)
        else:
            graph_cloud = cloud
            K = config.K
        index = build_knn_index(graph_cloud, K)
        priors = bandwidth_prior_fit(graph_cloud, index, config.tau)

    fixed = {"nu": config.nu, "K": K, "L": min(config.L, graph_cloud.N)}
    with _stage("fit", timings):
        fit = fit_map(graph_cloud, train, priors, fixed, index=index)
        warnings.extend(fit.warnings)

    with _stage("eig", timings):
        graph = build_graph(index, fit.params.alpha)
        basis = graph_eigenbasis(
            graph, fixed["L"], seed=config.seed, solver=config.eigensolver, oversampling=config.oversampling
        )
        params = fit.params
        if config.reoptimize:
            params = reoptimize_truncated(
                basis, graph_cloud.labels, params, graph_cloud.labeled_idx, train, fit.norm_const
            )
    return graph_cloud, graph, basis, params, fit


def run_experiment(config):
    """
    Load or generate data, run the three-step algorithm (KNN index, MAP fit,
    eigenpairs), condition, blend with the Euclidean model and evaluate on the
    test set. Writes checkpoint.json, predictions.csv and metrics.json into
    the output directory.
    """
    started = time.perf_counter()
    timings = {}
    warnings = []
    out_dir = _output_dir(config)

    with _WarningCollector() as collector:
        with _stage("data", timings):
            dataset = load_dataset(config)
        cloud = dataset.cloud
        if cloud.n == 0:
            raise StageError("data", NoLabeledRows("no labeled points to condition on"))

        with _stage("fit", timings):
            euclidean = None
            if config.model == ModelKind.euclidean or config.blend:
                euclidean = _fit_euclidean(cloud, config)

        if config.model == ModelKind.euclidean:
            with _stage("predict", timings):
                mean, variance = euclidean.predict(dataset.test_points)
                gamma = np.zeros(mean.shape[0])
            checkpoint_path = _write_json(
                out_dir / "checkpoint.json",
                {
                    "euclidean": {
                        "kappa": euclidean.kappa,
                        "sigma2": euclidean.sigma2,
                        "noise2": euclidean.noise2,
                        "nu": config.euclid_nu,
                        "random_features": euclidean.use_rff,
                    },
                    "trace": [float(v) for v in euclidean.trace],
                },
            )
        else:
            graph_cloud, graph, basis, params, fit = _fit_geometric(cloud, config, timings, warnings)
            with _stage("predict", timings):
                geometric = GeometricPosterior(
                    graph, basis, params, graph_cloud.labeled_idx, graph_cloud.labels, fit.norm_const
                )
                hybrid = HybridPredictor(geometric, euclidean, blend=config.blend)
                mean, variance, gamma = hybrid.predict(dataset.test_points)
            checkpoint_path = save_checkpoint(out_dir / "checkpoint.json", fit, params)

        mean, variance = cloud.denormalize(mean, variance)
        report = metrics(mean, variance, dataset.test_values)
        with _stage("write", timings):
            _write_predictions(out_dir / "predictions.csv", dataset.test_points, mean, variance, gamma)

    report.warnings = list(dict.fromkeys(warnings + collector.messages))
    report.stage_seconds = {name: timings.get(name, 0.0) for name in ("knn", "fit", "eig", "predict")}
    report.checkpoint = str(checkpoint_path)
    report.config_echo = config.to_dict()
    report.runtime_seconds = time.perf_counter() - started
    _write_json(out_dir / "metrics.json", report.to_document(config.record_timings))
    logger.info(
        "{}: RMSE={:.5g}, NLL={:.5g} ({:.1f}s) -> {}",
        config.model,
        report.rmse,
        report.nll,
        report.runtime_seconds,
        out_dir,
    )
    return report


def _write_json(path, document):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True, allow_nan=True))
    return path


def _write_predictions(path, points, mean, variance, gamma):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as csvfile:
        writer = csv.writer(csvfile)
        writer.writerow([f"x{i + 1}" for i in range(points.shape[1])] + ["mean", "variance", "gamma"])
        for row in zip(points, mean, variance, gamma):
            point, m, v, g = row
            writer.writerow([repr(float(c)) for c in point] + [repr(float(m)), repr(float(v)), repr(float(g))])
    return path

