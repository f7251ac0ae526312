import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from imgp.constants import LANCZOS_OVERSAMPLING, PARAM_NAMES
from imgp.errors import ConfigError, EmptyCloud


class LaplacianKind(enum.StrEnum):
    unnormalized = enum.auto()
    symmetric = enum.auto()
    random_walk = enum.auto()


class PrecisionMode(enum.StrEnum):
    supervised_noiseless = enum.auto()
    semi_supervised_noiseless = enum.auto()
    noisy = enum.auto()


class ModelKind(enum.StrEnum):
    imgp_supervised = enum.auto()
    imgp_semisupervised = enum.auto()
    euclidean = enum.auto()


class AblationAxis(enum.StrEnum):
    eigenpairs = enum.auto()
    labeled_fraction = enum.auto()
    noise = enum.auto()


class Eigensolver(enum.StrEnum):
    lanczos = enum.auto()
    dense = enum.auto()


class LogdetMethod(enum.StrEnum):
    auto = enum.auto()
    dense = enum.auto()
    slq = enum.auto()


@dataclass
class PointCloud:
    """
    Ambient points with an optional set of labeled rows.

    Labels are stored centered and unit-scaled; raw_label_mean and
    raw_label_scale undo the normalization at the prediction boundary.
    """

    points: np.ndarray
    labeled_idx: np.ndarray
    labels: np.ndarray
    raw_label_mean: float = 0.0
    raw_label_scale: float = 1.0
    raw_labels: np.ndarray | None = None

    @classmethod
    def from_raw(cls, points, labeled_idx=None, raw_labels=None):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.size == 0:
            raise EmptyCloud("point cloud has no points")
        if labeled_idx is None:
            labeled_idx = np.arange(0)
        labeled_idx = np.asarray(labeled_idx, dtype=np.int64).reshape(-1)
        raw = (
            np.zeros(0)
            if raw_labels is None
            else np.asarray(raw_labels, dtype=np.float64).reshape(-1)
        )
        if raw.shape[0] != labeled_idx.shape[0]:
            raise ConfigError(
                f"{labeled_idx.shape[0]} labeled indices but {raw.shape[0]} labels"
            )
        n_points = points.shape[0]
        if labeled_idx.size and (labeled_idx.min() < 0 or labeled_idx.max() >= n_points):
            raise ConfigError("labeled index out of range")
        if np.unique(labeled_idx).size != labeled_idx.size:
            raise ConfigError("labeled indices must be unique")

        mean, scale = 0.0, 1.0
        if raw.size:
            mean = float(np.mean(raw))
        if raw.size >= 2:
            std = float(np.std(raw))
            scale = std if std > 0 else 1.0
        labels = (raw - mean) / scale
        return cls(
            points=points,
            labeled_idx=labeled_idx,
            labels=labels,
            raw_label_mean=mean,
            raw_label_scale=scale,
            raw_labels=raw,
        )

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def n(self):
        return self.labeled_idx.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def unlabeled_idx(self):
        mask = np.ones(self.N, dtype=bool)
        mask[self.labeled_idx] = False
        return np.flatnonzero(mask)

    def denormalize(self, mean, variance):
        mean = np.asarray(mean) * self.raw_label_scale + self.raw_label_mean
        variance = np.asarray(variance) * self.raw_label_scale**2
        return mean, variance

    def labeled_subcloud(self):
        """The labeled rows alone, relabeled 0..n-1 (the supervised setting)."""
        return PointCloud(
            points=self.points[self.labeled_idx],
            labeled_idx=np.arange(self.n),
            labels=self.labels.copy(),
            raw_label_mean=self.raw_label_mean,
            raw_label_scale=self.raw_label_scale,
            raw_labels=None if self.raw_labels is None else self.raw_labels.copy(),
        )


@dataclass(frozen=True)
class HyperParams:
    alpha: float
    kappa: float
    sigma2: float
    noise2: float = 0.0
    nu: int = 1
    K: int = 10
    L: int = 50

    def __post_init__(self):
        if not (self.alpha > 0 and self.kappa > 0 and self.sigma2 > 0):
            raise ConfigError(
                f"alpha, kappa and sigma2 must be positive: {self.alpha}, {self.kappa}, {self.sigma2}"
            )
        if self.noise2 < 0:
            raise ConfigError(f"noise2 must be nonnegative: {self.noise2}")
        if int(self.nu) != self.nu or self.nu < 1:
            raise ConfigError(f"nu must be a positive integer: {self.nu}")

    def to_log(self):
        """Optimizer-facing encoding; a zero noise maps to -inf."""
        return {
            name: math.log(value) if value > 0 else -math.inf
            for name, value in zip(PARAM_NAMES, self.values())
        }

    @classmethod
    def from_log(cls, log_params, nu, K, L, noise2=0.0):
        noise = log_params.get("noise2")
        return cls(
            alpha=float(np.exp(log_params["alpha"])),
            kappa=float(np.exp(log_params["kappa"])),
            sigma2=float(np.exp(log_params["sigma2"])),
            noise2=noise2 if noise is None else float(np.exp(noise)),
            nu=nu,
            K=K,
            L=L,
        )

    def values(self):
        return (self.alpha, self.kappa, self.sigma2, self.noise2)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class EigenBasis:
    """Truncated eigenpairs of the random walk Laplacian, D-orthonormal."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    inner_weights: np.ndarray

    @property
    def L(self):
        return self.eigenvalues.shape[0]

    def select(self, keep):
        return EigenBasis(
            eigenvalues=self.eigenvalues[keep],
            eigenvectors=self.eigenvectors[:, keep],
            inner_weights=self.inner_weights,
        )


@dataclass
class PriorSpec:
    """
    Hyperparameter priors. alpha_shape/alpha_rate of None means a flat
    bandwidth prior; sigma2_var/noise2_var of None switch the respective
    truncated normal off. kappa is always left free.
    """

    alpha_shape: float | None = None
    alpha_rate: float | None = None
    sigma2_var: float | None = 1.0 / 9.0
    noise2_var: float | None = 1.0 / 9.0
    median_distance: float | None = None
    alpha_lower: float | None = None
    rho: float | None = None
    tau: float | None = None
    coverage: float | None = None

    @classmethod
    def flat(cls):
        return cls(sigma2_var=None, noise2_var=None)

    @property
    def alpha_mode(self):
        if self.alpha_shape is None:
            return None
        return (self.alpha_shape - 1.0) / self.alpha_rate

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class TrainConfig:
    iters: int = 100
    learning_rate: float = 0.01
    restarts: int = 1
    probes_per_step: int = 1
    exhaustive_probes: bool = False
    cg_tol: float = 1e-8
    cg_max_iters: int | None = None
    seed: int = 0
    learn_noise: bool = False
    normalize: bool = False
    norm_probes: int = 10
    logdet: LogdetMethod = LogdetMethod.auto
    spectral_check_every: int = 10
    reoptimize_iters: int = 300
    reoptimize_learning_rate: float = 0.05

    def __post_init__(self):
        if self.iters < 1:
            raise ConfigError("iters must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.restarts < 1:
            raise ConfigError("restarts must be at least 1")
        if self.probes_per_step < 1:
            raise ConfigError("probes_per_step must be at least 1")
        self.logdet = LogdetMethod(self.logdet)


@dataclass
class ExperimentConfig:
    generator: str | None = "dumbbell"
    generator_params: dict = field(default_factory=dict)
    csv_path: str | None = None
    beta: float = 0.0
    n_labeled: int | None = 10
    labeled_fraction: float | None = None
    n_points: int = 1556
    model: ModelKind = ModelKind.imgp_semisupervised
    nu: int = 1
    K: int = 10
    L: int = 50
    tau: float = 0.01
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out: str | None = None
    blend: bool = True
    reoptimize: bool = True
    eigensolver: Eigensolver = Eigensolver.lanczos
    oversampling: int = LANCZOS_OVERSAMPLING
    euclid_nu: float = 2.5
    record_timings: bool = True

    def __post_init__(self):
        self.model = ModelKind(self.model)
        self.eigensolver = Eigensolver(self.eigensolver)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.csv_path is None and self.generator is None:
            raise ConfigError("either generator or csv_path must be given")
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if self.labeled_fraction is not None and not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, document):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        document = dict(document)
        if isinstance(document.get("train"), dict):
            train_known = {f.name for f in dataclasses.fields(TrainConfig)}
            train_unknown = set(document["train"]) - train_known
            if train_unknown:
                raise ConfigError(f"unknown train keys: {sorted(train_unknown)}")
        return cls(**document)

    def to_dict(self):
        document = dataclasses.asdict(self)
        document["model"] = str(self.model)
        document["eigensolver"] = str(self.eigensolver)
        document["train"]["logdet"] = str(self.train.logdet)
        return document

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def resolve_n_labeled(self, n_points):
        if self.labeled_fraction is not None:
            return max(1, int(round(self.labeled_fraction * n_points)))
        if self.n_labeled is None:
            raise ConfigError("either n_labeled or labeled_fraction must be given")
        return int(self.n_labeled)


@dataclass
class MetricsReport:
    rmse: float
    nll: float
    floored_variance_count: int = 0
    stage_seconds: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    checkpoint: str | None = None
    config_echo: dict = field(default_factory=dict)
    runtime_seconds: float = 0.0

    def to_document(self, record_timings=True):
        document = {
            "config_echo": self.config_echo,
            "rmse": self.rmse,
            "nll": self.nll,
            "floored_variance_count": self.floored_variance_count,
            "warnings": list(self.warnings),
        }
        if record_timings:
            document["stage_seconds"] = dict(self.stage_seconds)
        if self.checkpoint is not None:
            document["checkpoint"] = self.checkpoint
        return document
