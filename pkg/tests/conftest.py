import numpy as np
import pytest

from imgp.domain.priors import knn_radii
from imgp.models import HyperParams, PointCloud
from imgp.resources.cli import configure_logging
from imgp.services.graph import build_graph, build_knn_index
from imgp.settings import TestingConfig


@pytest.fixture(autouse=True, scope="session")
def quiet_logging():
    configure_logging(TestingConfig.LOG_LEVEL)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def noisy_circle(N, seed=0, jitter=0.05):
    rng = np.random.default_rng(seed)
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, N))
    radius = 1.0 + jitter * rng.standard_normal(N)
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


@pytest.fixture
def circle_points():
    return noisy_circle


@pytest.fixture
def make_index():
    def factory(N=30, K=6, seed=0):
        cloud = PointCloud.from_raw(noisy_circle(N, seed))
        return build_knn_index(cloud, K, threads=1)

    return factory


@pytest.fixture
def make_graph(make_index):
    """Density-normalized graph on a noisy circle, bandwidth at the median KNN radius."""

    def factory(N=30, K=6, seed=0, alpha=None):
        index = make_index(N, K, seed)
        if alpha is None:
            alpha = float(np.median(knn_radii(index)))
        return build_graph(index, alpha)

    return factory


@pytest.fixture
def make_params():
    def factory(alpha=0.3, kappa=1.0, sigma2=1.0, noise2=0.0, nu=1):
        return HyperParams(alpha=alpha, kappa=kappa, sigma2=sigma2, noise2=noise2, nu=nu)

    return factory
