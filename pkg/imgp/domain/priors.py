import math

import numpy as np
from loguru import logger
from scipy import stats

from imgp.errors import ConfigError, DegeneratePrior
from imgp.models import PriorSpec


def knn_radii(index):
    """For every node, the distance to the farthest of its K nearest neighbors."""
    _, d2 = index.node_neighbors
    return np.sqrt(d2[:, -1])


def bandwidth_prior_fit(cloud, index, tau=0.01, sigma2_var=1.0 / 9.0, noise2_var=1.0 / 9.0):
    """
    Gamma prior for the graph bandwidth whose mode sits at the median KNN
    radius Q2 and which keeps most of its mass above the smallest bandwidth
    alpha_lower that still connects every node to its farthest neighbor with
    weight at least tau.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    if index.N < 2:
        raise ConfigError("the bandwidth prior needs at least two points")

    radii = knn_radii(index)
    alpha_lower = float(np.sqrt(-np.min(radii) ** 2 / (4.0 * math.log(tau))))
    median = float(np.median(radii))
    if median <= alpha_lower:
        raise DegeneratePrior(
            f"median KNN radius {median:.4g} does not exceed the bandwidth lower bound "
            f"{alpha_lower:.4g}; lower tau"
        )
    rho = 4.0 * median / (median - alpha_lower) ** 2
    shape = rho * median + 1.0
    rate = rho
    coverage = float(stats.gamma.sf(alpha_lower, a=shape, scale=1.0 / rate))
    logger.info(
        "Bandwidth prior: Q2={:.4g}, alpha_lower={:.4g}, shape={:.4g}, rate={:.4g}, "
        "P(alpha > alpha_lower)={:.3f}",
        median,
        alpha_lower,
        shape,
        rate,
        coverage,
    )
    return PriorSpec(
        alpha_shape=shape,
        alpha_rate=rate,
        sigma2_var=sigma2_var,
        noise2_var=noise2_var,
        median_distance=median,
        alpha_lower=alpha_lower,
        rho=rho,
        tau=tau,
        coverage=coverage,
    )


def log_prior(params, priors):
    """Log prior density up to an additive constant; kappa is flat."""
    value = 0.0
    if priors.alpha_shape is not None:
        value += (priors.alpha_shape - 1.0) * math.log(params.alpha) - priors.alpha_rate * params.alpha
    if priors.sigma2_var is not None:
        value -= (params.sigma2 - 1.0) ** 2 / (2.0 * priors.sigma2_var)
    if priors.noise2_var is not None:
        value -= params.noise2**2 / (2.0 * priors.noise2_var)
    return value


def grad_log_prior(params, priors):
    """Gradient of log_prior with respect to the log-parameters."""
    grads = {"alpha": 0.0, "kappa": 0.0, "sigma2": 0.0, "noise2": 0.0}
    if priors.alpha_shape is not None:
        grads["alpha"] = (priors.alpha_shape - 1.0) - priors.alpha_rate * params.alpha
    if priors.sigma2_var is not None:
        grads["sigma2"] = -params.sigma2 * (params.sigma2 - 1.0) / priors.sigma2_var
    if priors.noise2_var is not None:
        grads["noise2"] = -(params.noise2**2) / priors.noise2_var
    return grads


def sample_initial(priors, rng, learn_noise=False):
    """
    Starting point of one optimizer trajectory: alpha, sigma2 and noise2 drawn
    from their priors, kappa at the median KNN radius.
    """
    fallback = priors.median_distance or 1.0
    if priors.alpha_shape is not None:
        alpha = float(rng.gamma(priors.alpha_shape, 1.0 / priors.alpha_rate))
    else:
        alpha = fallback

    if priors.sigma2_var is not None:
        sd = math.sqrt(priors.sigma2_var)
        sigma2 = float(stats.truncnorm.rvs(-1.0 / sd, np.inf, loc=1.0, scale=sd, random_state=rng))
    else:
        sigma2 = 1.0

    noise2 = 0.0
    if learn_noise:
        sd = math.sqrt(priors.noise2_var if priors.noise2_var is not None else 1.0 / 9.0)
        noise2 = float(stats.truncnorm.rvs(0.0, np.inf, loc=0.0, scale=sd, random_state=rng))
    return {"alpha": alpha, "kappa": fallback, "sigma2": sigma2, "noise2": noise2}
