import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from loguru import logger
from scipy import linalg as sla
from scipy.spatial.distance import cdist, pdist

from imgp.constants import (
    BLEND_RADIUS_FACTOR,
    EIGENVALUE_ONE_GAP,
    GRAM_JITTER,
    NEGATIVE_VARIANCE_TOLERANCE,
    RFF_FIT_SUBSAMPLE,
    RFF_THRESHOLD,
)
from imgp.errors import EigenvalueAtOne, NotPositiveDefinite, NumericallyDetached
from imgp.services.graph import extend_weights_many
from imgp.services.kernel import (
    matern_from_distance,
    matern_gram,
    matern_log_kappa_grad,
    phi,
    rff_features,
)
from imgp.services.optim import Adam
from imgp.services.utils import make_rng

EUCLID_FIT_ITERS = 300
EUCLID_FIT_LR = 0.05
EUCLID_MIN_LOG_NOISE = math.log(1e-8)


# ============================================================
# Nystrom extension
# ============================================================
def drop_unextendable(basis):
    """Remove eigenpairs with lambda >= 1 - gap, where 1 / (1 - lambda) blows up."""
    keep = basis.eigenvalues < 1.0 - EIGENVALUE_ONE_GAP
    if keep.all():
        return basis
    logger.warning(
        "Dropping {} eigenpairs with eigenvalue at 1 from the extension; L is now {}",
        int((~keep).sum()),
        int(keep.sum()),
    )
    return basis.select(np.flatnonzero(keep))


@dataclass
class AmbientFeatures:
    values: np.ndarray
    distance: np.ndarray
    detached: np.ndarray
    nodes: np.ndarray


def nystrom_features(graph, basis, x, snap=True):
    """
    f_l(x) = (1 - lambda_l)^-1 sum_j A(x, x_j) / D(x) f_l(x_j) for every
    retained eigenpair. A single point returns a vector and raises on
    detachment; a batch returns AmbientFeatures with detached rows zeroed.
    """
    if np.any(basis.eigenvalues >= 1.0 - EIGENVALUE_ONE_GAP):
        raise EigenvalueAtOne("basis holds eigenvalues at 1; drop them before extending")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    extension = extend_weights_many(graph, np.atleast_2d(x), snap=snap)
    if single and extension.detached[0]:
        raise NumericallyDetached("query point is detached from the graph")

    degree = np.where(extension.detached, 1.0, extension.degree)
    values = (extension.weights @ basis.eigenvectors) / degree[:, None]
    values /= 1.0 - basis.eigenvalues
    values[extension.detached] = 0.0
    if single:
        return values[0]
    return AmbientFeatures(
        values=values,
        distance=extension.distance,
        detached=extension.detached,
        nodes=extension.nodes,
    )


def kernel_eval_ambient(kernel, graph, x, x_other):
    f_x = nystrom_features(graph, kernel.basis, x)
    f_other = nystrom_features(graph, kernel.basis, x_other)
    return float(np.sum(kernel.weights * f_x * f_other))


# ============================================================
# Finite-rank Gaussian process
# ============================================================
@dataclass
class TruncatedLikelihood:
    value: float
    grads: dict


class FeatureGP:
    """
    Bayesian linear model y = G u + eps, u ~ N(0, I), eps ~ N(0, noise2 I),
    with scaled features G = F sqrt(weights). Small problems (n <= number of
    features or negligible noise) are solved in the n x n Gram space, the rest
    through the Woodbury identity in feature space. Either way the result is
    the weight posterior N(mean_u, cov_u), which makes prediction cost O(L^2).
    """

    def __init__(self, features, weights, noise2, y):
        self.features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        self.weights = np.asarray(weights, dtype=np.float64)
        self.noise2 = float(noise2)
        self.y = np.asarray(y, dtype=np.float64)
        self.scale = np.sqrt(self.weights)
        n, n_features = self.features.shape
        self.gram_path = n <= n_features or self.noise2 < GRAM_JITTER
        self._factorize()

    @property
    def n(self):
        return self.features.shape[0]

    def _factorize(self):
        F = self.features
        G = F * self.scale
        n_features = G.shape[1]
        if self.n == 0:
            self.alpha_vec = np.zeros(0)
            self.kinv_features = np.zeros((0, n_features))
            self.logdet = 0.0
            self.kinv_trace = 0.0
            self.mean_u = np.zeros(n_features)
            self.cov_u = np.eye(n_features)
            return

        if self.gram_path:
            gram = G @ G.T
            gram[np.diag_indices_from(gram)] += self.noise2 + GRAM_JITTER
            try:
                factor = sla.cho_factor(gram, lower=True)
            except sla.LinAlgError as error:
                raise NotPositiveDefinite(f"feature Gram matrix: {error}") from error
            self.alpha_vec = sla.cho_solve(factor, self.y)
            self.kinv_features = sla.cho_solve(factor, F)
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
            self.kinv_trace = float(np.trace(sla.cho_solve(factor, np.eye(self.n))))
            kinv_g = self.kinv_features * self.scale
            self.mean_u = G.T @ self.alpha_vec
            self.cov_u = np.eye(n_features) - G.T @ kinv_g
        else:
            s = self.noise2
            inner = np.eye(n_features) + (G.T @ G) / s
            try:
                factor = sla.cho_factor(inner, lower=True)
            except sla.LinAlgError as error:
                raise NotPositiveDefinite(f"feature precision: {error}") from error
            inner_inv = sla.cho_solve(factor, np.eye(n_features))
            gty = G.T @ self.y
            self.alpha_vec = self.y / s - G @ (inner_inv @ gty) / s**2
            self.kinv_features = F / s - G @ (inner_inv @ (G.T @ F)) / s**2
            self.logdet = self.n * math.log(s) + 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
            self.kinv_trace = self.n / s - float(np.trace(inner_inv @ (G.T @ G))) / s**2
            self.mean_u = inner_inv @ gty / s
            self.cov_u = inner_inv
        self.cov_u = 0.5 * (self.cov_u + self.cov_u.T)

    def log_marginal(self, dweights=None, noise_grad=False):
        """
        log N(y; 0, F diag(w) F^T + noise2 I) and its gradient; `dweights`
        maps a parameter name to dw / d log theta.
        """
        value = -0.5 * (
            float(self.y @ self.alpha_vec) + self.logdet + self.n * math.log(2.0 * math.pi)
        )
        grads = {}
        if dweights:
            projected = self.features.T @ self.alpha_vec
            diag_inner = np.einsum("il,il->l", self.features, self.kinv_features)
            for name, dw in dweights.items():
                grads[name] = 0.5 * float(np.sum(dw * (projected**2 - diag_inner)))
        if noise_grad:
            grads["noise2"] = 0.5 * self.noise2 * (
                float(self.alpha_vec @ self.alpha_vec) - self.kinv_trace
            )
        return TruncatedLikelihood(value=value, grads=grads)

    def predict(self, features):
        """Posterior mean and variance of the latent function at feature rows."""
        G = np.atleast_2d(features) * self.scale
        mean = G @ self.mean_u
        variance = np.einsum("il,lk,ik->i", G, self.cov_u, G)
        return mean, clamp_variance(variance)

    def sample(self, features, n_samples, seed=0):
        """Weight-space posterior draws, one column per sample."""
        G = np.atleast_2d(features) * self.scale
        values, vectors = np.linalg.eigh(self.cov_u)
        root = vectors * np.sqrt(np.clip(values, 0.0, None))
        noise = make_rng(seed).standard_normal((self.mean_u.shape[0], n_samples))
        return G @ (self.mean_u[:, None] + root @ noise)


def clamp_variance(variance):
    variance = np.asarray(variance, dtype=np.float64)
    negative = variance < -NEGATIVE_VARIANCE_TOLERANCE
    if negative.any():
        logger.warning(
            "{} posterior variances below -{:g} clamped to 0 (min {:.3g})",
            int(negative.sum()),
            NEGATIVE_VARIANCE_TOLERANCE,
            float(variance.min()),
        )
    return np.clip(variance, 0.0, None)


def spectral_weights(basis, params, norm_const=1.0):
    return params.sigma2 * phi(basis.eigenvalues, params.nu, params.kappa) / norm_const


def spectral_weight_grads(basis, params, norm_const=1.0):
    """d w / d log theta for sigma2 and kappa."""
    weights = spectral_weights(basis, params, norm_const)
    shift = 2.0 * params.nu / params.kappa**2
    return {
        "sigma2": weights,
        "kappa": weights * 2.0 * params.nu * shift / (shift + basis.eigenvalues),
    }


# ============================================================
# Geometric posterior
# ============================================================
class GeometricPosterior:
    """Graph Matern GP conditioned on the labeled nodes, evaluated in feature space."""

    def __init__(self, graph, basis, params, labeled_idx, y, norm_const=1.0):
        self.graph = graph
        self.basis = drop_unextendable(basis)
        self.params = params
        self.norm_const = norm_const
        self.labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
        self.weights = spectral_weights(self.basis, params, norm_const)
        self.model = FeatureGP(
            self.basis.eigenvectors[self.labeled_idx], self.weights, params.noise2, y
        )

    @property
    def alpha(self):
        return self.graph.alpha

    def prior_variance(self, features):
        return np.sum(features**2 * self.weights, axis=1)

    @cached_property
    def detached_variance(self):
        """Prior variance averaged over the graph nodes."""
        return float(np.mean(self.prior_variance(self.basis.eigenvectors)))

    def predict_nodes(self, nodes):
        return self.model.predict(self.basis.eigenvectors[nodes])

    def predict(self, X):
        """(mean, variance, features) at ambient points; detached rows get the prior."""
        features = nystrom_features(self.graph, self.basis, np.atleast_2d(X))
        mean, variance = self.model.predict(features.values)
        variance[features.detached] = self.detached_variance
        return mean, variance, features

    def sample(self, X, n_samples, seed=0):
        features = nystrom_features(self.graph, self.basis, np.atleast_2d(X))
        return self.model.sample(features.values, n_samples, seed)


def posterior(geo, x):
    mean, variance, _ = geo.predict(np.atleast_2d(x))
    return float(mean[0]), float(variance[0])


def sample_posterior(geo, points, n_samples, seed=0):
    return geo.sample(points, n_samples, seed)


# ============================================================
# Euclidean posterior
# ============================================================
def euclid_log_marginal(points, y, nu, log_params, with_grad=True):
    """Exact log marginal likelihood of a Euclidean Matern GP and its log-parameter gradient."""
    kappa = math.exp(log_params["kappa"])
    sigma2 = math.exp(log_params["sigma2"])
    noise2 = math.exp(log_params["noise2"])
    distances = cdist(points, points)
    signal = matern_from_distance(distances, nu, kappa, sigma2)
    gram = signal + (noise2 + GRAM_JITTER) * np.eye(points.shape[0])
    try:
        factor = sla.cho_factor(gram, lower=True)
    except sla.LinAlgError as error:
        raise NotPositiveDefinite(f"Euclidean Gram matrix: {error}") from error
    alpha_vec = sla.cho_solve(factor, y)
    value = -0.5 * float(y @ alpha_vec) - float(np.sum(np.log(np.diag(factor[0]))))
    value -= 0.5 * points.shape[0] * math.log(2.0 * math.pi)
    if not with_grad:
        return value, {}

    inverse = sla.cho_solve(factor, np.eye(points.shape[0]))
    outer = np.outer(alpha_vec, alpha_vec) - inverse

    def directional(dK):
        return 0.5 * float(np.sum(outer * dK))

    grads = {
        "kappa": directional(matern_log_kappa_grad(distances, nu, kappa, sigma2)),
        "sigma2": directional(signal),
        "noise2": directional(noise2 * np.eye(points.shape[0])),
    }
    return value, grads


class EuclideanPosterior:
    """
    Standard GP on the labeled ambient points, hyperparameters fitted by
    maximizing its own marginal likelihood. Above RFF_THRESHOLD labeled points
    the posterior switches to squared-exponential random features fitted on a
    subsample.
    """

    def __init__(self, points, y, nu=2.5, n_features=50, seed=0):
        self.points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        self.y = np.asarray(y, dtype=np.float64)
        self.nu = nu
        self.seed = seed
        self.n_features = n_features
        self.use_rff = self.points.shape[0] > RFF_THRESHOLD
        self.kappa, self.sigma2, self.noise2 = 1.0, 1.0, 0.1
        self.trace = []
        self._features = None
        self._model = None

    @property
    def n(self):
        return self.points.shape[0]

    def fit(self, iters=EUCLID_FIT_ITERS, lr=EUCLID_FIT_LR):
        if self.n == 0:
            return self
        points, y, nu = self.points, self.y, self.nu
        if self.use_rff:
            nu = np.inf
            rng = make_rng(self.seed, 1)
            subset = np.sort(rng.choice(self.n, size=RFF_FIT_SUBSAMPLE, replace=False))
            points, y = points[subset], y[subset]

        kappa0 = float(np.median(pdist(points))) if points.shape[0] > 1 else 1.0
        log_params = {
            "kappa": math.log(kappa0 if kappa0 > 0 else 1.0),
            "sigma2": 0.0,
            "noise2": math.log(0.1),
        }
        optimizer = Adam(lr=lr)
        for _ in range(iters):
            value, grads = euclid_log_marginal(points, y, nu, log_params)
            self.trace.append(value)
            log_params = optimizer.step(log_params, grads)
            log_params["noise2"] = max(log_params["noise2"], EUCLID_MIN_LOG_NOISE)

        self.kappa = math.exp(log_params["kappa"])
        self.sigma2 = math.exp(log_params["sigma2"])
        self.noise2 = math.exp(log_params["noise2"])
        logger.info(
            "Euclidean GP fitted: kappa={:.4g}, sigma2={:.4g}, noise2={:.3g}{}",
            self.kappa,
            self.sigma2,
            self.noise2,
            " (random features)" if self.use_rff else "",
        )
        self._condition()
        return self

    def _condition(self):
        if self.use_rff:
            self._features = rff_features(
                self.points.shape[1], self.n_features, self.kappa, self.seed, self.sigma2
            )
            phi_train = self._features(self.points)
            self._model = FeatureGP(phi_train, np.ones(phi_train.shape[1]), self.noise2, self.y)
            return
        gram = matern_gram(self.points, self.points, self.nu, self.kappa, self.sigma2)
        gram[np.diag_indices_from(gram)] += self.noise2 + GRAM_JITTER
        self._factor = sla.cho_factor(gram, lower=True)
        self._alpha_vec = sla.cho_solve(self._factor, self.y)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.n == 0:
            return np.zeros(X.shape[0]), np.full(X.shape[0], self.sigma2)
        if self.use_rff:
            return self._model.predict(self._features(X))
        cross = matern_gram(X, self.points, self.nu, self.kappa, self.sigma2)
        mean = cross @ self._alpha_vec
        solved = sla.cho_solve(self._factor, cross.T)
        variance = self.sigma2 - np.einsum("ij,ji->i", cross, solved)
        return mean, clamp_variance(variance)


# ============================================================
# Hybrid
# ============================================================
def bump_weight(distance, alpha):
    """exp(1 - r^2 / (r^2 - dist^2)) inside r = 3 alpha, zero outside."""
    distance = np.asarray(distance, dtype=np.float64)
    radius2 = (BLEND_RADIUS_FACTOR * alpha) ** 2
    gamma = np.zeros_like(distance)
    inside = distance**2 < radius2
    gamma[inside] = np.exp(1.0 - radius2 / (radius2 - distance[inside] ** 2))
    return gamma


class HybridPredictor:
    """
    gamma * geometric + (1 - gamma) * Euclidean, the two posteriors treated as
    independent. Without blending the geometric model is used wherever it is
    defined.
    """

    def __init__(self, geometric, euclidean, blend=True):
        self.geometric = geometric
        self.euclidean = euclidean
        self.blend = blend

    @property
    def blend_radius(self):
        return BLEND_RADIUS_FACTOR * self.geometric.alpha

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        geo_mean, geo_var, features = self.geometric.predict(X)
        if self.blend:
            gamma = bump_weight(features.distance, self.geometric.alpha)
        else:
            gamma = np.ones(X.shape[0])
        gamma[features.detached] = 0.0

        if self.euclidean is None or not np.any(gamma < 1.0):
            if features.detached.any():
                logger.warning("{} detached points predicted with the prior", features.detached.sum())
            return geo_mean, geo_var, gamma

        euc_mean, euc_var = self.euclidean.predict(X)
        mean = gamma * geo_mean + (1.0 - gamma) * euc_mean
        variance = gamma**2 * geo_var + (1.0 - gamma) ** 2 * euc_var
        return mean, variance, gamma


def blend(hybrid, x):
    mean, variance, gamma = hybrid.predict(np.atleast_2d(x))
    return float(mean[0]), float(variance[0]), float(gamma[0])
