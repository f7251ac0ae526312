from dataclasses import dataclass

import numpy as np
from loguru import logger
from scipy.spatial.distance import cdist

from imgp.constants import CG_TOL, DENSE_EIGEN_THRESHOLD, LANCZOS_OVERSAMPLING
from imgp.errors import ConvergenceFailure, UnsupportedSmoothness
from imgp.models import EigenBasis, Eigensolver, LaplacianKind
from imgp.services.linalg import SymmetricOperator, conjugate_gradients, dense_smallest, lanczos_smallest
from imgp.services.utils import make_rng

SUPPORTED_EUCLID_NU = (0.5, 1.5, 2.5, np.inf)


def phi(lam, nu, kappa):
    """Spectral density of the graph Matern kernel: (2 nu / kappa^2 + lambda)^-nu."""
    return (2.0 * nu / kappa**2 + np.asarray(lam, dtype=np.float64)) ** (-nu)


# ============================================================
# Eigenpairs of the random walk Laplacian
# ============================================================
def graph_eigenbasis(
    graph, L, seed=0, solver=Eigensolver.lanczos, oversampling=LANCZOS_OVERSAMPLING
):
    """
    The L smallest eigenpairs of the random walk Laplacian. They are computed
    on the similar symmetric Laplacian and mapped back by f = D^-1/2 f_sym,
    which makes them D-orthonormal.
    """
    sym = graph.laplacian(LaplacianKind.symmetric)
    L = min(int(L), graph.N)
    if Eigensolver(solver) == Eigensolver.dense:
        basis = dense_smallest(sym.to_sparse(), L)
    else:
        try:
            basis = lanczos_smallest(sym, L, seed=seed, oversampling=oversampling)
        except ConvergenceFailure as error:
            if graph.N > DENSE_EIGEN_THRESHOLD:
                raise
            logger.warning("{}; falling back to the dense eigensolver", error)
            basis = dense_smallest(sym.to_sparse(), L)

    vectors = basis.eigenvectors / np.sqrt(graph.deg)[:, None]
    logger.info(
        "Computed {} eigenpairs, lambda in [{:.3g}, {:.3g}]",
        basis.L,
        basis.eigenvalues[0],
        basis.eigenvalues[-1],
    )
    return EigenBasis(
        eigenvalues=basis.eigenvalues, eigenvectors=vectors, inner_weights=graph.deg.copy()
    )


@dataclass
class SpectralKernel:
    """Truncated graph Matern kernel (sigma2 / C) sum_l Phi(lambda_l) f_l f_l^T."""

    basis: EigenBasis
    params: object
    norm_const: float = 1.0

    @property
    def weights(self):
        p = self.params
        return p.sigma2 * phi(self.basis.eigenvalues, p.nu, p.kappa) / self.norm_const

    def matrix(self, rows=None, cols=None):
        f = self.basis.eigenvectors
        left = f if rows is None else f[rows]
        right = f if cols is None else f[cols]
        return (left * self.weights) @ right.T


def kernel_eval_nodes(kernel, i, j):
    f = kernel.basis.eigenvectors
    return float(np.sum(kernel.weights * f[i] * f[j]))


# ============================================================
# Sparse precision
# ============================================================
def shifted_laplacian_power(graph, shift, v, power):
    """(shift * I + Delta_rw)^power v by repeated sparse application."""
    out = np.asarray(v, dtype=np.float64)
    for _ in range(power):
        out = shift * out + out - (graph.adj @ out) / graph.deg
    return out


def precision_matvec(graph, params, v, norm_const=1.0):
    """
    (C / sigma2) * D * (2 nu / kappa^2 * I + Delta_rw)^nu v, the inverse of
    the full-spectrum graph Matern kernel matrix. D is applied last.
    """
    shift = 2.0 * params.nu / params.kappa**2
    out = shifted_laplacian_power(graph, shift, v, params.nu)
    return (norm_const / params.sigma2) * graph.deg * out


def precision_operator(graph, params, norm_const=1.0):
    return SymmetricOperator(lambda v: precision_matvec(graph, params, v, norm_const), graph.N)


def precision_quadform_grad(graph, params, a, b, norm_const=1.0, dlog_norm=None):
    """
    a^T (dP / d log theta) b for theta in (alpha, kappa, sigma2), without
    forming dP. `dlog_norm` holds d log C / d log theta when C is not fixed.

    Uses D M^t = (M^T)^t D with M = shift * I + Delta_rw, so every term
    needs only forward applications of M.
    """
    nu = params.nu
    shift = 2.0 * nu / params.kappa**2
    scale = norm_const / params.sigma2
    deg = graph.deg
    adj_dot, deg_dot = graph.bandwidth_derivative

    powers_a = [np.asarray(a, dtype=np.float64)]
    powers_b = [np.asarray(b, dtype=np.float64)]
    for _ in range(nu):
        powers_a.append(shifted_laplacian_power(graph, shift, powers_a[-1], 1))
        powers_b.append(shifted_laplacian_power(graph, shift, powers_b[-1], 1))

    quad_p = scale * np.sum(powers_a[0] * deg * powers_b[nu])
    d_kappa = scale * (-2.0 * shift * nu) * np.sum(powers_a[0] * deg * powers_b[nu - 1])

    def deg_times_laplacian_dot(x):
        return (deg_dot / deg) * (graph.adj @ x) - adj_dot @ x

    d_alpha = np.sum(powers_a[0] * deg_dot * powers_b[nu])
    for t in range(nu):
        d_alpha += powers_a[t] @ deg_times_laplacian_dot(powers_b[nu - 1 - t])
    d_alpha *= scale

    grads = {"alpha": d_alpha, "kappa": d_kappa, "sigma2": -quad_p}
    if dlog_norm:
        for name, value in dlog_norm.items():
            grads[name] += value * quad_p
    return grads


@dataclass
class NormConstant:
    value: float
    probe_indices: np.ndarray
    solutions: np.ndarray


def norm_const(graph, params, M=10, seed=0, tol=CG_TOL):
    """
    Monte Carlo estimate of C = mean_i e_i^T P^-1 e_i over M seeded standard
    basis columns, with the precision taken at sigma2 = 1 and C = 1. With
    M >= N every column is used and the value is trace(K) / N exactly.
    """
    unit = params.replace(sigma2=1.0)
    op = precision_operator(graph, unit)
    if M >= graph.N:
        indices = np.arange(graph.N)
    else:
        indices = np.sort(make_rng(seed).choice(graph.N, size=M, replace=False))
    solutions = np.zeros((indices.size, graph.N))
    for row, i in enumerate(indices):
        e = np.zeros(graph.N)
        e[i] = 1.0
        solutions[row] = conjugate_gradients(op, e, tol=tol).solution
    value = float(np.mean(solutions[np.arange(indices.size), indices]))
    return NormConstant(value=value, probe_indices=indices, solutions=solutions)


def norm_const_log_grad(graph, params, estimate):
    """
    d log C / d log theta for alpha and kappa at fixed probe indices:
    dC = -mean_i t_i^T dP t_i with t_i = P^-1 e_i.
    """
    unit = params.replace(sigma2=1.0)
    total = {"alpha": 0.0, "kappa": 0.0}
    for t in estimate.solutions:
        grads = precision_quadform_grad(graph, unit, t, t)
        total["alpha"] -= grads["alpha"]
        total["kappa"] -= grads["kappa"]
    count = estimate.solutions.shape[0]
    return {name: value / (count * estimate.value) for name, value in total.items()}


# ============================================================
# Euclidean Matern kernels
# ============================================================
def _check_nu(nu):
    nu = float(nu)
    if nu not in SUPPORTED_EUCLID_NU:
        raise UnsupportedSmoothness(
            f"Euclidean Matern smoothness must be one of 1/2, 3/2, 5/2, inf; got {nu}"
        )
    return nu


def matern_from_distance(r, nu, kappa, sigma2):
    nu = _check_nu(nu)
    r = np.asarray(r, dtype=np.float64)
    if np.isinf(nu):
        return sigma2 * np.exp(-(r**2) / (2.0 * kappa**2))
    s = np.sqrt(2.0 * nu) * r / kappa
    decay = np.exp(-s)
    if nu == 0.5:
        return sigma2 * decay
    if nu == 1.5:
        return sigma2 * (1.0 + s) * decay
    return sigma2 * (1.0 + s + s**2 / 3.0) * decay


def matern_log_kappa_grad(r, nu, kappa, sigma2):
    """d k / d log kappa as a function of distance."""
    nu = _check_nu(nu)
    r = np.asarray(r, dtype=np.float64)
    if np.isinf(nu):
        return sigma2 * (r**2 / kappa**2) * np.exp(-(r**2) / (2.0 * kappa**2))
    s = np.sqrt(2.0 * nu) * r / kappa
    decay = np.exp(-s)
    if nu == 0.5:
        return sigma2 * s * decay
    if nu == 1.5:
        return sigma2 * s**2 * decay
    return sigma2 * (s**2 / 3.0) * (1.0 + s) * decay


def euclid_matern(x, y, nu_eucl, kappa, sigma2):
    r = np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))
    return float(matern_from_distance(r, nu_eucl, kappa, sigma2))


def matern_gram(X, Y, nu_eucl, kappa, sigma2):
    return matern_from_distance(cdist(np.atleast_2d(X), np.atleast_2d(Y)), nu_eucl, kappa, sigma2)


class RandomFourierFeatures:
    """
    Paired cos/sin random features for the squared exponential kernel
    sigma2 * exp(-|x - y|^2 / (2 kappa^2)); phi(x)^T phi(x) = sigma2 exactly.
    """

    def __init__(self, d, n_features, kappa, seed=0, sigma2=1.0):
        self.n_frequencies = max(1, int(n_features) // 2)
        self.kappa = kappa
        self.sigma2 = sigma2
        rng = make_rng(seed)
        self.frequencies = rng.standard_normal((d, self.n_frequencies)) / kappa

    @property
    def n_features(self):
        return 2 * self.n_frequencies

    def __call__(self, X):
        projection = np.atleast_2d(X) @ self.frequencies
        scale = np.sqrt(self.sigma2 / self.n_frequencies)
        return scale * np.hstack([np.cos(projection), np.sin(projection)])


def rff_features(d, n_features, kappa, seed=0, sigma2=1.0):
    return RandomFourierFeatures(d, n_features, kappa, seed=seed, sigma2=sigma2)
