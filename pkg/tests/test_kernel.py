import numpy as np
import pytest
from scipy import special

from imgp.domain.datasets import gen_circle
from imgp.domain.priors import knn_radii
from imgp.errors import UnsupportedSmoothness
from imgp.models import Eigensolver
from imgp.services.graph import build_graph, build_knn_index
from imgp.services.kernel import (
    SpectralKernel,
    euclid_matern,
    graph_eigenbasis,
    kernel_eval_nodes,
    matern_from_distance,
    matern_gram,
    matern_log_kappa_grad,
    norm_const,
    norm_const_log_grad,
    phi,
    precision_matvec,
    precision_operator,
    precision_quadform_grad,
    rff_features,
)
from imgp.services.linalg import assemble_dense


def _full_kernel(graph, params, C=1.0):
    basis = graph_eigenbasis(graph, graph.N, solver=Eigensolver.dense)
    return SpectralKernel(basis, params, norm_const=C).matrix()


class TestSpectralDensity:
    def test_values(self):
        assert phi(0.0, 1, 1.0) == pytest.approx(0.5)
        assert phi(0.0, 2, 1.0) == pytest.approx(1.0 / 16.0)
        assert phi(2.0, 1, 1.0) == pytest.approx(0.25)

    def test_decreasing_in_eigenvalue(self):
        values = phi(np.linspace(0.0, 2.0, 20), 3, 0.7)
        assert np.all(np.diff(values) < 0)


class TestEigenbasis:
    """Random walk eigenpairs through the symmetric Laplacian."""

    @pytest.mark.parametrize("solver", [Eigensolver.lanczos, Eigensolver.dense])
    def test_d_orthonormal_eigenpairs(self, make_graph, solver):
        graph = make_graph(N=200, K=10)
        basis = graph_eigenbasis(graph, 15, seed=1, solver=solver)
        f = basis.eigenvectors
        np.testing.assert_allclose(f.T @ (graph.deg[:, None] * f), np.eye(15), atol=1e-8)
        rw = graph.laplacian()
        for value, vector in zip(basis.eigenvalues, f.T):
            residual = np.linalg.norm(rw.matvec(vector) - value * vector)
            assert residual <= 1e-6 * max(1.0, value) * np.linalg.norm(vector)

    def test_first_eigenpair_is_constant(self, make_graph):
        graph = make_graph(N=100, K=8)
        basis = graph_eigenbasis(graph, 5, solver=Eigensolver.dense)
        assert abs(basis.eigenvalues[0]) < 1e-10
        f0 = basis.eigenvectors[:, 0]
        np.testing.assert_allclose(f0, np.full(100, 1.0 / np.sqrt(graph.deg.sum())), rtol=1e-8)

    def test_lanczos_matches_dense_on_a_larger_graph(self, make_graph):
        graph = make_graph(N=500, K=10, seed=3)
        lanczos = graph_eigenbasis(graph, 20, seed=2)
        dense = graph_eigenbasis(graph, 20, solver=Eigensolver.dense)
        np.testing.assert_allclose(lanczos.eigenvalues, dense.eigenvalues, rtol=1e-8, atol=1e-10)
        f = lanczos.eigenvectors
        np.testing.assert_allclose(f.T @ (graph.deg[:, None] * f), np.eye(20), atol=1e-8)

    @pytest.mark.slow
    def test_circle_spectrum_ratios(self):
        cloud = gen_circle(2000, seed=0)
        index = build_knn_index(cloud, 10)
        graph = build_graph(index, float(np.median(knn_radii(index))))
        values = graph_eigenbasis(graph, 5).eigenvalues
        # circle eigenvalues 0, 1, 1, 4, 4 up to the bandwidth scaling
        assert values[3] / values[1] == pytest.approx(4.0, rel=0.1)
        assert values[4] / values[2] == pytest.approx(4.0, rel=0.1)


class TestPrecision:
    """Sparse precision against the full-spectrum kernel."""

    @pytest.mark.parametrize("nu", [1, 2, 3])
    @pytest.mark.parametrize("N", [20, 100])
    def test_precision_inverts_the_kernel(self, make_graph, make_params, nu, N):
        graph = make_graph(N=N, K=5 if N == 20 else 8)
        params = make_params(alpha=graph.alpha, kappa=1.0, sigma2=1.3, nu=nu)
        K = _full_kernel(graph, params)
        P = assemble_dense(precision_operator(graph, params))
        assert np.max(np.abs(K @ P - np.eye(N))) < 1e-6

    def test_kernel_is_psd_and_symmetric(self, make_graph, make_params):
        graph = make_graph(N=40, K=6)
        K = _full_kernel(graph, make_params(alpha=graph.alpha, nu=2))
        np.testing.assert_allclose(K, K.T, atol=1e-12)
        assert np.linalg.eigvalsh(K).min() > -1e-12

    def test_more_eigenpairs_give_a_larger_kernel(self, make_graph, make_params):
        graph = make_graph(N=40, K=6)
        params = make_params(alpha=graph.alpha, nu=2)
        wide = SpectralKernel(graph_eigenbasis(graph, 20, solver=Eigensolver.dense), params).matrix()
        narrow = SpectralKernel(graph_eigenbasis(graph, 10, solver=Eigensolver.dense), params).matrix()
        assert np.linalg.eigvalsh(wide - narrow).min() >= -1e-12

    def test_precision_of_zero_is_zero(self, make_graph, make_params):
        graph = make_graph(N=30, K=6)
        for nu in (1, 2, 3):
            params = make_params(alpha=graph.alpha, kappa=0.7, sigma2=2.0, nu=nu)
            np.testing.assert_array_equal(precision_matvec(graph, params, np.zeros(30), norm_const=3.0), np.zeros(30))

    def test_kernel_eval_nodes_matches_matrix(self, make_graph, make_params):
        graph = make_graph(N=40, K=6)
        basis = graph_eigenbasis(graph, 10, solver=Eigensolver.dense)
        kernel = SpectralKernel(basis, make_params(alpha=graph.alpha))
        matrix = kernel.matrix()
        assert kernel_eval_nodes(kernel, 3, 17) == pytest.approx(matrix[3, 17], rel=1e-12)
        assert kernel_eval_nodes(kernel, 5, 5) > 0

    @pytest.mark.parametrize("nu", [1, 2, 3])
    def test_quadform_gradient_matches_finite_differences(self, make_graph, make_params, rng, nu):
        graph = make_graph(N=30, K=6)
        params = make_params(alpha=graph.alpha, kappa=0.8, sigma2=1.5, nu=nu)
        a, b = rng.standard_normal(30), rng.standard_normal(30)

        def quadform(theta):
            alpha, kappa, sigma2 = np.exp(theta)
            trial = params.replace(alpha=alpha, kappa=kappa, sigma2=sigma2)
            return a @ precision_operator(graph.with_bandwidth(alpha), trial).matvec(b)

        theta = np.log([params.alpha, params.kappa, params.sigma2])
        h = 1e-5
        numeric = []
        for i in range(3):
            step = np.zeros(3)
            step[i] = h
            numeric.append((quadform(theta + step) - quadform(theta - step)) / (2.0 * h))
        grads = precision_quadform_grad(graph, params, a, b)
        analytic = [grads["alpha"], grads["kappa"], grads["sigma2"]]
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8 * np.max(np.abs(numeric)))


class TestNormalization:
    """Average-variance normalization constant."""

    def test_all_columns_give_the_exact_mean_variance(self, make_graph, make_params):
        graph = make_graph(N=30, K=6)
        params = make_params(alpha=graph.alpha, kappa=1.0, sigma2=2.0, nu=2)
        estimate = norm_const(graph, params, M=30, tol=1e-12)
        K_unit = _full_kernel(graph, params.replace(sigma2=1.0))
        assert estimate.value == pytest.approx(np.trace(K_unit) / 30, rel=1e-8)
        np.testing.assert_array_equal(estimate.probe_indices, np.arange(30))

    def test_normalized_kernel_has_mean_variance_sigma2(self, make_graph, make_params):
        graph = make_graph(N=30, K=6)
        params = make_params(alpha=graph.alpha, kappa=1.0, sigma2=2.0, nu=1)
        C = norm_const(graph, params, M=30, tol=1e-12).value
        K = _full_kernel(graph, params, C)
        assert np.mean(np.diag(K)) == pytest.approx(2.0, rel=1e-8)

    def test_subsampled_columns_are_seeded(self, make_graph, make_params):
        graph = make_graph(N=30, K=6)
        params = make_params(alpha=graph.alpha)
        first = norm_const(graph, params, M=5, seed=4)
        second = norm_const(graph, params, M=5, seed=4)
        np.testing.assert_array_equal(first.probe_indices, second.probe_indices)
        assert first.value == second.value
        assert first.probe_indices.size == 5

    def test_log_gradient_matches_finite_differences(self, make_graph, make_params):
        graph = make_graph(N=30, K=6)
        params = make_params(alpha=graph.alpha, kappa=0.9, nu=2)
        estimate = norm_const(graph, params, M=30, tol=1e-12)
        grads = norm_const_log_grad(graph, params, estimate)

        def log_c(alpha, kappa):
            trial = params.replace(alpha=alpha, kappa=kappa)
            return np.log(norm_const(graph.with_bandwidth(alpha), trial, M=30, tol=1e-12).value)

        h = 1e-5
        d_alpha = (
            log_c(params.alpha * np.exp(h), params.kappa) - log_c(params.alpha * np.exp(-h), params.kappa)
        ) / (2.0 * h)
        d_kappa = (
            log_c(params.alpha, params.kappa * np.exp(h)) - log_c(params.alpha, params.kappa * np.exp(-h))
        ) / (2.0 * h)
        assert grads["alpha"] == pytest.approx(d_alpha, rel=1e-4, abs=1e-6)
        assert grads["kappa"] == pytest.approx(d_kappa, rel=1e-4, abs=1e-6)


class TestEuclideanMatern:
    """Closed-form Matern kernels against the Bessel definition."""

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
    def test_matches_bessel_form(self, nu):
        r = np.linspace(0.1, 3.0, 25)
        kappa, sigma2 = 0.7, 1.8
        s = np.sqrt(2.0 * nu) * r / kappa
        expected = sigma2 * 2.0 ** (1.0 - nu) / special.gamma(nu) * s**nu * special.kv(nu, s)
        np.testing.assert_allclose(matern_from_distance(r, nu, kappa, sigma2), expected, rtol=1e-10)

    def test_squared_exponential_limit(self):
        r = np.linspace(0.0, 2.0, 5)
        np.testing.assert_allclose(
            matern_from_distance(r, np.inf, 0.5, 2.0), 2.0 * np.exp(-(r**2) / 0.5)
        )

    def test_value_at_zero_is_sigma2(self):
        x = np.array([0.3, -0.2])
        assert euclid_matern(x, x, 2.5, 0.4, 1.7) == pytest.approx(1.7)

    def test_rejects_unsupported_smoothness(self):
        with pytest.raises(UnsupportedSmoothness):
            matern_from_distance(1.0, 1.0, 1.0, 1.0)

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5, np.inf])
    def test_gram_is_psd(self, rng, nu):
        X = rng.uniform(-1.0, 1.0, size=(40, 2))
        gram = matern_gram(X, X, nu, 0.5, 1.0)
        assert np.linalg.eigvalsh(gram).min() > -1e-10

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5, np.inf])
    def test_log_kappa_gradient(self, nu):
        r = np.linspace(0.05, 2.0, 10)
        kappa, h = 0.8, 1e-6
        numeric = (
            matern_from_distance(r, nu, kappa * np.exp(h), 1.2)
            - matern_from_distance(r, nu, kappa * np.exp(-h), 1.2)
        ) / (2.0 * h)
        np.testing.assert_allclose(matern_log_kappa_grad(r, nu, kappa, 1.2), numeric, rtol=1e-6, atol=1e-12)


class TestRandomFeatures:
    """Paired cos/sin features for the squared exponential kernel."""

    def test_diagonal_is_exact(self, rng):
        features = rff_features(3, 64, kappa=0.5, seed=2, sigma2=1.7)
        phi_x = features(rng.standard_normal((10, 3)))
        np.testing.assert_allclose(np.sum(phi_x**2, axis=1), 1.7, rtol=1e-12)

    def test_approximates_the_kernel(self, rng):
        features = rff_features(2, 4096, kappa=1.0, seed=5)
        X = rng.uniform(0.0, 0.5, size=(100, 2))
        Y = rng.uniform(0.0, 0.5, size=(100, 2))
        approx = np.sum(features(X) * features(Y), axis=1)
        exact = np.exp(-np.sum((X - Y) ** 2, axis=1) / 2.0)
        assert np.max(np.abs(approx - exact)) < 0.05

    def test_seeded(self, rng):
        X = rng.standard_normal((4, 2))
        np.testing.assert_array_equal(rff_features(2, 10, 1.0, seed=1)(X), rff_features(2, 10, 1.0, seed=1)(X))
