from typing import NamedTuple

import numpy as np
from loguru import logger
from scipy import linalg as sla
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, aslinearoperator, eigsh

from imgp.constants import CG_MAX_ITERS_FACTOR, CG_TOL, LANCZOS_OVERSAMPLING, LANCZOS_TOL
from imgp.errors import (
    BreakdownDetected,
    ConvergenceFailure,
    MaxItersExceeded,
    NotPositiveDefinite,
)
from imgp.models import EigenBasis
from imgp.services.utils import make_rng


class SymmetricOperator(LinearOperator):
    """
    Matrix-free operator built from a matvec callable. Symmetric operators
    serve their own transpose.
    """

    def __init__(self, matvec, dim, is_symmetric=True, rmatvec=None):
        self._apply = matvec
        self._apply_t = rmatvec
        self.is_symmetric = is_symmetric
        super().__init__(dtype=np.float64, shape=(dim, dim))

    @property
    def dim(self):
        return self.shape[0]

    def _matvec(self, v):
        return np.asarray(self._apply(np.ravel(v)), dtype=np.float64)

    def _rmatvec(self, v):
        if self.is_symmetric:
            return self._matvec(v)
        if self._apply_t is None:
            raise NotImplementedError("transpose of a nonsymmetric operator")
        return np.asarray(self._apply_t(np.ravel(v)), dtype=np.float64)


def as_operator(op):
    if isinstance(op, LinearOperator):
        return op
    if isinstance(op, np.ndarray) or sparse.issparse(op):
        return aslinearoperator(op)
    raise TypeError(f"cannot use {type(op).__name__} as a linear operator")


def assemble_dense(op):
    """Dense matrix of an operator, column by column."""
    op = as_operator(op)
    return np.asarray(op.matmat(np.eye(op.shape[1])))


# ============================================================
# Conjugate gradients
# ============================================================
class CgResult(NamedTuple):
    solution: np.ndarray
    iterations: int
    converged: bool


def conjugate_gradients(op, rhs, tol=CG_TOL, max_iters=None, strict=True, x0=None, callback=None):
    """
    Solve op(x) = rhs for a symmetric positive definite operator.

    Stops once ||op(x) - rhs|| <= tol * ||rhs||. In strict mode an exhausted
    budget raises MaxItersExceeded carrying the best iterate; otherwise a
    warning is logged and the best iterate is returned unconverged.
    `callback(x)` is called after every iteration.
    """
    op = as_operator(op)
    rhs = np.asarray(rhs, dtype=np.float64).reshape(-1)
    dim = rhs.shape[0]
    max_iters = CG_MAX_ITERS_FACTOR * dim if max_iters is None else int(max_iters)

    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return CgResult(np.zeros(dim), 0, True)
    threshold = tol * rhs_norm

    x = np.zeros(dim) if x0 is None else np.array(x0, dtype=np.float64)
    r = rhs - op.matvec(x) if x0 is not None else rhs.copy()
    p = r.copy()
    rs = r @ r
    best, best_norm = x.copy(), np.sqrt(rs)
    if best_norm <= threshold:
        return CgResult(x, 0, True)

    for iteration in range(1, max_iters + 1):
        ap = op.matvec(p)
        curvature = p @ ap
        if not curvature > 0:
            raise BreakdownDetected(
                f"conjugate gradients hit p'Ap={curvature:.3g} at iteration {iteration}; "
                "operator is not positive definite"
            )
        step = rs / curvature
        x += step * p
        r -= step * ap
        rs_new = r @ r
        residual = np.sqrt(rs_new)
        if callback is not None:
            callback(x)
        if residual < best_norm:
            best, best_norm = x.copy(), residual
        if residual <= threshold:
            return CgResult(x, iteration, True)
        p = r + (rs_new / rs) * p
        rs = rs_new

    message = (
        f"conjugate gradients did not reach tol={tol:g} in {max_iters} iterations "
        f"(relative residual {best_norm / rhs_norm:.3g})"
    )
    if strict:
        raise MaxItersExceeded(message, solution=best, iterations=max_iters)
    logger.warning(message)
    return CgResult(best, max_iters, False)


# ============================================================
# Eigenproblems
# ============================================================
def _fix_signs(vectors):
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def dense_smallest(op, L):
    """Reference path: the L smallest eigenpairs from a dense symmetric solve."""
    matrix = op.toarray() if sparse.issparse(op) else assemble_dense(op)
    matrix = 0.5 * (matrix + matrix.T)
    dim = matrix.shape[0]
    L = min(int(L), dim)
    values, vectors = sla.eigh(matrix, subset_by_index=[0, L - 1])
    return EigenBasis(
        eigenvalues=values, eigenvectors=_fix_signs(vectors), inner_weights=np.ones(dim)
    )


def lanczos_smallest(op, L, seed=0, oversampling=LANCZOS_OVERSAMPLING, tol=LANCZOS_TOL, shift=1.0):
    """
    The L smallest eigenpairs of a symmetric operator by implicitly restarted
    Lanczos with a Krylov subspace of size min(dim, oversampling * L); the
    surplus Ritz pairs are discarded. Eigenvectors are Euclidean-orthonormal.

    Iterates on op + shift * I: the convergence test is relative to the Ritz
    value, which must stay away from zero for positive semidefinite operators.
    """
    op = as_operator(op)
    dim = op.shape[0]
    L = int(L)
    if L >= dim - 1:
        # ARPACK needs k < dim - 1
        return dense_smallest(op, L)

    ncv = min(dim, max(oversampling * L, L + 2))
    v0 = make_rng(seed).standard_normal(dim)
    try:
        shifted = SymmetricOperator(lambda v: op.matvec(v) + shift * v, dim)
        values, vectors = eigsh(shifted, k=L, which="SA", ncv=ncv, v0=v0, tol=tol)
        values = values - shift
    except ArpackNoConvergence as error:
        raise ConvergenceFailure(
            f"Lanczos found {len(error.eigenvalues)} of {L} eigenpairs with ncv={ncv}"
        ) from error
    order = np.argsort(values, kind="stable")
    return EigenBasis(
        eigenvalues=values[order],
        eigenvectors=_fix_signs(vectors[:, order]),
        inner_weights=np.ones(dim),
    )


class Tridiagonal(NamedTuple):
    diagonal: np.ndarray
    offdiagonal: np.ndarray
    basis: np.ndarray


def lanczos_tridiagonal(op, start, steps):
    """
    Lanczos recurrence with full reorthogonalization from `start`. Stops
    early on an invariant subspace.
    """
    op = as_operator(op)
    dim = op.shape[0]
    steps = min(int(steps), dim)
    basis = np.zeros((dim, steps))
    diagonal = np.zeros(steps)
    offdiagonal = np.zeros(max(steps - 1, 0))

    q = np.asarray(start, dtype=np.float64) / np.linalg.norm(start)
    for k in range(steps):
        basis[:, k] = q
        w = op.matvec(q)
        diagonal[k] = q @ w
        w -= basis[:, : k + 1] @ (basis[:, : k + 1].T @ w)
        w -= basis[:, : k + 1] @ (basis[:, : k + 1].T @ w)
        if k == steps - 1:
            break
        beta = np.linalg.norm(w)
        if beta <= 1e-12 * max(1.0, abs(diagonal[k])):
            return Tridiagonal(diagonal[: k + 1], offdiagonal[:k], basis[:, : k + 1])
        offdiagonal[k] = beta
        q = w / beta
    return Tridiagonal(diagonal, offdiagonal, basis)


def _ritz(tridiagonal):
    if tridiagonal.diagonal.size == 1:
        return tridiagonal.diagonal.copy(), np.ones((1, 1))
    return sla.eigh_tridiagonal(tridiagonal.diagonal, tridiagonal.offdiagonal)


def largest_eigenvalue(op, steps=30, seed=0):
    """Largest Ritz value of a short Lanczos run; a lower bound that is tight in practice."""
    op = as_operator(op)
    start = make_rng(seed).standard_normal(op.shape[0])
    values, _ = _ritz(lanczos_tridiagonal(op, start, steps))
    return float(values[-1])


def slq_logdet(op, probes=10, steps=30, seed=0):
    """
    Stochastic Lanczos quadrature estimate of log det for an SPD operator:
    mean over Rademacher probes z of |z|^2 sum_k tau_k^2 log theta_k.
    """
    op = as_operator(op)
    dim = op.shape[0]
    estimates = np.zeros(probes)
    for probe in range(probes):
        z = hutchinson_probe(dim, make_rng(seed, probe).integers(2**31))
        values, vectors = _ritz(lanczos_tridiagonal(op, z, steps))
        if values[0] <= 0:
            raise NotPositiveDefinite(f"nonpositive Ritz value {values[0]:.3g} in log det")
        estimates[probe] = dim * np.sum(vectors[0] ** 2 * np.log(values))
    logger.debug(
        "SLQ log det: {:.6g} +- {:.3g} ({} probes)",
        estimates.mean(),
        estimates.std(ddof=1) / np.sqrt(probes) if probes > 1 else np.nan,
        probes,
    )
    return float(estimates.mean())


# ============================================================
# Probes and gradient checks
# ============================================================
def hutchinson_probe(dim, seed):
    """Rademacher vector in {-1, +1}^dim, reproducible per (dim, seed)."""
    return make_rng(seed).integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0


def finite_diff_gradient(f, theta, h=1e-5):
    theta = np.asarray(theta, dtype=np.float64)
    gradient = np.zeros_like(theta)
    for i in range(theta.shape[0]):
        step = np.zeros_like(theta)
        step[i] = h
        gradient[i] = (f(theta + step) - f(theta - step)) / (2.0 * h)
    return gradient
