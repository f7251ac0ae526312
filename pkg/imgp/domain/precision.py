import numpy as np

from imgp.constants import CG_TOL
from imgp.models import PrecisionMode
from imgp.services.kernel import precision_matvec, precision_quadform_grad
from imgp.services.linalg import SymmetricOperator, conjugate_gradients


class PrecisionOp:
    """
    Precision of the graph Matern GP restricted to the labeled nodes Z.

    supervised_noiseless: the graph holds only labeled nodes and the
    precision is P itself. semi_supervised_noiseless: the Schur complement
    P_ZZ = P_aa - P_ab P_bb^-1 P_ba of the full-graph precision, evaluated
    through index masks and an inner CG solve on P_bb. noisy: the two-term
    Taylor expansion S - noise2 * S^2 of (S^-1 + noise2 I)^-1, where S is
    whichever of the two above applies.
    """

    def __init__(
        self,
        graph,
        params,
        labeled_idx=None,
        mode=PrecisionMode.supervised_noiseless,
        norm_const=1.0,
        dlog_norm=None,
        cg_tol=CG_TOL,
        cg_max_iters=None,
    ):
        self.graph = graph
        self.params = params
        self.mode = PrecisionMode(mode)
        self.norm_const = norm_const
        self.dlog_norm = dlog_norm
        self.cg_tol = cg_tol
        self.cg_max_iters = cg_max_iters

        n_nodes = graph.N
        labeled_idx = np.arange(n_nodes) if labeled_idx is None else np.asarray(labeled_idx)
        self.labeled_idx = labeled_idx
        mask = np.zeros(n_nodes, dtype=bool)
        mask[labeled_idx] = True
        self.complement_idx = np.flatnonzero(~mask)
        self.schur = self.complement_idx.size > 0
        self.noise2 = params.noise2 if self.mode == PrecisionMode.noisy else 0.0
        # inner solves sit well below the outer tolerance
        self._inner_tol = min(1e-2 * cg_tol, 1e-10)

    @property
    def dim(self):
        return self.labeled_idx.shape[0]

    def full_matvec(self, v):
        return precision_matvec(self.graph, self.params, v, self.norm_const)

    # ------------------------------------------------------------------
    # Schur complement plumbing
    # ------------------------------------------------------------------
    def _embed(self, values, idx):
        out = np.zeros(self.graph.N)
        out[idx] = values
        return out

    def _complement_solve(self, rhs):
        """P_bb^-1 rhs on the unlabeled block."""
        idx = self.complement_idx
        block = SymmetricOperator(lambda v: self.full_matvec(self._embed(v, idx))[idx], idx.size)
        return conjugate_gradients(
            block, rhs, tol=self._inner_tol, max_iters=self.cg_max_iters
        ).solution

    def harmonic_extension(self, v):
        """W v = (v, -P_bb^-1 P_ba v): the conditional mean of the unlabeled block."""
        full = self._embed(v, self.labeled_idx)
        if not self.schur:
            return full
        cross = self.full_matvec(full)[self.complement_idx]
        full[self.complement_idx] = -self._complement_solve(cross)
        return full

    # ------------------------------------------------------------------
    # Operator
    # ------------------------------------------------------------------
    def base_matvec(self, v):
        """S v, the noiseless labeled-block precision."""
        v = np.asarray(v, dtype=np.float64)
        if not self.schur:
            return self.full_matvec(self._embed(v, self.labeled_idx))[self.labeled_idx]
        return self.full_matvec(self.harmonic_extension(v))[self.labeled_idx]

    def matvec(self, v):
        s_v = self.base_matvec(v)
        if self.noise2 == 0.0:
            return s_v
        return s_v - self.noise2 * self.base_matvec(s_v)

    def as_operator(self):
        return SymmetricOperator(self.matvec, self.dim)

    def solve(self, rhs, strict=True):
        return conjugate_gradients(
            self.as_operator(), rhs, tol=self.cg_tol, max_iters=self.cg_max_iters, strict=strict
        ).solution

    # ------------------------------------------------------------------
    # Derivatives
    # ------------------------------------------------------------------
    def base_quadform_grad(self, a, b):
        """a^T (dS / d log theta) b; for the Schur complement dS = W^T dP W."""
        return precision_quadform_grad(
            self.graph,
            self.params,
            self.harmonic_extension(a),
            self.harmonic_extension(b),
            self.norm_const,
            self.dlog_norm,
        )

    def quadform_grad(self, a, b):
        """a^T (dQ / d log theta) b over (alpha, kappa, sigma2, noise2)."""
        if self.noise2 == 0.0:
            grads = self.base_quadform_grad(a, b)
            grads["noise2"] = 0.0
            return grads

        s_a = self.base_matvec(a)
        s_b = self.base_matvec(b)
        plain = self.base_quadform_grad(a, b)
        left = self.base_quadform_grad(a, s_b)
        right = self.base_quadform_grad(s_a, b)
        grads = {
            name: plain[name] - self.noise2 * (left[name] + right[name]) for name in plain
        }
        grads["noise2"] = -self.noise2 * float(s_a @ s_b)
        return grads


def schur_precision_matvec(prec, v):
    return prec.base_matvec(v)


def noisy_precision_matvec(prec, v):
    """(S - noise2 * S^2) v = S (v - noise2 * S v)."""
    s_v = prec.base_matvec(v)
    return s_v - prec.params.noise2 * prec.base_matvec(s_v)
