import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from loguru import logger
from scipy import linalg as sla

from imgp.constants import DENSE_LOGDET_THRESHOLD
from imgp.errors import AllRestartsFailed, NotPositiveDefinite, NumericalError
from imgp.models import HyperParams, LogdetMethod, PrecisionMode, PriorSpec, TrainConfig
from imgp.domain.precision import PrecisionOp
from imgp.domain.predict import FeatureGP, spectral_weight_grads, spectral_weights
from imgp.domain.priors import grad_log_prior, log_prior, sample_initial
from imgp.services.graph import build_graph, build_knn_index
from imgp.services.kernel import norm_const, norm_const_log_grad
from imgp.services.linalg import (
    SymmetricOperator,
    as_operator,
    assemble_dense,
    hutchinson_probe,
    largest_eigenvalue,
    slq_logdet,
)
from imgp.services.optim import Adam
from imgp.services.utils import make_rng
from imgp.settings import worker_count

SLQ_PROBES = 10
SLQ_STEPS = 50
TAYLOR_SAFETY = 0.5


# ============================================================
# Likelihood
# ============================================================
def _operator_of(prec):
    return prec.as_operator() if isinstance(prec, PrecisionOp) else as_operator(prec)


def log_likelihood(prec, y, method=LogdetMethod.auto, seed=0):
    """
    L(theta) = log det Q - y^T Q y for the labeled-block precision Q.
    The log determinant comes from a Cholesky factor of Q assembled column
    by column, or from stochastic Lanczos quadrature above DENSE_LOGDET_THRESHOLD.
    """
    op = _operator_of(prec)
    dim = op.shape[0]
    y = np.asarray(y, dtype=np.float64)
    method = LogdetMethod(method)
    if method == LogdetMethod.auto:
        method = LogdetMethod.dense if dim <= DENSE_LOGDET_THRESHOLD else LogdetMethod.slq

    if method == LogdetMethod.dense:
        dense = assemble_dense(op)
        dense = 0.5 * (dense + dense.T)
        try:
            factor = sla.cholesky(dense, lower=True)
        except sla.LinAlgError as error:
            raise NotPositiveDefinite(f"precision is not positive definite: {error}") from error
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
    else:
        logdet = slq_logdet(op, probes=SLQ_PROBES, steps=min(dim, SLQ_STEPS), seed=seed)
    return logdet - float(y @ op.matvec(y))


def grad_log_likelihood(prec, y, probes=1, seed=0, exhaustive=False):
    """
    Gradient of L over the log-parameters: the trace term tr(Q^-1 dQ) by
    Hutchinson probes z (each needing one CG solve t = Q^-1 z and the
    quadratic form t^T dQ z), minus the exact data term y^T dQ y. With
    `exhaustive` the probes are all standard basis vectors and the trace is exact.
    """
    dim = prec.dim
    y = np.asarray(y, dtype=np.float64)
    if exhaustive:
        probe_vectors = np.eye(dim)
        weight = 1.0
    else:
        probe_vectors = np.stack([hutchinson_probe(dim, make_rng(seed, k).integers(2**31)) for k in range(probes)])
        weight = 1.0 / probes

    trace = {}
    for z in probe_vectors:
        t = prec.solve(z)
        for name, value in prec.quadform_grad(t, z).items():
            trace[name] = trace.get(name, 0.0) + weight * value
    data = prec.quadform_grad(y, y)
    return {name: trace[name] - data[name] for name in data}


# ============================================================
# MAP fit
# ============================================================
@dataclass
class Trajectory:
    restart: int
    init: dict
    trace: list = field(default_factory=list)
    params: HyperParams | None = None
    objective: float = -math.inf
    failed: bool = False
    error: str | None = None
    warnings: list = field(default_factory=list)


@dataclass
class FitResult:
    params: HyperParams
    trace: list
    trajectories: list
    priors: PriorSpec
    norm_const: float = 1.0
    mode: PrecisionMode = PrecisionMode.supervised_noiseless
    warnings: list = field(default_factory=list)

    @property
    def objective(self):
        return max(t.objective for t in self.trajectories if not t.failed)


class MapProblem:
    """Everything that stays fixed while the hyperparameters move."""

    def __init__(self, index, labeled_idx, y, config, priors, fixed):
        self.index = index
        self.labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
        self.y = np.asarray(y, dtype=np.float64)
        self.config = config
        self.priors = priors
        self.nu = int(fixed["nu"])
        self.K = int(fixed["K"])
        self.L = int(fixed["L"])
        self.noisy = config.learn_noise
        if self.noisy:
            self.mode = PrecisionMode.noisy
        elif self.labeled_idx.size == index.N:
            self.mode = PrecisionMode.supervised_noiseless
        else:
            self.mode = PrecisionMode.semi_supervised_noiseless

    def params(self, log_params):
        return HyperParams.from_log(log_params, self.nu, self.K, self.L)

    def precision(self, params, with_norm_grad=False):
        graph = build_graph(self.index, params.alpha)
        norm, dlog_norm = 1.0, None
        if self.config.normalize:
            estimate = norm_const(
                graph, params, M=self.config.norm_probes, seed=self.config.seed, tol=self.config.cg_tol
            )
            norm = estimate.value
            if with_norm_grad:
                dlog_norm = norm_const_log_grad(graph, params, estimate)
        return PrecisionOp(
            graph,
            params,
            self.labeled_idx,
            self.mode,
            norm_const=norm,
            dlog_norm=dlog_norm,
            cg_tol=self.config.cg_tol,
            cg_max_iters=self.config.cg_max_iters,
        )

    def objective(self, params, seed=0):
        """1/2 L(theta) + log p(theta)."""
        prec = self.precision(params)
        return 0.5 * log_likelihood(prec, self.y, self.config.logdet, seed) + log_prior(params, self.priors)

    def gradient(self, params, seed):
        prec = self.precision(params, with_norm_grad=True)
        grads = grad_log_likelihood(
            prec,
            self.y,
            probes=self.config.probes_per_step,
            seed=seed,
            exhaustive=self.config.exhaustive_probes,
        )
        prior = grad_log_prior(params, self.priors)
        out = {name: 0.5 * grads[name] + prior[name] for name in grads}
        if not self.noisy:
            out.pop("noise2", None)
        return out, prec

    def taylor_margin(self, prec):
        """noise2 * lambda_max(S); the two-term expansion is positive definite below 1."""
        base = SymmetricOperator(prec.base_matvec, prec.dim)
        return prec.noise2 * largest_eigenvalue(base, steps=min(prec.dim, 30), seed=self.config.seed)


def _run_trajectory(problem, restart):
    config = problem.config
    rng = make_rng(config.seed, restart)
    init = sample_initial(problem.priors, rng, learn_noise=problem.noisy)
    trajectory = Trajectory(restart=restart, init=dict(init))
    log_params = {name: math.log(value) for name, value in init.items() if value > 0}
    optimizer = Adam(lr=config.learning_rate)

    try:
        if problem.noisy:
            params = problem.params(log_params)
            margin = problem.taylor_margin(problem.precision(params))
            if margin >= 1.0:
                clipped = TAYLOR_SAFETY * params.noise2 / margin
                message = (
                    f"restart {restart}: initial noise2={params.noise2:.3g} breaks the two-term "
                    f"noise expansion; clipped to {clipped:.3g}"
                )
                logger.warning(message)
                trajectory.warnings.append(message)
                log_params["noise2"] = math.log(clipped)

        for iteration in range(config.iters):
            params = problem.params(log_params)
            step_seed = make_rng(config.seed, restart, iteration).integers(2**31)
            grads, prec = problem.gradient(params, step_seed)

            if problem.noisy and iteration % config.spectral_check_every == 0:
                margin = problem.taylor_margin(prec)
                if margin >= 1.0:
                    message = (
                        f"restart {restart}, iteration {iteration}: noise2 * lambda_max = "
                        f"{margin:.3g}, noise expansion is not positive definite"
                    )
                    logger.warning(message)
                    trajectory.warnings.append(message)

            value = problem.objective(params, step_seed)
            trajectory.trace.append(value)
            logger.debug("restart {} iteration {}: objective {:.6g}", restart, iteration, value)
            log_params = optimizer.step(log_params, grads)

        trajectory.params = problem.params(log_params)
        trajectory.objective = problem.objective(trajectory.params, config.seed)
        trajectory.trace.append(trajectory.objective)
        if not np.isfinite(trajectory.objective):
            raise NotPositiveDefinite("objective is not finite at the final iterate")
    except NumericalError as error:
        trajectory.failed = True
        trajectory.error = f"{type(error).__name__}: {error}"
        logger.warning("restart {} failed: {}", restart, trajectory.error)
        return trajectory

    logger.info(
        "restart {} finished: objective {:.6g}, {}",
        restart,
        trajectory.objective,
        trajectory.params.to_dict(),
    )
    return trajectory


def fit_map(cloud, config, priors, fixed, index=None, labeled_idx=None, y=None):
    """
    MAP estimate of (alpha, kappa, sigma2, noise2) by restarted Adam in
    log-parameter space. The graph is built over every point of `cloud`;
    conditioning is on cloud.labeled_idx unless given explicitly.
    """
    if index is None:
        index = build_knn_index(cloud, fixed["K"])
    labeled_idx = cloud.labeled_idx if labeled_idx is None else labeled_idx
    y = cloud.labels if y is None else y
    problem = MapProblem(index, labeled_idx, y, config, priors, fixed)
    logger.info(
        "Fitting {} model: N={}, n={}, restarts={}, iters={}",
        problem.mode,
        index.N,
        len(labeled_idx),
        config.restarts,
        config.iters,
    )

    restarts = range(config.restarts)
    threads = worker_count(config.restarts)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trajectories = list(pool.map(lambda r: _run_trajectory(problem, r), restarts))
    else:
        trajectories = [_run_trajectory(problem, r) for r in restarts]

    succeeded = [t for t in trajectories if not t.failed]
    if not succeeded:
        raise AllRestartsFailed(
            "every restart broke down: " + "; ".join(t.error for t in trajectories)
        )
    best = max(succeeded, key=lambda t: t.objective)

    norm = 1.0
    if config.normalize:
        graph = build_graph(index, best.params.alpha)
        norm = norm_const(graph, best.params, M=config.norm_probes, seed=config.seed).value
    warnings = [w for t in trajectories for w in t.warnings]
    warnings += [f"restart {t.restart} failed: {t.error}" for t in trajectories if t.failed]
    return FitResult(
        params=best.params,
        trace=best.trace,
        trajectories=trajectories,
        priors=priors,
        norm_const=norm,
        mode=problem.mode,
        warnings=warnings,
    )


# ============================================================
# Truncated re-optimization
# ============================================================
def truncated_log_marginal(basis, labeled_idx, y, params, norm_const=1.0, learn_noise=True):
    features = basis.eigenvectors[labeled_idx]
    model = FeatureGP(features, spectral_weights(basis, params, norm_const), params.noise2, y)
    return model.log_marginal(
        dweights=spectral_weight_grads(basis, params, norm_const),
        noise_grad=learn_noise and params.noise2 > 0,
    )


def reoptimize_truncated(basis, y, init, labeled_idx, config=None, norm_const=1.0):
    """
    With alpha frozen and the eigenpairs fixed, maximize the exact likelihood
    of the finite-rank model over (kappa, sigma2, noise2). A zero initial
    noise stays at zero. The best iterate seen is returned.
    """
    config = config or TrainConfig()
    learn_noise = init.noise2 > 0
    log_params = {"kappa": math.log(init.kappa), "sigma2": math.log(init.sigma2)}
    if learn_noise:
        log_params["noise2"] = math.log(init.noise2)

    def at(log_params):
        return init.replace(
            kappa=math.exp(log_params["kappa"]),
            sigma2=math.exp(log_params["sigma2"]),
            noise2=math.exp(log_params["noise2"]) if learn_noise else 0.0,
        )

    optimizer = Adam(lr=config.reoptimize_learning_rate)
    best_params = init
    best_value = truncated_log_marginal(basis, labeled_idx, y, init, norm_const, learn_noise).value
    start_value = best_value
    for _ in range(config.reoptimize_iters):
        params = at(log_params)
        result = truncated_log_marginal(basis, labeled_idx, y, params, norm_const, learn_noise)
        if result.value > best_value:
            best_value, best_params = result.value, params
        log_params = optimizer.step(log_params, result.grads)

    final = at(log_params)
    final_value = truncated_log_marginal(basis, labeled_idx, y, final, norm_const, learn_noise).value
    if final_value > best_value:
        best_value, best_params = final_value, final
    logger.info(
        "Re-optimized truncated model: log marginal {:.6g} -> {:.6g}, kappa={:.4g}, sigma2={:.4g}, noise2={:.3g}",
        start_value,
        best_value,
        best_params.kappa,
        best_params.sigma2,
        best_params.noise2,
    )
    return best_params


# ============================================================
# Checkpoint
# ============================================================
@dataclass
class Checkpoint:
    params: HyperParams
    priors: PriorSpec
    trace: list
    norm_const: float = 1.0
    restarts: list = field(default_factory=list)


def save_checkpoint(path, fit, params=None):
    """Write the fitted hyperparameters, prior diagnostics and loss trace as JSON."""
    params = params or fit.params
    document = {
        "params": {name: getattr(params, name) for name in ("alpha", "kappa", "sigma2", "noise2")},
        "fixed": {"nu": params.nu, "K": params.K, "L": params.L},
        "prior": fit.priors.to_dict(),
        "norm_const": fit.norm_const,
        "mode": str(fit.mode),
        "trace": [float(v) for v in fit.trace],
        "restarts": [
            {"restart": t.restart, "objective": t.objective if not t.failed else None, "error": t.error}
            for t in fit.trajectories
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    document = json.loads(Path(path).read_text())
    params = HyperParams(**document["params"], **document["fixed"])
    return Checkpoint(
        params=params,
        priors=PriorSpec(**document["prior"]),
        trace=document["trace"],
        norm_const=document.get("norm_const", 1.0),
        restarts=document.get("restarts", []),
    )
