"""Exact Gaussian-process regression baseline.

One independent GP per output dimension on inputs ``[x0, t]`` (the
trajectory's initial condition augmented with time), ARD-RBF kernel,
hyperparameters fit by multi-start gradient ascent on the log marginal
likelihood.  Not meta-learned: this is the reference surrogate the learned
models are compared against, and a drop-in surrogate for the optimization
loop via :class:`GPAdapter`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import Node
from .errors import FitError
from .models import PredictiveSamples

logger = logging.getLogger(__name__)

Array = np.ndarray

NOISE_FLOOR = 1e-6
JITTER_START = 1e-10
JITTER_MAX = 1e-3


@dataclass
class GPModel:
    x_train: Array          # (n, D)
    y_train: Array          # (n, d_out)
    lengthscales: Array     # (d_out, D)
    signal_variance: Array  # (d_out,)
    noise_variance: Array   # (d_out,)
    alphas: Array           # (d_out, n) -- (K + noise I)^{-1} y per output
    k_inverses: Array       # (d_out, n, n)
    log_marginal: Array     # (d_out,)

    @property
    def n_outputs(self) -> int:
        return self.y_train.shape[1]


def _kernel(x1: Array, x2: Array, ell: Array, s2: float) -> Array:
    d2 = ((x1[:, None, :] - x2[None, :, :]) / ell) ** 2
    return s2 * np.exp(-0.5 * d2.sum(axis=-1))


def _chol_with_jitter(k: Array):
    jitter = 0.0
    while True:
        try:
            return cho_factor(k + jitter * np.eye(len(k)), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 2.0
            if jitter > JITTER_MAX:
                raise FitError("kernel matrix not positive definite at maximum jitter")


def _lml_and_grad(theta: Array, x: Array, y: Array):
    """Negative log marginal likelihood and gradient in log-parameters
    theta = [log ell_1..D, log s2, log noise]."""
    n, D = x.shape
    ell = np.exp(theta[:D])
    s2 = np.exp(theta[D])
    noise = np.exp(theta[D + 1]) + NOISE_FLOOR
    k = _kernel(x, x, ell, s2)
    ky = k + noise * np.eye(n)
    try:
        (c, lower), _ = _chol_with_jitter(ky)
    except FitError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((c, lower), y)
    lml = (-0.5 * float(y @ alpha) - np.log(np.diag(c)).sum() - 0.5 * n * np.log(2 * np.pi))
    k_inv = cho_solve((c, lower), np.eye(n))
    outer = np.outer(alpha, alpha) - k_inv
    diff2 = (x[:, None, :] - x[None, :, :]) ** 2
    grad = np.empty_like(theta)
    for d in range(D):
        dk = k * diff2[:, :, d] / ell[d] ** 2  # d/d(log ell_d)
        grad[d] = 0.5 * float(np.sum(outer * dk))
    grad[D] = 0.5 * float(np.sum(outer * k))  # d/d(log s2): dK = K
    grad[D + 1] = 0.5 * float(np.trace(outer)) * (noise - NOISE_FLOOR)
    return -lml, -grad


def gp_fit(x: Array, y: Array, init_hyperparams: dict | None = None,
           n_restarts: int = 5, seed: int = 0) -> GPModel:
    """Fit one GP per output dimension.

    Hyperparameters are optimized by L-BFGS on the log marginal likelihood in
    log-space, from ``n_restarts`` starts (the provided/default init plus
    random perturbations); the best restart per output wins.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n, D = x.shape
    if n < 1:
        raise ValueError("at least one training point is required")
    d_out = y.shape[1]
    rng = ad.make_rng(seed)

    span = np.maximum(x.max(axis=0) - x.min(axis=0), 1e-2)
    init = init_hyperparams or {}
    ell0 = np.asarray(init.get("lengthscales", span / 2.0), dtype=float)
    s20 = float(init.get("signal_variance", max(float(y.var()), 1e-2)))
    noise0 = float(init.get("noise_variance", 1e-4))

    ells = np.empty((d_out, D))
    s2s = np.empty(d_out)
    noises = np.empty(d_out)
    alphas = np.empty((d_out, n))
    kinvs = np.empty((d_out, n, n))
    lmls = np.empty(d_out)
    for d in range(d_out):
        theta0 = np.concatenate([np.log(ell0), [np.log(s20), np.log(noise0)]])
        best = None
        bounds = [(-10.0, 10.0)] * (D + 2)
        for r in range(n_restarts):
            start = theta0 if r == 0 else theta0 + rng.normal(scale=1.0, size=len(theta0))
            start = np.clip(start, -9.5, 9.5)
            res = minimize(_lml_and_grad, start, args=(x, y[:, d]), jac=True,
                           method="L-BFGS-B", bounds=bounds, options={"maxiter": 200})
            if best is None or res.fun < best.fun:
                best = res
        base_nll, _ = _lml_and_grad(theta0, x, y[:, d])
        if best.fun > base_nll:  # ascent property: never worse than the init
            best_theta = theta0
            best_nll = base_nll
        else:
            best_theta, best_nll = best.x, best.fun
        ell = np.exp(best_theta[:D])
        s2 = float(np.exp(best_theta[D]))
        noise = float(np.exp(best_theta[D + 1])) + NOISE_FLOOR
        ky = _kernel(x, x, ell, s2) + noise * np.eye(n)
        (c, lower), jitter = _chol_with_jitter(ky)
        if jitter:
            logger.debug("output %d required jitter %.2e", d, jitter)
        ells[d] = ell
        s2s[d] = s2
        noises[d] = noise
        alphas[d] = cho_solve((c, lower), y[:, d])
        kinvs[d] = cho_solve((c, lower), np.eye(n))
        lmls[d] = -best_nll
    return GPModel(x, y, ells, s2s, noises, alphas, kinvs, lmls)


def gp_posterior(model: GPModel, x_query: Array) -> tuple[Array, Array]:
    """Exact posterior mean and variance at query rows (variances clamped at
    zero after rounding)."""
    xq = np.atleast_2d(np.asarray(x_query, dtype=float))
    if xq.shape[1] != model.x_train.shape[1]:
        raise ValueError("query width must match training input width")
    m = xq.shape[0]
    means = np.empty((m, model.n_outputs))
    variances = np.empty((m, model.n_outputs))
    for d in range(model.n_outputs):
        ks = _kernel(xq, model.x_train, model.lengthscales[d], model.signal_variance[d])
        means[:, d] = ks @ model.alphas[d]
        quad = np.einsum("ij,jk,ik->i", ks, model.k_inverses[d], ks)
        variances[:, d] = np.maximum(model.signal_variance[d] - quad, 0.0)
    return means, variances


def log_marginal_likelihood(model: GPModel) -> float:
    return float(model.log_marginal.sum())


def gp_predict(model: GPModel, x0: Array, target_times: Array) -> PredictiveSamples:
    """Shared-surrogate predict: the exact Gaussian posterior at [x0, t] per
    target time, represented as a single mixture component."""
    times = np.atleast_1d(np.asarray(target_times, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    xq = np.concatenate([np.broadcast_to(x0, (len(times), len(x0))), times[:, None]], axis=1)
    means, variances = gp_posterior(model, xq)
    stds = np.sqrt(np.maximum(variances, 1e-18))
    return PredictiveSamples(times, means[None], stds[None],
                             u_samples=np.zeros((1, 0)))


def trajectories_to_training_rows(known, new_times=None, new_states=None):
    """Stack observed trajectories into GP rows: input [x0, t], target x(t)."""
    xs, ys = [], []
    for x0, ts, states in known:
        xs.append(np.concatenate([np.broadcast_to(x0, states.shape), ts[:, None]], axis=1))
        ys.append(states)
    if new_times is not None and len(new_times):
        x0 = new_states[0]
        xs.append(np.concatenate([np.broadcast_to(x0, new_states.shape),
                                  np.asarray(new_times, float)[:, None]], axis=1))
        ys.append(new_states)
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


# ---------------------------------------------------------------------------
# acquisition adapter
# ---------------------------------------------------------------------------

@dataclass
class GPAdapter:
    """Differentiable marginal-posterior sampling for acquisition search.

    Per query (x0, t) each MC replicate takes ``mean + std * z`` with z fixed
    per optimization run and indexed by time slot, so appending a time never
    perturbs the replicate values at existing times.  Marginals ignore the
    within-trajectory posterior correlation (noted trade-off; the learned
    models capture it through their shared latent draws).
    """

    model: GPModel
    max_times: int = 16

    def draw_noise(self, n_mc: int, rng: np.random.Generator) -> dict[str, Array]:
        return {"z": rng.standard_normal((n_mc, self.max_times, self.model.n_outputs))}

    def mean_paths(self, x0, times, noise: dict[str, Array]) -> list[Node]:
        if len(times) > self.max_times:
            raise ValueError("more query times than drawn noise slots")
        x0_node = ad.as_node(x0)
        z = noise["z"]
        n_mc = z.shape[0]
        out = []
        for slot, t in enumerate(times):
            t_part = (ad.reshape(t, (1,)) if isinstance(t, Node)
                      else np.array([float(t)]))
            xq = ad.concat_cols([x0_node, t_part])  # (D,)
            mean_cols, std_cols = [], []
            for d in range(self.model.n_outputs):
                inv_two_ell2 = 0.5 / self.model.lengthscales[d] ** 2
                diff2 = ad.square(ad.sub(xq, self.model.x_train))  # (n, D)
                expo = ad.matmul(diff2, inv_two_ell2)  # (n,)
                ks = ad.scale(float(self.model.signal_variance[d]), ad.exp(ad.neg(expo)))
                mean_d = ad.matmul(ks, self.model.alphas[d].reshape(-1, 1))  # (1,)
                v = ad.matmul(self.model.k_inverses[d], ks)
                quad = ad.sum_all(ad.mul(ks, v))
                var = ad.maximum(ad.sub(float(self.model.signal_variance[d]), quad), 1e-14)
                std_d = ad.sqrt(var)
                mean_cols.append(mean_d)
                std_cols.append(ad.reshape(std_d, (1,)))
            mean_row = ad.reshape(ad.concat_cols(mean_cols), (1, self.model.n_outputs))
            std_row = ad.reshape(ad.concat_cols(std_cols), (1, self.model.n_outputs))
            samples = ad.add(ad.broadcast_to(mean_row, (n_mc, self.model.n_outputs)),
                             ad.mul(ad.broadcast_to(std_row, (n_mc, self.model.n_outputs)),
                                    z[:, slot, :]))
            out.append(samples)
        return out
