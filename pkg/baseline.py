"""
baseline.py — Independent exact GP regression per output (IGPR)
================================================================
Each output is fitted on its own observed entries only, by maximizing the
exact log marginal likelihood log N(y | 0, K + sigma2 I) over
(variance, lengthscale, sigma2) in log space with Adam and seeded restarts.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from errors import DegenerateOutput, NotPositiveDefinite
from kernels import RbfKernel, rbf_diag, rbf_matrix
from numcore import BASE_JITTER, DTYPE, LOG_2PI, cholesky_jittered, tri_solve

log = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────
# CONFIGURATION
# ─────────────────────────────────────────────────────────────
RESTARTS = 5
ITERATIONS = 300
LEARNING_RATE = 0.05
LENGTHSCALE_RANGE = (0.01, 10.0)   # times the input range
VARIANCE_RANGE = (0.5, 2.0)        # times the output variance
NOISE_RANGE = (1e-3, 0.5)          # times the output variance


@dataclass(frozen=True)
class IgprOutput:
    kernel: RbfKernel
    noise: float
    log_ml: float
    initial_log_ml: tuple    # one per restart
    restart_best: tuple      # best value reached by each restart
    chol: object             # CholFactor of K + noise I at the optimum


@dataclass(frozen=True)
class IgprModel:
    outputs: tuple
    seed: int

    @property
    def D(self):
        return len(self.outputs)


def log_marginal_likelihood(X, y, log_params):
    variance, lengthscale, noise = torch.exp(log_params)
    K = rbf_matrix(X, X, RbfKernel(variance, lengthscale))
    chol = cholesky_jittered(K + noise * torch.eye(X.shape[0], dtype=DTYPE), BASE_JITTER)
    alpha = tri_solve(chol, y)
    n = y.shape[0]
    return -0.5 * (alpha @ alpha) - 0.5 * chol.log_det - 0.5 * n * LOG_2PI


def _observed(ds, d):
    rows = ds.mask[:, d]
    X = torch.as_tensor(ds.X[rows], dtype=DTYPE)
    y = torch.as_tensor(ds.Y[rows, d], dtype=DTYPE)
    return X, y


def _initial_point(X, y, rng):
    span = float((X.max(0).values - X.min(0).values).max()) or 1.0
    var_y = max(float(y.var()), 1e-12)
    lo_hi = [
        (VARIANCE_RANGE[0] * var_y, VARIANCE_RANGE[1] * var_y),
        (LENGTHSCALE_RANGE[0] * span, LENGTHSCALE_RANGE[1] * span),
        (NOISE_RANGE[0] * var_y, NOISE_RANGE[1] * var_y),
    ]
    u = rng.uniform(size=3)
    return torch.tensor([math.log(lo) + ui * (math.log(hi) - math.log(lo))
                         for ui, (lo, hi) in zip(u, lo_hi)], dtype=DTYPE)


def _ascend(X, y, start, iterations, lr):
    """Adam on the log marginal likelihood; returns (best params, best value, initial value)."""
    params = start.clone().requires_grad_(True)
    opt = torch.optim.Adam([params], lr=lr)
    best_params, best_value, initial = start.clone(), -math.inf, None
    for _ in range(iterations + 1):
        opt.zero_grad()
        try:
            value = log_marginal_likelihood(X, y, params)
        except NotPositiveDefinite:
            break
        v = float(value.detach())
        if initial is None:
            initial = v
        if not math.isfinite(v):
            break
        if v > best_value:
            best_value, best_params = v, params.detach().clone()
        (-value).backward()
        opt.step()
    return best_params, best_value, initial


def fit_output(X, y, restarts, rng, iterations=ITERATIONS, lr=LEARNING_RATE):
    results = [_ascend(X, y, _initial_point(X, y, rng), iterations, lr) for _ in range(restarts)]
    best_params, best_value, _ = max(results, key=lambda r: r[1])
    if not math.isfinite(best_value):
        raise NotPositiveDefinite("every IGPR restart failed to factorize")
    variance, lengthscale, noise = (float(v) for v in torch.exp(best_params))
    return igpr_output(X, RbfKernel(variance, lengthscale), noise, best_value,
                       tuple(r[2] for r in results), tuple(r[1] for r in results))


def igpr_output(X, kernel, noise, log_ml=float("nan"), initial_log_ml=(), restart_best=()):
    """Fitted record for fixed parameters, with K + noise I factorized at X."""
    X = torch.as_tensor(X, dtype=DTYPE)
    if X.dim() == 1:
        X = X.reshape(-1, 1)
    K = rbf_matrix(X, X, kernel) + noise * torch.eye(X.shape[0], dtype=DTYPE)
    chol = cholesky_jittered(K, BASE_JITTER)
    return IgprOutput(kernel, float(noise), log_ml, initial_log_ml, restart_best, chol)


def igpr_fit(ds, restarts=RESTARTS, seed=0, iterations=ITERATIONS, lr=LEARNING_RATE):
    outputs = []
    for d in range(ds.D):
        X, y = _observed(ds, d)
        if y.shape[0] < 2:
            raise DegenerateOutput(f"output {d} has {y.shape[0]} observed entries; IGPR needs >= 2")
        rng = np.random.default_rng([seed, d])
        fit = fit_output(X, y, restarts, rng, iterations, lr)
        log.info(f"IGPR output {d}: variance={fit.kernel.variance:.4g} "
                 f"lengthscale={fit.kernel.lengthscale:.4g} noise={fit.noise:.4g} "
                 f"lml={fit.log_ml:.3f}")
        outputs.append(fit)
    return IgprModel(tuple(outputs), seed)


def igpr_predict(model, ds_train, x_star):
    """Per output (mean, variance) arrays at x_star; variance includes the noise."""
    Xs = torch.as_tensor(np.asarray(x_star, dtype=np.float64), dtype=DTYPE)
    if Xs.dim() == 1:
        Xs = Xs.reshape(-1, 1)
    results = []
    with torch.no_grad():
        for d, fit in enumerate(model.outputs):
            X, y = _observed(ds_train, d)
            Ks = rbf_matrix(X, Xs, fit.kernel)
            alpha = tri_solve(fit.chol, y)
            V = tri_solve(fit.chol, Ks)
            mean = V.T @ alpha
            var = rbf_diag(Xs, fit.kernel) - (V * V).sum(0) + fit.noise
            results.append((mean.numpy(), np.maximum(var.numpy(), fit.noise)))
    return results


def igpr_intervals(predictions, z=1.959963984540054):
    """Stacks per-output predictions into (mean, lower, upper), each (B, D)."""
    mean = np.stack([m for m, _ in predictions], axis=1)
    sd = np.sqrt(np.stack([v for _, v in predictions], axis=1))
    return mean, mean - z * sd, mean + z * sd
