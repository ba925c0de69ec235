"""
predict.py — Posterior predictive draws, correlation tracks and test metrics
============================================================================
Every draw walks the same hierarchy the ELBO uses (v, lengthscale, coefficients,
latent g) with per-point marginals, then mixes y* = L(x*) g*. Summaries are
empirical means and 2.5 / 97.5 percentiles over draws.

Usage:
    preds = predictive_samples(state, hypers, x_star, 500, torch.Generator().manual_seed(0))
    print(evaluate(test, preds))
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch

from elbo import LatentNoise, coefficient_chol, coefficient_moments, draw_latents, lengthscale_chol
from errors import DegenerateCovariance, EmptyTestSet
from numcore import DTYPE, as_mat

log = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────
# CONFIGURATION
# ─────────────────────────────────────────────────────────────
PREDICT_SAMPLES = 500
INTERVAL = (2.5, 97.5)
MIN_OUTPUT_VARIANCE = 1e-12


@dataclass(frozen=True)
class PredictiveSamples:
    x_star: np.ndarray       # (B, P)
    draws: np.ndarray        # (S, B, D)
    mean: np.ndarray         # (B, D)
    lower: np.ndarray
    upper: np.ndarray

    @property
    def n_samples(self):
        return self.draws.shape[0]


@dataclass(frozen=True)
class CorrelationTrack:
    grid: np.ndarray             # (B, P)
    corr: np.ndarray             # (B, D, D)
    log_lengthscale: np.ndarray  # (B,)
    sd: np.ndarray               # (B, D) posterior-mean sqrt(Sigma_ii)


def _summaries(draws):
    lower, upper = np.percentile(draws, INTERVAL, axis=0)
    return draws.mean(axis=0), lower, upper


def _latent_draws(state, hypers, x_star, n_samples, rng, method="direct"):
    """Yields one LatentBatchSample per draw, noise drawn up front."""
    X = as_mat(torch.as_tensor(x_star, dtype=DTYPE))
    noise = LatentNoise.draw(n_samples, X.shape[0], state.M, state.D, rng)
    Kl_chol = coefficient_chol(state, hypers)
    Kell_chol = lengthscale_chol(state, hypers)
    moments = coefficient_moments(state, hypers, X, Kl_chol)
    for s in range(n_samples):
        noise_s = {"z_v": noise.z_v[s], "z_ell": noise.z_ell[s],
                   "z_l": noise.z_l[s], "z_g": noise.z_g[s]}
        sample, _ = draw_latents(state, hypers, X, noise_s, Kell_chol, Kl_chol, moments, method)
        yield sample


# ─────────────────────────────────────────────────────────────
# PREDICTION
# ─────────────────────────────────────────────────────────────
def predictive_samples(state, hypers, x_star, n_samples=PREDICT_SAMPLES, rng=None,
                       include_noise=False):
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x_np = np.asarray(as_mat(torch.as_tensor(x_star, dtype=DTYPE)))
    with torch.no_grad():
        draws = []
        for sample in _latent_draws(state, hypers, x_np, n_samples, rng):
            draws.append(torch.einsum("bij,bj->bi", sample.l_batch, sample.g_draw))
        draws = torch.stack(draws)
        if include_noise:
            sigma = torch.sqrt(torch.as_tensor(hypers.sigma2_err, dtype=DTYPE))
            draws = draws + sigma * torch.randn(draws.shape, generator=rng, dtype=DTYPE)
    draws = draws.numpy()
    mean, lower, upper = _summaries(draws)
    return PredictiveSamples(x_np, draws, mean, lower, upper)


def predictive_mean(state, hypers, x_star, n_samples, rng):
    """Mean of y* with g integrated out; (B, D)."""
    with torch.no_grad():
        total = None
        for sample in _latent_draws(state, hypers, x_star, n_samples, rng, method="marginalized"):
            y = torch.einsum("bij,bj->bi", sample.l_batch, sample.g_mean)
            total = y if total is None else total + y
    return (total / n_samples).numpy()


# ─────────────────────────────────────────────────────────────
# CORRELATIONS
# ─────────────────────────────────────────────────────────────
def instantaneous_correlation(L):
    """Corr and sd of Sigma = L L^T for a batch of factors (B, D, D)."""
    L = torch.as_tensor(L, dtype=DTYPE)
    Sigma = L @ L.transpose(-1, -2)
    var = torch.diagonal(Sigma, dim1=-2, dim2=-1)
    if bool((var < MIN_OUTPUT_VARIANCE).any()):
        raise DegenerateCovariance(f"output variance below {MIN_OUTPUT_VARIANCE} (min {float(var.min()):.3e})")
    sd = torch.sqrt(var)
    corr = Sigma / (sd[..., :, None] * sd[..., None, :])
    corr = (0.5 * (corr + corr.transpose(-1, -2))).clamp(-1.0, 1.0)
    eye = torch.eye(L.shape[-1], dtype=torch.bool)
    corr = torch.where(eye, torch.ones_like(corr), corr)
    return corr, sd


def correlation_track(state, hypers, grid, n_samples=PREDICT_SAMPLES, rng=None):
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    grid_np = np.asarray(as_mat(torch.as_tensor(grid, dtype=DTYPE)))
    corr_sum = sd_sum = log_ell_sum = 0.0
    with torch.no_grad():
        for sample in _latent_draws(state, hypers, grid_np, n_samples, rng, method="marginalized"):
            corr, sd = instantaneous_correlation(sample.l_batch)
            corr_sum = corr_sum + corr
            sd_sum = sd_sum + sd
            log_ell_sum = log_ell_sum + torch.log(sample.ell_batch)
    return CorrelationTrack(
        grid=grid_np,
        corr=(corr_sum / n_samples).numpy(),
        log_lengthscale=(log_ell_sum / n_samples).numpy(),
        sd=(sd_sum / n_samples).numpy(),
    )


# ─────────────────────────────────────────────────────────────
# METRICS
# ─────────────────────────────────────────────────────────────
def metrics(y_true, mean, lower, upper):
    """RMSE, average 95% interval length and coverage rate over aligned entries."""
    y_true, mean = np.asarray(y_true, dtype=float).ravel(), np.asarray(mean, dtype=float).ravel()
    lower, upper = np.asarray(lower, dtype=float).ravel(), np.asarray(upper, dtype=float).ravel()
    if y_true.size == 0:
        raise EmptyTestSet("no test entries to score")
    inside = (y_true >= lower) & (y_true <= upper)
    return {
        "rmse": float(np.sqrt(np.mean((mean - y_true) ** 2))),
        "alci": float(np.mean(upper - lower)),
        "cr": float(np.mean(inside)),
    }


def evaluate(test, preds):
    """Scores predictions made at test.X against test's observed entries."""
    if preds.mean.shape != test.Y.shape:
        raise ValueError(f"predictions {preds.mean.shape} do not align with test outputs {test.Y.shape}")
    m = test.mask
    return metrics(test.Y[m], preds.mean[m], preds.lower[m], preds.upper[m])


def rmse_against(test, means):
    m = test.mask
    if not m.any():
        raise EmptyTestSet("no test entries to score")
    return float(np.sqrt(np.mean((np.asarray(means)[m] - test.Y[m]) ** 2)))


# ─────────────────────────────────────────────────────────────
# FRAMES
# ─────────────────────────────────────────────────────────────
def _input_columns(x, input_names):
    names = input_names or [f"x{p}" for p in range(x.shape[1])]
    return {name: x[:, p] for p, name in enumerate(names)}


def predictions_frame(preds, input_names=None):
    B, D = preds.mean.shape
    frames = []
    for d in range(D):
        frame = pd.DataFrame(_input_columns(preds.x_star, input_names))
        frame["output"] = d
        frame["mean"] = preds.mean[:, d]
        frame["lower95"] = preds.lower[:, d]
        frame["upper95"] = preds.upper[:, d]
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def correlation_frame(track, input_names=None):
    D = track.corr.shape[-1]
    frames = []
    for i in range(D):
        for j in range(i + 1):
            frame = pd.DataFrame(_input_columns(track.grid, input_names))
            frame["i"] = i
            frame["j"] = j
            frame["corr"] = track.corr[:, i, j]
            frame["log_lengthscale"] = track.log_lengthscale
            frame["sd_i"] = track.sd[:, i]
            frame["sd_j"] = track.sd[:, j]
            frames.append(frame)
    return pd.concat(frames, ignore_index=True)
