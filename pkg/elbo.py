"""
elbo.py — Reparameterized latent draws and the minibatch ELBO estimator
========================================================================
One latent draw walks the hierarchy in order:
    v      = L^ell (m^v + S^v z^v)                 (log-lengthscale at Z)
    ell_n  = exp(cond. mean + cond. sd * z^ell_n)   (lengthscale at x_n)
    g-moments of q(g_dn | ell, v)                   (Gibbs kernel at that draw)
    l_ijn  = mu + sd * z^l, exp'd on the diagonal   (coefficients)
and the per-entry expected log-likelihood is estimated either by sampling
g directly or by integrating it out in closed form.

All standard-normal noise for a call is drawn up front in a fixed order
(z^v, z^ell, z^l, z^g) so that a seed pins every draw.
"""

import logging
from dataclasses import dataclass

import torch

from errors import DimensionMismatch, EmptyBatch
from model import (
    GibbsCovariance,
    StationaryCovariance,
    pairs,
    prior_conditional_moments,
    variational_marginal_moments,
)
from numcore import BASE_JITTER, DTYPE, cholesky_jittered, gauss_kl_white, gauss_logpdf

log = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────
# CONFIGURATION
# ─────────────────────────────────────────────────────────────
METHODS = ("direct", "marginalized")
DEFAULT_METHOD = "marginalized"
DEFAULT_SAMPLES = 1
NEGATIVE_VARIANCE_TOL = -1e-6
SQRT_FLOOR = 1e-300          # keeps d sqrt / d var finite at exactly zero variance

DIAGNOSTICS = {"clamped_variances": 0}


def _clamped_sd(var, what):
    bad = int((var.detach() < NEGATIVE_VARIANCE_TOL).sum())
    if bad:
        DIAGNOSTICS["clamped_variances"] += bad
        log.debug(f"Clamped {bad} negative {what} variances (min {float(var.min()):.3e})")
    return torch.sqrt(var.clamp(min=0.0) + SQRT_FLOOR)


# ─────────────────────────────────────────────────────────────
# NOISE
# ─────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class LatentNoise:
    """Standard-normal draws, leading dimension = sample index."""
    z_v: torch.Tensor      # (S, M)
    z_ell: torch.Tensor    # (S, B)
    z_l: torch.Tensor      # (S, B, D(D+1)/2) in pairs(D) order
    z_g: torch.Tensor      # (S, B, D)

    @classmethod
    def draw(cls, n_samples, batch, M, D, generator):
        P = D * (D + 1) // 2
        z_v = torch.randn(n_samples, M, generator=generator, dtype=DTYPE)
        z_ell = torch.randn(n_samples, batch, generator=generator, dtype=DTYPE)
        z_l = torch.randn(n_samples, batch, P, generator=generator, dtype=DTYPE)
        z_g = torch.randn(n_samples, batch, D, generator=generator, dtype=DTYPE)
        return cls(z_v, z_ell, z_l, z_g)

    @property
    def n_samples(self):
        return self.z_v.shape[0]

    @property
    def batch(self):
        return self.z_ell.shape[1]

    def take(self, rows):
        rows = torch.as_tensor(rows, dtype=torch.long)
        return LatentNoise(self.z_v, self.z_ell[:, rows], self.z_l[:, rows], self.z_g[:, rows])


@dataclass(frozen=True)
class LatentBatchSample:
    noise: dict
    v_draw: torch.Tensor
    ell_batch: torch.Tensor
    l_batch: torch.Tensor
    g_mean: torch.Tensor
    g_var: torch.Tensor
    g_draw: torch.Tensor = None


@dataclass(frozen=True)
class ElboBreakdown:
    expected_loglik: torch.Tensor
    kl_u: torch.Tensor
    kl_w: torch.Tensor
    kl_v: torch.Tensor
    elbo: torch.Tensor
    loglik_draws: torch.Tensor = None   # per-draw scaled likelihood terms

    def as_floats(self):
        return {k: float(getattr(self, k)) for k in
                ("expected_loglik", "kl_u", "kl_w", "kl_v", "elbo")}


# ─────────────────────────────────────────────────────────────
# PRIOR FACTORS
# ─────────────────────────────────────────────────────────────
def coefficient_chol(state, hypers):
    return cholesky_jittered(StationaryCovariance(hypers.theta_l).gram(state.Z.Z), BASE_JITTER)


def lengthscale_chol(state, hypers):
    return cholesky_jittered(StationaryCovariance(hypers.theta_ell).gram(state.Z.Z), BASE_JITTER)


# ─────────────────────────────────────────────────────────────
# SAMPLING
# ─────────────────────────────────────────────────────────────
def sample_lengthscale(state, hypers, X_batch, rng=None, z_v=None, z_ell=None, Kell_chol=None):
    B = X_batch.shape[0]
    if z_v is None:
        z_v = torch.randn(state.M, generator=rng, dtype=DTYPE)
    if z_ell is None:
        z_ell = torch.randn(B, generator=rng, dtype=DTYPE)
    if Kell_chol is None:
        Kell_chol = lengthscale_chol(state, hypers)
    v_white = state.q_v.m + state.q_v.S_factor @ z_v
    mean, var = prior_conditional_moments(
        StationaryCovariance(hypers.theta_ell), X_batch, state.Z, v_white,
        diag_only=True, Kzz_chol=Kell_chol, whitened=True,
    )
    v_draw = Kell_chol.L @ v_white
    ell_batch = torch.exp(mean + _clamped_sd(var, "lengthscale") * z_ell)
    return v_draw, ell_batch, {"z_v": z_v, "z_ell": z_ell}


def coefficient_moments(state, hypers, X_batch, Kl_chol=None):
    """Per-datum marginal mean / variance of every l_ij, shape (B, D(D+1)/2)."""
    kernel = StationaryCovariance(hypers.theta_l)
    if Kl_chol is None:
        Kl_chol = coefficient_chol(state, hypers)
    means, variances = [], []
    for ij in pairs(state.D):
        mu, var = variational_marginal_moments(
            kernel, X_batch, state.Z, state.q_u[ij], diag_only=True, Kzz_chol=Kl_chol,
            whitened=True,
        )
        means.append(mu)
        variances.append(var)
    return torch.stack(means, dim=1), torch.stack(variances, dim=1)


def sample_coefficients(state, hypers, X_batch, rng=None, z_l=None, Kl_chol=None, moments=None):
    D = state.D
    B = X_batch.shape[0]
    idx = pairs(D)
    if z_l is None:
        z_l = torch.randn(B, len(idx), generator=rng, dtype=DTYPE)
    mu, var = moments if moments is not None else coefficient_moments(state, hypers, X_batch, Kl_chol)
    t = mu + _clamped_sd(var, "coefficient") * z_l
    on_diag = torch.tensor([i == j for i, j in idx])
    vals = torch.where(on_diag, torch.exp(torch.where(on_diag, t, torch.zeros_like(t))), t)
    rows = torch.tensor([i for i, _ in idx])
    cols = torch.tensor([j for _, j in idx])
    l_batch = torch.zeros(B, D, D, dtype=DTYPE)
    l_batch[:, rows, cols] = vals
    return l_batch, {"z_l": z_l}


def g_marginal_moments(state, hypers, X_batch, ell_batch, v_draw, Kg_chol=None):
    """Per-datum (mean, variance) of g_dn under the Gibbs kernel at this lengthscale draw.

    Returns (means (B, D), variances (B, D), chol of K^g(Z, Z)).
    """
    kernel = GibbsCovariance(ell_batch, torch.exp(v_draw))
    if Kg_chol is None:
        Kg_chol = cholesky_jittered(kernel.gram(state.Z.Z), BASE_JITTER)
    means, variances = [], []
    for q in state.q_w:
        mu, var = variational_marginal_moments(
            kernel, X_batch, state.Z, q, diag_only=True, Kzz_chol=Kg_chol, whitened=True
        )
        means.append(mu)
        variances.append(var.clamp(min=0.0))
    return torch.stack(means, dim=1), torch.stack(variances, dim=1), Kg_chol


# ─────────────────────────────────────────────────────────────
# PER-ENTRY EXPECTATIONS
# ─────────────────────────────────────────────────────────────
def expected_loglik_direct(y, l_row, g_draw, sigma2_err):
    """Single-draw integrand log N(y | sum_j l_j g_j, sigma2_err); reduces over the last axis."""
    l_row, g_draw = torch.as_tensor(l_row, dtype=DTYPE), torch.as_tensor(g_draw, dtype=DTYPE)
    f = (l_row * g_draw).sum(-1)
    return gauss_logpdf(torch.as_tensor(y, dtype=DTYPE), f, torch.as_tensor(sigma2_err, dtype=DTYPE))


def expected_loglik_marginalized(y, l_row, g_means, g_vars, sigma2_err):
    """The direct integrand with g integrated out analytically."""
    l_row = torch.as_tensor(l_row, dtype=DTYPE)
    g_means = torch.as_tensor(g_means, dtype=DTYPE)
    g_vars = torch.as_tensor(g_vars, dtype=DTYPE)
    s2 = torch.as_tensor(sigma2_err, dtype=DTYPE)
    f = (l_row * g_means).sum(-1)
    spread = (l_row * l_row * g_vars).sum(-1)
    return gauss_logpdf(torch.as_tensor(y, dtype=DTYPE), f, s2) - spread / (2.0 * s2)


# ─────────────────────────────────────────────────────────────
# MINIBATCH ELBO
# ─────────────────────────────────────────────────────────────
def draw_latents(state, hypers, X_b, noise_s, Kell_chol, Kl_chol, coef_moments, method):
    v_draw, ell, _ = sample_lengthscale(
        state, hypers, X_b, z_v=noise_s["z_v"], z_ell=noise_s["z_ell"], Kell_chol=Kell_chol
    )
    g_mean, g_var, Kg_chol = g_marginal_moments(state, hypers, X_b, ell, v_draw)
    l_batch, _ = sample_coefficients(
        state, hypers, X_b, z_l=noise_s["z_l"], Kl_chol=Kl_chol, moments=coef_moments
    )
    g_draw = None
    if method == "direct":
        g_draw = g_mean + _clamped_sd(g_var, "latent") * noise_s["z_g"]
    sample = LatentBatchSample(noise_s, v_draw, ell, l_batch, g_mean, g_var, g_draw)
    return sample, Kg_chol


def elbo_minibatch(dataset, batch_indices, state, hypers, method=DEFAULT_METHOD,
                   n_samples=DEFAULT_SAMPLES, rng=None, noise=None):
    """Stochastic ELBO on a batch of rows, likelihood rescaled to the full observed set.

    Either a seeded torch.Generator (rng) or explicit LatentNoise for exactly
    these rows must be given.
    """
    if method not in METHODS:
        raise ValueError(f"unknown estimator {method!r}; expected one of {METHODS}")
    batch_indices = list(batch_indices)
    if not batch_indices:
        raise EmptyBatch("minibatch has no rows")
    if n_samples < 1 and noise is None:
        raise ValueError("n_samples must be >= 1")

    X_b, Y_b, mask_b = dataset.batch(batch_indices)
    B = X_b.shape[0]
    sigma2 = torch.as_tensor(hypers.sigma2_err, dtype=DTYPE)
    Kl_chol = coefficient_chol(state, hypers)
    Kell_chol = lengthscale_chol(state, hypers)

    # whitened factors: every KL is against N(0, I)
    kl_u = sum(gauss_kl_white(state.q_u[ij].m, state.q_u[ij].S_factor) for ij in pairs(state.D))
    kl_v = gauss_kl_white(state.q_v.m, state.q_v.S_factor)
    kl_w = sum(gauss_kl_white(q.m, q.S_factor) for q in state.q_w)

    if noise is None:
        noise = LatentNoise.draw(n_samples, B, state.M, state.D, rng)
    if noise.batch != B:
        raise DimensionMismatch(f"noise covers {noise.batch} rows, batch has {B}")

    n_obs_total = dataset.n_observed
    n_obs_batch = int(mask_b.sum())
    scale = n_obs_total / n_obs_batch if n_obs_batch else 0.0
    y_safe = torch.where(mask_b, Y_b, torch.zeros_like(Y_b))
    coef_moments = coefficient_moments(state, hypers, X_b, Kl_chol)

    loglik_draws = []
    for s in range(noise.n_samples):
        noise_s = {"z_v": noise.z_v[s], "z_ell": noise.z_ell[s],
                   "z_l": noise.z_l[s], "z_g": noise.z_g[s]}
        sample, _ = draw_latents(
            state, hypers, X_b, noise_s, Kell_chol, Kl_chol, coef_moments, method
        )
        if method == "direct":
            terms = expected_loglik_direct(y_safe, sample.l_batch, sample.g_draw[:, None, :], sigma2)
        else:
            terms = expected_loglik_marginalized(
                y_safe, sample.l_batch, sample.g_mean[:, None, :], sample.g_var[:, None, :], sigma2
            )
        terms = torch.where(mask_b, terms, torch.zeros_like(terms))
        loglik_draws.append(scale * terms.sum())

    loglik_draws = torch.stack(loglik_draws)
    expected_loglik = loglik_draws.mean()
    elbo = expected_loglik - (kl_u + kl_w + kl_v)
    return ElboBreakdown(expected_loglik, kl_u, kl_w, kl_v, elbo, loglik_draws)
