"""
numcore.py — Dense linear algebra and Gaussian helpers
======================================================
Everything here is a pure function of torch float64 tensors, so the same
code serves the forward pass and autograd. Covariance-like matrices are
symmetrized before factorization and factored with geometric jitter
escalation.

Usage:
    from numcore import cholesky_jittered, tri_solve, gauss_kl
    chol = cholesky_jittered(K)
    X = tri_solve(chol, B)
"""

import logging
import math
from dataclasses import dataclass

import torch

from errors import DimensionMismatch, NonFiniteError, NotPositiveDefinite

log = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────
# CONFIGURATION
# ─────────────────────────────────────────────────────────────
DTYPE = torch.float64
BASE_JITTER = 1e-6
MAX_JITTER_TRIES = 7        # base_jitter * 10**k, k = 0..6
PIVOT_FLOOR = 0.1           # min(L_ii)^2 must reach PIVOT_FLOOR * base_jitter * mean(diag A)
SYMMETRY_RTOL = 1e-8

_jitter_warned = False
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CholFactor:
    L: torch.Tensor
    jitter_used: float
    log_det: torch.Tensor

    @property
    def size(self):
        return self.L.shape[0]


# ─────────────────────────────────────────────────────────────
# HELPERS
# ─────────────────────────────────────────────────────────────
def as_mat(x):
    """Coerce to a 2-D float64 tensor (vectors become columns)."""
    t = torch.as_tensor(x, dtype=DTYPE)
    if t.dim() == 0:
        return t.reshape(1, 1)
    if t.dim() == 1:
        return t.reshape(-1, 1)
    return t


def symmetrize(A):
    return 0.5 * (A + A.transpose(-1, -2))


def check_finite(t, what):
    if not bool(torch.isfinite(t.detach()).all()):
        raise NonFiniteError(f"{what} has non-finite entries", segment=what)


def _lower(factor):
    return factor.L if isinstance(factor, CholFactor) else factor


def tril_size(M):
    return M * (M + 1) // 2


def tril_from_vector(vec, M, log_diag=True):
    """Rebuild a lower-triangular M x M factor from its packed entries.

    Entries follow torch.tril_indices order; when log_diag is set the
    diagonal entries are stored as logs and exponentiated here.
    """
    rows, cols = torch.tril_indices(M, M)
    diag = rows == cols
    if log_diag:
        vals = torch.where(diag, torch.exp(torch.where(diag, vec, torch.zeros_like(vec))), vec)
    else:
        vals = vec
    out = torch.zeros(M, M, dtype=vec.dtype)
    return out.index_put((rows, cols), vals)


def vector_from_tril(L, log_diag=True):
    M = L.shape[0]
    rows, cols = torch.tril_indices(M, M)
    vals = L[rows, cols]
    if log_diag:
        diag = rows == cols
        vals = torch.where(diag, torch.log(torch.where(diag, vals, torch.ones_like(vals))), vals)
    return vals


# ─────────────────────────────────────────────────────────────
# FACTORIZATION
# ─────────────────────────────────────────────────────────────
def _report_jitter(jitter, n):
    global _jitter_warned
    msg = f"Added jitter {jitter:.3e} to a {n}x{n} factorization"
    if _jitter_warned:
        log.debug(msg)
    else:
        log.warning(msg + " (further jitter notices at DEBUG)")
        _jitter_warned = True


def cholesky_jittered(A, base_jitter=BASE_JITTER):
    """Lower factor of A + jitter*I for the smallest jitter in the escalation
    ladder whose factor has no collapsed pivot."""
    A = as_mat(A)
    n, m = A.shape
    if n != m:
        raise DimensionMismatch(f"cholesky of non-square {n}x{m} matrix")
    check_finite(A, "matrix")

    with torch.no_grad():
        scale = float(A.abs().max()) if n else 0.0
        asym = float((A - A.T).abs().max()) if n else 0.0
        if asym > SYMMETRY_RTOL * max(1.0, scale):
            raise NotPositiveDefinite(f"matrix is not symmetric (max asymmetry {asym:.3e})")
        mean_diag = float(torch.diagonal(A).mean())
    if mean_diag <= 0:
        raise NotPositiveDefinite(f"mean diagonal {mean_diag:.3e} is not positive")

    A = symmetrize(A)
    eye = torch.eye(n, dtype=DTYPE)
    jitters = [0.0] + [base_jitter * 10**k * mean_diag for k in range(MAX_JITTER_TRIES)]
    pivot_floor = PIVOT_FLOOR * base_jitter * mean_diag
    for jitter in jitters:
        L, info = torch.linalg.cholesky_ex(A + jitter * eye if jitter else A)
        if int(info) != 0:
            continue
        pivots = torch.diagonal(L.detach())
        if bool((pivots > 0).all()) and float(pivots.min()) ** 2 >= pivot_floor:
            if jitter:
                _report_jitter(jitter, n)
            log_det = 2.0 * torch.log(torch.diagonal(L)).sum()
            return CholFactor(L=L, jitter_used=jitter, log_det=log_det)
    raise NotPositiveDefinite(
        f"{n}x{n} matrix not positive definite even with jitter {jitters[-1]:.3e}"
    )


def tri_solve(chol, B, transpose=False):
    """Solve L X = B (or L^T X = B when transpose is set)."""
    L = _lower(chol)
    vector = torch.as_tensor(B).dim() == 1
    B = as_mat(B)
    if L.shape[0] != L.shape[1] or L.shape[0] != B.shape[0]:
        raise DimensionMismatch(
            f"triangular solve with L {tuple(L.shape)} and B {tuple(B.shape)}"
        )
    if transpose:
        X = torch.linalg.solve_triangular(L.T, B, upper=True)
    else:
        X = torch.linalg.solve_triangular(L, B, upper=False)
    return X.reshape(-1) if vector else X


def chol_solve(chol, B):
    """K^{-1} B for K = L L^T."""
    return tri_solve(chol, tri_solve(chol, B), transpose=True)


# ─────────────────────────────────────────────────────────────
# GAUSSIANS
# ─────────────────────────────────────────────────────────────
def gauss_kl(m, S, K):
    """KL(N(m, S S^T) || N(0, K K^T)) for lower-triangular factors S, K."""
    S_L, K_L = _lower(S), _lower(K)
    m = torch.as_tensor(m, dtype=DTYPE).reshape(-1)
    M = m.shape[0]
    if S_L.shape != (M, M) or K_L.shape != (M, M):
        raise DimensionMismatch(
            f"gauss_kl with m[{M}], S {tuple(S_L.shape)}, K {tuple(K_L.shape)}"
        )
    A = tri_solve(K_L, S_L)
    alpha = tri_solve(K_L, m)
    log_det_K = 2.0 * torch.log(torch.diagonal(K_L)).sum()
    log_det_S = 2.0 * torch.log(torch.diagonal(S_L).abs()).sum()
    return 0.5 * ((A * A).sum() + (alpha * alpha).sum() - M + log_det_K - log_det_S)


def gauss_kl_white(m, S):
    """KL(N(m, S S^T) || N(0, I)); gauss_kl with K = I, no solves."""
    S_L = _lower(S)
    m = torch.as_tensor(m, dtype=DTYPE).reshape(-1)
    M = m.shape[0]
    if S_L.shape != (M, M):
        raise DimensionMismatch(f"gauss_kl_white with m[{M}], S {tuple(S_L.shape)}")
    log_det_S = 2.0 * torch.log(torch.diagonal(S_L).abs()).sum()
    return 0.5 * ((S_L * S_L).sum() + (m * m).sum() - M - log_det_S)


def gauss_logpdf(y, mean, var):
    return -0.5 * (LOG_2PI + torch.log(var)) - 0.5 * (y - mean) ** 2 / var
