"""
kernels.py — Stationary RBF and nonstationary Gibbs covariances
================================================================
RBF drives the coefficient processes (K^l) and the log-lengthscale process
(K^ell). The Gibbs correlation drives the latent functions (K^g); its
lengthscale is supplied per point, so callers evaluate it against whatever
lengthscale draw they hold.
"""

from dataclasses import dataclass

import torch

from errors import DimensionMismatch, NonPositiveLengthscale
from numcore import DTYPE, as_mat


def _scalar(x):
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclass(frozen=True)
class RbfKernel:
    variance: object = 1.0
    lengthscale: object = 1.0

    def __post_init__(self):
        for name in ("variance", "lengthscale"):
            v = _scalar(getattr(self, name))
            if not (v > 0 and v < float("inf")):
                raise ValueError(f"RbfKernel.{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class GibbsEval:
    inputs_a: torch.Tensor
    lengthscales_a: torch.Tensor
    inputs_b: torch.Tensor
    lengthscales_b: torch.Tensor

    def __post_init__(self):
        for pts, ls, side in ((self.inputs_a, self.lengthscales_a, "a"),
                              (self.inputs_b, self.lengthscales_b, "b")):
            if as_mat(pts).shape[0] != torch.as_tensor(ls).reshape(-1).shape[0]:
                raise DimensionMismatch(
                    f"Gibbs side {side}: {as_mat(pts).shape[0]} points but "
                    f"{torch.as_tensor(ls).reshape(-1).shape[0]} lengthscales"
                )
            if not bool((torch.as_tensor(ls).detach() > 0).all()):
                raise NonPositiveLengthscale(f"Gibbs side {side} has a non-positive lengthscale")


def sq_dist(X, X2):
    X, X2 = as_mat(X), as_mat(X2)
    if X.shape[1] != X2.shape[1]:
        raise DimensionMismatch(f"input dimension {X.shape[1]} vs {X2.shape[1]}")
    diff = X[:, None, :] - X2[None, :, :]
    return (diff * diff).sum(-1)


# ─────────────────────────────────────────────────────────────
# RBF
# ─────────────────────────────────────────────────────────────
def rbf_matrix(X, X2, k):
    r2 = sq_dist(X, X2)
    return k.variance * torch.exp(-r2 / (2.0 * k.lengthscale ** 2))


def rbf_diag(X, k):
    n = as_mat(X).shape[0]
    return k.variance * torch.ones(n, dtype=DTYPE)


# ─────────────────────────────────────────────────────────────
# GIBBS
# ─────────────────────────────────────────────────────────────
def gibbs_matrix(e):
    la = torch.as_tensor(e.lengthscales_a, dtype=DTYPE).reshape(-1, 1)
    lb = torch.as_tensor(e.lengthscales_b, dtype=DTYPE).reshape(1, -1)
    r2 = sq_dist(e.inputs_a, e.inputs_b)
    P = as_mat(e.inputs_a).shape[1]
    s = la * la + lb * lb
    # normalizer raised to P/2 for P-dimensional inputs
    prefactor = (2.0 * la * lb / s) ** (0.5 * P)
    return prefactor * torch.exp(-r2 / s)


def gibbs_diag(X):
    return torch.ones(as_mat(X).shape[0], dtype=DTYPE)
