"""
model.py — Variational state containers and Gaussian conditional moments
=========================================================================
Holds the inducing inputs Z, the Gaussian factors q(u_ij), q(w_d), q(v) and
the hyperparameters, plus the closed-form conditional / marginal moments of a
sparse GP given its inducing values (or a Gaussian belief over them).

The trained state keeps every q whitened: q(u) describes L^{-1} u where
K(Z, Z) = L L^T under the current hyperparameters (for q(w), the Gibbs
Gram at the lengthscale draw). unwhiten() maps a factor back to u itself.

State files are single JSON documents; floats are written in shortest
round-trip form so a save/load cycle is lossless.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import orjson
import torch

from errors import DimensionMismatch
from kernels import GibbsEval, RbfKernel, gibbs_diag, gibbs_matrix, rbf_diag, rbf_matrix
from numcore import BASE_JITTER, DTYPE, CholFactor, as_mat, cholesky_jittered, tri_solve

log = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────
# CONFIGURATION
# ─────────────────────────────────────────────────────────────
MIN_INDUCING_GAP = 1e-10
STATE_FORMAT = "cnmgp-state/2"     # factors stored whitened

# keys of HyperParams.trainable; lengthscales stay fixed unless asked
DEFAULT_TRAINABLE = {
    "sigma2_err": True,
    "theta_l.variance": True,
    "theta_l.lengthscale": False,
    "theta_ell.variance": True,
    "theta_ell.lengthscale": False,
    "Z": False,
}


def pairs(D):
    """Ordered (i, j) index pairs with i >= j, 0-based."""
    return [(i, j) for i in range(D) for j in range(i + 1)]


# ─────────────────────────────────────────────────────────────
# DOMAIN TYPES
# ─────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class InducingSet:
    Z: torch.Tensor

    def __post_init__(self):
        Z = as_mat(self.Z)
        object.__setattr__(self, "Z", Z)
        if Z.shape[0] < 1:
            raise DimensionMismatch("inducing set needs at least one point")
        if Z.shape[0] > 1:
            with torch.no_grad():
                d = torch.cdist(Z, Z) + torch.eye(Z.shape[0], dtype=DTYPE)
            if float(d.min()) <= MIN_INDUCING_GAP:
                raise DimensionMismatch("inducing inputs contain duplicate rows")

    @property
    def M(self):
        return self.Z.shape[0]


@dataclass(frozen=True)
class VariationalGaussian:
    m: torch.Tensor
    S_factor: torch.Tensor

    @property
    def S(self):
        return self.S_factor @ self.S_factor.T

    @property
    def M(self):
        return self.m.shape[0]


@dataclass(frozen=True)
class VariationalState:
    Z: InducingSet
    q_u: dict
    q_w: list
    q_v: VariationalGaussian

    def __post_init__(self):
        D = len(self.q_w)
        if set(self.q_u) != set(pairs(D)):
            raise DimensionMismatch(
                f"q_u must hold {D * (D + 1) // 2} factors for D={D}, got {len(self.q_u)}"
            )
        M = self.Z.M
        for q in [*self.q_u.values(), *self.q_w, self.q_v]:
            if q.m.shape != (M,) or q.S_factor.shape != (M, M):
                raise DimensionMismatch(f"variational factor does not match M={M}")

    @property
    def D(self):
        return len(self.q_w)

    @property
    def M(self):
        return self.Z.M


@dataclass(frozen=True)
class HyperParams:
    sigma2_err: object = 1.0
    theta_l: RbfKernel = field(default_factory=RbfKernel)
    theta_ell: RbfKernel = field(default_factory=RbfKernel)
    trainable: dict = field(default_factory=lambda: dict(DEFAULT_TRAINABLE))

    def __post_init__(self):
        s = self.sigma2_err
        s = float(s.detach()) if isinstance(s, torch.Tensor) else float(s)
        if not (s > 0 and s < float("inf")):
            raise ValueError(f"sigma2_err must be positive and finite, got {s}")
        unknown = set(self.trainable) - set(DEFAULT_TRAINABLE)
        if unknown:
            raise ValueError(f"unknown trainable flags: {sorted(unknown)}")
        object.__setattr__(self, "trainable", {**DEFAULT_TRAINABLE, **self.trainable})

    def get(self, name):
        if name == "sigma2_err":
            return self.sigma2_err
        block, attr = name.split(".")
        return getattr(getattr(self, block), attr)

    def with_values(self, values):
        """Copy with dotted-name overrides, e.g. {"theta_l.variance": 2.0}."""
        sigma2 = values.get("sigma2_err", self.sigma2_err)
        theta_l = replace(self.theta_l, **{k.split(".")[1]: v for k, v in values.items()
                                           if k.startswith("theta_l.")})
        theta_ell = replace(self.theta_ell, **{k.split(".")[1]: v for k, v in values.items()
                                               if k.startswith("theta_ell.")})
        return HyperParams(sigma2, theta_l, theta_ell, dict(self.trainable))


# ─────────────────────────────────────────────────────────────
# KERNEL EVALUATORS
# ─────────────────────────────────────────────────────────────
class StationaryCovariance:
    """RBF covariance evaluated on (X, Z) blocks."""

    def __init__(self, k):
        self.k = k

    def gram(self, Z):
        return rbf_matrix(Z, Z, self.k)

    def cross(self, X, Z):
        return rbf_matrix(X, Z, self.k)

    def full(self, X):
        return rbf_matrix(X, X, self.k)

    def diag(self, X):
        return rbf_diag(X, self.k)


class GibbsCovariance:
    """Gibbs correlation with lengthscales fixed at ell_x (for X) and ell_z (for Z)."""

    def __init__(self, ell_x, ell_z):
        self.ell_x = ell_x
        self.ell_z = ell_z

    def gram(self, Z):
        return gibbs_matrix(GibbsEval(Z, self.ell_z, Z, self.ell_z))

    def cross(self, X, Z):
        return gibbs_matrix(GibbsEval(X, self.ell_x, Z, self.ell_z))

    def full(self, X):
        return gibbs_matrix(GibbsEval(X, self.ell_x, X, self.ell_x))

    def diag(self, X):
        return gibbs_diag(X)


def _points(Z):
    return Z.Z if isinstance(Z, InducingSet) else as_mat(Z)


def _projection(kernel, X, Z, Kzz_chol):
    """Returns (B, chol) with B = L^{-1} K(Z, X) and K(Z,Z) = L L^T."""
    Zp = _points(Z)
    chol = Kzz_chol if Kzz_chol is not None else cholesky_jittered(kernel.gram(Zp), BASE_JITTER)
    B = tri_solve(chol, kernel.cross(X, Zp).T)
    return B, chol


# ─────────────────────────────────────────────────────────────
# MOMENTS
# ─────────────────────────────────────────────────────────────
def prior_conditional_moments(kernel, X, Z, vals, diag_only=False, Kzz_chol=None,
                              whitened=False):
    """Mean and covariance of f(X) given f(Z) = vals under the prior.

    With whitened set, vals are L^{-1} f(Z) for K(Z, Z) = L L^T.
    """
    B, chol = _projection(kernel, X, Z, Kzz_chol)
    A = B if whitened else tri_solve(chol, B, transpose=True)
    mean = A.T @ torch.as_tensor(vals, dtype=DTYPE).reshape(-1)
    if diag_only:
        return mean, kernel.diag(X) - (B * B).sum(0)
    return mean, kernel.full(X) - B.T @ B


def variational_marginal_moments(kernel, X, Z, q, diag_only=False, Kzz_chol=None,
                                 whitened=False):
    """Moments of f(X) after integrating the inducing values against q.

    With whitened set, q is a belief over L^{-1} f(Z) rather than f(Z).
    """
    B, chol = _projection(kernel, X, Z, Kzz_chol)
    A = B if whitened else tri_solve(chol, B, transpose=True)
    mean = A.T @ q.m
    SA = q.S_factor.T @ A
    if diag_only:
        return mean, kernel.diag(X) - (B * B).sum(0) + (SA * SA).sum(0)
    return mean, kernel.full(X) - B.T @ B + SA.T @ SA


def unwhiten(q, chol):
    """Belief over f(Z) implied by a whitened q: N(L m, L S S^T L^T)."""
    L = chol.L if isinstance(chol, CholFactor) else chol
    return VariationalGaussian(m=L @ q.m, S_factor=L @ q.S_factor)


# ─────────────────────────────────────────────────────────────
# SERIALIZATION
# ─────────────────────────────────────────────────────────────
def _num(x):
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _gaussian_dict(q):
    return {"m": q.m.detach().tolist(), "S_factor": q.S_factor.detach().tolist()}


def _gaussian_from(d):
    return VariationalGaussian(
        m=torch.tensor(d["m"], dtype=DTYPE),
        S_factor=torch.tensor(d["S_factor"], dtype=DTYPE),
    )


def hypers_to_dict(hypers):
    return {
        "sigma2_err": _num(hypers.sigma2_err),
        "theta_l": {"variance": _num(hypers.theta_l.variance),
                    "lengthscale": _num(hypers.theta_l.lengthscale)},
        "theta_ell": {"variance": _num(hypers.theta_ell.variance),
                      "lengthscale": _num(hypers.theta_ell.lengthscale)},
        "trainable": dict(hypers.trainable),
    }


def hypers_from_dict(d):
    return HyperParams(
        sigma2_err=float(d["sigma2_err"]),
        theta_l=RbfKernel(**d["theta_l"]),
        theta_ell=RbfKernel(**d["theta_ell"]),
        trainable=dict(d.get("trainable", {})),
    )


def state_to_dict(state, hypers):
    return {
        "format": STATE_FORMAT,
        "D": state.D,
        "M": state.M,
        "Z": state.Z.Z.detach().tolist(),
        "q_u": {f"{i},{j}": _gaussian_dict(q) for (i, j), q in sorted(state.q_u.items())},
        "q_w": [_gaussian_dict(q) for q in state.q_w],
        "q_v": _gaussian_dict(state.q_v),
        "hypers": hypers_to_dict(hypers),
        "kernels": {"K_l": "rbf", "K_ell": "rbf", "K_g": "gibbs", "base_jitter": BASE_JITTER},
    }


def state_from_dict(d):
    if d.get("format") != STATE_FORMAT:
        raise ValueError(f"unsupported state format {d.get('format')!r}")
    q_u = {}
    for key, q in d["q_u"].items():
        i, j = (int(t) for t in key.split(","))
        q_u[(i, j)] = _gaussian_from(q)
    state = VariationalState(
        Z=InducingSet(torch.tensor(d["Z"], dtype=DTYPE)),
        q_u=q_u,
        q_w=[_gaussian_from(q) for q in d["q_w"]],
        q_v=_gaussian_from(d["q_v"]),
    )
    return state, hypers_from_dict(d["hypers"])


def save_state(path, state, hypers):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(state_to_dict(state, hypers), option=orjson.OPT_INDENT_2))
    log.debug(f"Saved state -> {path}")


def load_state(path):
    return state_from_dict(orjson.loads(Path(path).read_bytes()))
