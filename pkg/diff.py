"""
diff.py — Flat parameter vector and seeded ELBO gradients
=========================================================
pack() flattens a (VariationalState, HyperParams) pair into one float64
vector in the unconstrained space the optimizer works in:

    q_u[i,j].m, q_u[i,j].S   for (i, j) in pairs(D)
    q_w[d].m,   q_w[d].S     for d in range(D)
    q_v.m,      q_v.S
    hyper.<name>             log of each trainable hyperparameter
    Z                        only when Z is flagged trainable

Factor segments hold the lower triangle in torch.tril_indices order with the
diagonal stored as logs. Gradients come from torch autograd through the whole
estimator; finite_diff() is the oracle they are checked against.
"""

import logging
import math
from dataclasses import dataclass, field

import torch

from elbo import DEFAULT_METHOD, DEFAULT_SAMPLES, elbo_minibatch
from errors import LayoutMismatch, NonFiniteError
from kernels import RbfKernel
from model import HyperParams, InducingSet, VariationalGaussian, VariationalState, pairs
from numcore import DTYPE, tril_from_vector, tril_size, vector_from_tril

log = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────
# CONFIGURATION
# ─────────────────────────────────────────────────────────────
FD_STEP = 1e-5
HYPER_NAMES = ("sigma2_err", "theta_l.variance", "theta_l.lengthscale",
               "theta_ell.variance", "theta_ell.lengthscale")


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int
    shape: tuple

    @property
    def size(self):
        return self.stop - self.start


@dataclass(frozen=True)
class ParamVector:
    values: torch.Tensor
    layout: tuple
    template: dict = field(default_factory=dict)   # fixed hypers / Z and sizes

    def __post_init__(self):
        total = self.layout[-1].stop if self.layout else 0
        if self.values.dim() != 1 or self.values.shape[0] != total:
            raise LayoutMismatch(
                f"vector of shape {tuple(self.values.shape)} does not match layout length {total}"
            )

    def __len__(self):
        return self.values.shape[0]

    def names(self):
        return [s.name for s in self.layout]

    def segment(self, name):
        for s in self.layout:
            if s.name == name:
                return self.values[s.start:s.stop]
        raise KeyError(name)

    def with_values(self, values):
        return ParamVector(values, self.layout, self.template)


# ─────────────────────────────────────────────────────────────
# PACK / UNPACK
# ─────────────────────────────────────────────────────────────
def _factor_names(state):
    names = [(f"q_u[{i},{j}]", state.q_u[(i, j)]) for i, j in pairs(state.D)]
    names += [(f"q_w[{d}]", q) for d, q in enumerate(state.q_w)]
    names.append(("q_v", state.q_v))
    return names


def pack(state, hypers):
    M = state.M
    pieces, layout = [], []
    offset = 0

    def add(name, vec, shape):
        nonlocal offset
        vec = torch.as_tensor(vec, dtype=DTYPE).detach().reshape(-1)
        layout.append(Segment(name, offset, offset + vec.shape[0], tuple(shape)))
        pieces.append(vec)
        offset += vec.shape[0]

    for name, q in _factor_names(state):
        S = q.S_factor.detach()
        if not bool((torch.diagonal(S) > 0).all()):
            raise LayoutMismatch(f"{name}.S has a non-positive diagonal entry")
        add(f"{name}.m", q.m, (M,))
        add(f"{name}.S", vector_from_tril(S), (tril_size(M),))
    for h in HYPER_NAMES:
        if hypers.trainable[h]:
            value = hypers.get(h)
            value = value.detach() if isinstance(value, torch.Tensor) else value
            add(f"hyper.{h}", torch.log(torch.as_tensor(value, dtype=DTYPE)), (1,))
    if hypers.trainable["Z"]:
        add("Z", state.Z.Z, tuple(state.Z.Z.shape))

    template = {"D": state.D, "M": M, "Z": state.Z.Z.detach().clone(),
                "hypers": hypers}
    values = torch.cat(pieces) if pieces else torch.zeros(0, dtype=DTYPE)
    return ParamVector(values, tuple(layout), template)


def unpack(p):
    """Rebuild (state, hypers); differentiable in p.values."""
    D, M = p.template["D"], p.template["M"]
    expected = 2 * (D * (D + 1) // 2 + D + 1)
    factor_segments = [s for s in p.layout if s.name.startswith("q_")]
    if len(factor_segments) != expected:
        raise LayoutMismatch(f"layout has {len(factor_segments)} factor segments, expected {expected}")

    def gaussian(prefix):
        m = p.segment(f"{prefix}.m")
        packed = p.segment(f"{prefix}.S")
        if m.shape[0] != M or packed.shape[0] != tril_size(M):
            raise LayoutMismatch(f"segment {prefix} does not match M={M}")
        return VariationalGaussian(m=m, S_factor=tril_from_vector(packed, M))

    base = p.template["hypers"]
    names = p.names()
    values = {h: torch.exp(p.segment(f"hyper.{h}")[0]) for h in HYPER_NAMES if f"hyper.{h}" in names}
    hypers = HyperParams(
        sigma2_err=values.get("sigma2_err", base.sigma2_err),
        theta_l=RbfKernel(values.get("theta_l.variance", base.theta_l.variance),
                          values.get("theta_l.lengthscale", base.theta_l.lengthscale)),
        theta_ell=RbfKernel(values.get("theta_ell.variance", base.theta_ell.variance),
                            values.get("theta_ell.lengthscale", base.theta_ell.lengthscale)),
        trainable=dict(base.trainable),
    )
    Z = p.segment("Z").reshape(p.template["Z"].shape) if "Z" in names else p.template["Z"]
    state = VariationalState(
        Z=InducingSet(Z),
        q_u={(i, j): gaussian(f"q_u[{i},{j}]") for i, j in pairs(D)},
        q_w=[gaussian(f"q_w[{d}]") for d in range(D)],
        q_v=gaussian("q_v"),
    )
    return state, hypers


# ─────────────────────────────────────────────────────────────
# GRADIENTS
# ─────────────────────────────────────────────────────────────
def check_gradient(p, grad):
    for s in p.layout:
        if not bool(torch.isfinite(grad[s.start:s.stop]).all()):
            raise NonFiniteError(f"non-finite gradient in segment {s.name}", segment=s.name)


def value_and_grad(loss_fn, values):
    """Evaluate loss_fn(values) and its gradient with respect to values."""
    x = torch.as_tensor(values, dtype=DTYPE).detach().clone().requires_grad_(True)
    out = loss_fn(x)
    (grad,) = torch.autograd.grad(out, x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    return float(out.detach()), grad.detach()


def seeded_elbo(dataset, batch, method, n_samples, seed, p):
    """The ELBO estimate at p with noise drawn from a generator seeded with seed."""
    state, hypers = unpack(p)
    rng = torch.Generator().manual_seed(int(seed))
    return elbo_minibatch(dataset, batch, state, hypers, method, n_samples, rng=rng)


def grad_elbo(dataset, batch, method=DEFAULT_METHOD, n_samples=DEFAULT_SAMPLES, seed=0, p=None):
    if p is None:
        raise ValueError("grad_elbo needs a ParamVector")
    value, grad = value_and_grad(
        lambda x: seeded_elbo(dataset, batch, method, n_samples, seed, p.with_values(x)).elbo,
        p.values,
    )
    if not math.isfinite(value):
        raise NonFiniteError("ELBO estimate is not finite", segment="elbo")
    check_gradient(p, grad)
    return value, grad


def finite_diff(f, p, step=FD_STEP):
    """Central differences of a scalar function of a ParamVector (or a plain vector)."""
    values = p.values if isinstance(p, ParamVector) else torch.as_tensor(p, dtype=DTYPE)
    values = values.detach()

    def call(v):
        out = f(p.with_values(v)) if isinstance(p, ParamVector) else f(v)
        return float(out)

    grad = torch.zeros_like(values)
    for i in range(values.shape[0]):
        h = step * max(1.0, abs(float(values[i])))
        up, down = values.clone(), values.clone()
        up[i] += h
        down[i] -= h
        grad[i] = (call(up) - call(down)) / (2.0 * h)
    return grad
