import numpy as np
import pytest
import torch

from data import Dataset
from kernels import RbfKernel
from model import HyperParams, InducingSet, VariationalGaussian, VariationalState, pairs
from numcore import DTYPE

ALL_TRAINABLE = {
    "sigma2_err": True,
    "theta_l.variance": True,
    "theta_l.lengthscale": True,
    "theta_ell.variance": True,
    "theta_ell.lengthscale": True,
    "Z": True,
}


def random_factor(M, g, diag_lo=0.3):
    lower = torch.tril(0.1 * torch.randn(M, M, generator=g, dtype=DTYPE), diagonal=-1)
    return lower + torch.diag(diag_lo + 0.2 * torch.rand(M, generator=g, dtype=DTYPE))


def random_gaussian(M, g):
    return VariationalGaussian(m=0.3 * torch.randn(M, generator=g, dtype=DTYPE),
                               S_factor=random_factor(M, g))


def make_state(D, M, seed=0, Z=None):
    g = torch.Generator().manual_seed(seed)
    Z = torch.linspace(0.0, 1.0, M, dtype=DTYPE).reshape(-1, 1) if Z is None else Z
    return VariationalState(
        Z=InducingSet(Z),
        q_u={ij: random_gaussian(M, g) for ij in pairs(D)},
        q_w=[random_gaussian(M, g) for _ in range(D)],
        q_v=random_gaussian(M, g),
    )


def make_hypers(trainable=None):
    return HyperParams(
        sigma2_err=0.5,
        theta_l=RbfKernel(1.2, 0.6),
        theta_ell=RbfKernel(0.5, 0.7),
        trainable=dict(ALL_TRAINABLE if trainable is None else trainable),
    )


def make_dataset(N, D, seed=0, observed=0.8):
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(0.05, 0.95, N))
    Y = rng.normal(size=(N, D))
    mask = rng.uniform(size=(N, D)) < observed
    mask[0, :] = True
    return Dataset(X, Y, mask)


@pytest.fixture
def tiny():
    """N = 8, D = 2, M = 4, P = 1 instance with every hyperparameter trainable."""
    return make_dataset(8, 2, seed=3), make_state(2, 4, seed=5), make_hypers()
