"""
trainer.py — Doubly stochastic ELBO maximization with Adam
==========================================================
Each epoch shuffles the rows that carry at least one observed entry, walks
them in batches of cfg.batch_size and takes one Adam step per batch on the
flat parameter vector from diff.pack(). Latent noise for step k comes from a
generator seeded with (cfg.seed, k), so any single step can be replayed.

Outputs (when out_dir is given):
    <out>/trace.csv                     step, epoch, elbo, grad_norm, seconds, test_rmse
    <out>/checkpoints/step_<k>.json     every cfg.checkpoint_every steps
    <out>/checkpoints/abort.json        last good parameters if a step goes non-finite
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator

from diff import check_gradient, pack, unpack
from elbo import DEFAULT_METHOD, elbo_minibatch
from errors import NoObservedEntries, NonFiniteError
from model import (
    InducingSet,
    StationaryCovariance,
    VariationalGaussian,
    VariationalState,
    pairs,
    save_state,
)
from numcore import BASE_JITTER, DTYPE, cholesky_jittered
from predict import predictive_mean, rmse_against

log = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────
# CONFIGURATION
# ─────────────────────────────────────────────────────────────
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
INIT_FACTOR_SCALE = 0.1
INIT_NOISE_FRACTION = 0.1
ELBO_LIMIT_PER_ENTRY = 1e6     # |elbo| beyond this x n_observed counts as diverged
GRAD_NORM_LIMIT = 1e12
LOG_EVERY_EPOCHS = 100
TRACE_COLUMNS = ["step", "epoch", "elbo", "grad_norm", "seconds", "test_rmse"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(2000, ge=0)
    batch_size: int = Field(200, ge=1)
    learning_rate: float = Field(0.005, gt=0)
    n_samples: int = Field(1, ge=1)
    method: Literal["direct", "marginalized"] = DEFAULT_METHOD
    seed: int = Field(0, ge=0)
    adam_betas: tuple[float, float] = ADAM_BETAS
    adam_eps: float = Field(ADAM_EPS, gt=0)
    checkpoint_every: int = Field(0, ge=0)     # 0 disables periodic checkpoints
    eval_every: int = Field(0, ge=0)           # 0 disables test_rmse tracing
    eval_samples: int = Field(50, ge=1)

    @field_validator("adam_betas")
    @classmethod
    def betas_in_unit_interval(cls, v):
        if not all(0.0 < b < 1.0 for b in v):
            raise ValueError(f"adam betas must lie in (0, 1), got {v}")
        return v


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    final_state: object = None
    final_hypers: object = None

    def append(self, **row):
        if self.records and row["step"] <= self.records[-1]["step"]:
            raise ValueError("trace steps must increase")
        self.records.append(row)

    def to_frame(self):
        return pd.DataFrame(self.records, columns=TRACE_COLUMNS)

    def save_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        log.info(f"Saved trace ({len(self.records)} steps) -> {path}")


# ─────────────────────────────────────────────────────────────
# INITIALIZATION
# ─────────────────────────────────────────────────────────────
def inducing_inputs(dataset, M):
    """M equispaced points over the observed input range (P = 1), or M evenly
    spaced rows of the sorted distinct observed inputs (P > 1)."""
    X = dataset.X[dataset.active_rows()]
    if len(X) == 0:
        raise NoObservedEntries("dataset has no observed entries")
    if dataset.P == 1:
        return torch.linspace(float(X.min()), float(X.max()), M, dtype=DTYPE).reshape(-1, 1)
    distinct = np.unique(X, axis=0)
    if M > len(distinct):
        raise ValueError(f"M={M} exceeds the {len(distinct)} distinct observed inputs")
    pick = np.round(np.linspace(0, len(distinct) - 1, M)).astype(int)
    return torch.as_tensor(distinct[pick], dtype=DTYPE)


def _shrunk_prior(M):
    # whitened coordinates: S = 0.1 I here is S = 0.1 chol(K) for u itself
    return VariationalGaussian(m=torch.zeros(M, dtype=DTYPE),
                               S_factor=INIT_FACTOR_SCALE * torch.eye(M, dtype=DTYPE))


def default_init(dataset, M, hypers):
    """Equispaced Z and whitened factors at zero mean, shrunk prior spread.

    The K^l and K^ell priors are factored once here so a bad kernel setting
    fails before the first step.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    Z = inducing_inputs(dataset, M)
    with torch.no_grad():
        for k in (hypers.theta_l, hypers.theta_ell):
            cholesky_jittered(StationaryCovariance(k).gram(Z), BASE_JITTER)
    return VariationalState(
        Z=InducingSet(Z),
        q_u={ij: _shrunk_prior(M) for ij in pairs(dataset.D)},
        q_w=[_shrunk_prior(M) for _ in range(dataset.D)],
        q_v=_shrunk_prior(M),
    )


def initial_noise(dataset, fraction=INIT_NOISE_FRACTION):
    """fraction x the mean per-output variance of the observed entries."""
    variances = [float(pd.Series(dataset.observed(d)).var()) for d in range(dataset.D)
                 if dataset.mask[:, d].sum() >= 2]
    pooled = float(np.mean(variances)) if variances else 0.0
    if not pooled > 0:
        return 1.0
    return fraction * pooled


# ─────────────────────────────────────────────────────────────
# HELPERS
# ─────────────────────────────────────────────────────────────
def step_generator(seed, step):
    state = np.random.SeedSequence([seed, step]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def epoch_batches(n_rows, batch_size, generator):
    perm = torch.randperm(n_rows, generator=generator)
    return [chunk.numpy() for chunk in perm.split(batch_size)]


def make_optimizer(values, cfg):
    params = values.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([params], lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)
    return params, opt


def adam_step(dataset, rows, layout_p, params, opt, cfg, step):
    """One ascent step; returns (elbo, grad_norm) measured before the update."""
    opt.zero_grad()
    state, hypers = unpack(layout_p.with_values(params))
    br = elbo_minibatch(dataset, rows, state, hypers, cfg.method, cfg.n_samples,
                        rng=step_generator(cfg.seed, step))
    value = float(br.elbo.detach())
    if not math.isfinite(value):
        raise NonFiniteError(f"ELBO estimate is not finite at step {step}", segment="elbo")
    if abs(value) > ELBO_LIMIT_PER_ENTRY * max(1, dataset.n_observed):
        raise NonFiniteError(f"ELBO estimate {value:.3e} diverged at step {step}", segment="elbo")
    (-br.elbo).backward()
    check_gradient(layout_p, params.grad)
    grad_norm = float(params.grad.norm())
    if grad_norm > GRAD_NORM_LIMIT:
        raise NonFiniteError(f"gradient norm {grad_norm:.3e} diverged at step {step}", segment="gradient")
    opt.step()
    return value, grad_norm


def _checkpoint(out_dir, name, layout_p, values):
    if out_dir is None:
        return
    state, hypers = unpack(layout_p.with_values(values.detach().clone()))
    save_state(Path(out_dir) / "checkpoints" / f"{name}.json", state, hypers)


# ─────────────────────────────────────────────────────────────
# MAIN LOOP
# ─────────────────────────────────────────────────────────────
def train(dataset, init_state, hypers, cfg, test=None, out_dir=None):
    """Maximize the ELBO; returns (state, hypers, TrainTrace)."""
    if dataset.n_observed == 0:
        raise NoObservedEntries("cannot train on a dataset with no observed entries")
    active = dataset.active_rows()
    trace = TrainTrace()
    layout_p = pack(init_state, hypers)
    params, opt = make_optimizer(layout_p.values, cfg)
    shuffle = torch.Generator().manual_seed(cfg.seed)
    steps_per_epoch = math.ceil(len(active) / cfg.batch_size)
    log.info(f"Training: {cfg.epochs} epochs x {steps_per_epoch} steps, "
             f"{len(layout_p)} parameters, method={cfg.method}, S={cfg.n_samples}")

    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        for chunk in epoch_batches(len(active), cfg.batch_size, shuffle):
            last_good = params.detach().clone()
            try:
                value, grad_norm = adam_step(dataset, active[chunk], layout_p, params, opt, cfg, step)
            except NonFiniteError:
                _checkpoint(out_dir, "abort", layout_p, last_good)
                log.error(f"Aborted at step {step} (epoch {epoch}); last good parameters kept")
                raise

            test_rmse = float("nan")
            if test is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                with torch.no_grad():
                    state, hyp = unpack(layout_p.with_values(params.detach().clone()))
                    means = predictive_mean(state, hyp, test.X, cfg.eval_samples,
                                            step_generator(cfg.seed + 1, step))
                test_rmse = rmse_against(test, means)

            trace.append(step=step, epoch=epoch, elbo=value, grad_norm=grad_norm,
                         seconds=time.perf_counter() - start, test_rmse=test_rmse)
            step += 1
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _checkpoint(out_dir, f"step_{step}", layout_p, params)

        if (epoch + 1) % LOG_EVERY_EPOCHS == 0 or epoch + 1 == cfg.epochs:
            log.info(f"Epoch {epoch + 1}/{cfg.epochs}  elbo={trace.records[-1]['elbo']:.3f}")

    if step == 0:
        final_state, final_hypers = init_state, hypers
    else:
        final_state, final_hypers = unpack(layout_p.with_values(params.detach().clone()))
    trace.final_state, trace.final_hypers = final_state, final_hypers
    if out_dir is not None:
        trace.save_csv(Path(out_dir) / "trace.csv")
    log.info(f"Training done: {step} steps in {time.perf_counter() - start:.1f}s")
    return final_state, final_hypers, trace


def time_steps(dataset, state, hypers, cfg, n_steps):
    """Wall time of n_steps consecutive Adam steps (seconds each)."""
    active = dataset.active_rows()
    layout_p = pack(state, hypers)
    params, opt = make_optimizer(layout_p.values, cfg)
    shuffle = torch.Generator().manual_seed(cfg.seed)
    durations, batches = [], []
    for step in range(n_steps):
        if not batches:
            batches = epoch_batches(len(active), cfg.batch_size, shuffle)
        rows = active[batches.pop(0)]
        t0 = time.perf_counter()
        adam_step(dataset, rows, layout_p, params, opt, cfg, step)
        durations.append(time.perf_counter() - t0)
    return durations
