import numpy as np
import pytest
import torch

from baseline import (
    IgprModel,
    igpr_fit,
    igpr_intervals,
    igpr_output,
    igpr_predict,
    log_marginal_likelihood,
)
from data import Dataset, generate_synthetic
from errors import DegenerateOutput
from kernels import RbfKernel, rbf_matrix
from numcore import DTYPE
from predict import metrics


def one_output_model(X, kernel, noise):
    return IgprModel((igpr_output(X, kernel, noise),), seed=0)


def test_interpolates_training_points_with_small_noise():
    X = np.linspace(0, 1, 8)
    y = np.sin(2 * np.pi * X)
    ds = Dataset(X, y)
    model = one_output_model(X, RbfKernel(1.0, 0.2), 1e-8)
    mean, var = igpr_predict(model, ds, X)[0]
    np.testing.assert_allclose(mean, y, atol=1e-4)
    assert np.all(var < 1e-4)


def test_far_field_reverts_to_prior():
    X = np.linspace(0, 1, 6)
    ds = Dataset(X, np.cos(X))
    model = one_output_model(X, RbfKernel(1.7, 0.3), 0.05)
    mean, var = igpr_predict(model, ds, np.array([100.0]))[0]
    assert abs(mean[0]) <= 1e-12
    assert var[0] == pytest.approx(1.7 + 0.05)


def test_variance_never_below_noise():
    X = np.linspace(0, 1, 10)
    ds = Dataset(X, np.sin(X))
    model = one_output_model(X, RbfKernel(1.0, 0.5), 0.01)
    _, var = igpr_predict(model, ds, np.linspace(-0.5, 1.5, 40))[0]
    assert np.all(var >= 0.01)


def test_log_marginal_likelihood_matches_dense_formula():
    X = torch.linspace(0, 1, 5, dtype=DTYPE).reshape(-1, 1)
    y = torch.tensor([0.1, -0.4, 0.3, 0.9, -0.2], dtype=DTYPE)
    log_params = torch.log(torch.tensor([1.3, 0.4, 0.2], dtype=DTYPE))
    K = rbf_matrix(X, X, RbfKernel(1.3, 0.4)) + 0.2 * torch.eye(5, dtype=DTYPE)
    expected = torch.distributions.MultivariateNormal(torch.zeros(5, dtype=DTYPE), K).log_prob(y)
    assert float(log_marginal_likelihood(X, y, log_params)) == pytest.approx(float(expected), rel=1e-10)


def small_dataset(seed=0):
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(0, 1, 30))
    Y = np.column_stack([np.sin(6 * X), np.cos(3 * X)]) + 0.1 * rng.standard_normal((30, 2))
    mask = np.ones((30, 2), dtype=bool)
    mask[:10, 1] = False
    return Dataset(X, Y, mask)


def test_fit_is_seeded():
    ds = small_dataset()
    a = igpr_fit(ds, restarts=2, seed=3, iterations=30)
    b = igpr_fit(ds, restarts=2, seed=3, iterations=30)
    for fa, fb in zip(a.outputs, b.outputs):
        assert (fa.kernel, fa.noise, fa.log_ml) == (fb.kernel, fb.noise, fb.log_ml)


def test_restarts_never_lose_ground():
    model = igpr_fit(small_dataset(1), restarts=3, seed=0, iterations=40)
    for fit in model.outputs:
        assert all(best >= start for best, start in zip(fit.restart_best, fit.initial_log_ml))
        assert fit.log_ml == max(fit.restart_best)
        assert fit.noise > 0


def test_each_output_uses_only_its_entries():
    ds = small_dataset(2)
    model = igpr_fit(ds, restarts=1, seed=0, iterations=20)
    assert model.D == 2
    assert model.outputs[1].chol.L.shape == (20, 20)


def test_single_observation_is_degenerate():
    ds = Dataset(np.arange(3.0), np.arange(3.0), np.array([[True], [False], [False]]))
    with pytest.raises(DegenerateOutput):
        igpr_fit(ds, restarts=1, iterations=5)


def test_intervals_are_symmetric():
    preds = [(np.array([0.0, 1.0]), np.array([1.0, 4.0])), (np.array([2.0, 2.0]), np.array([0.25, 0.25]))]
    mean, lower, upper = igpr_intervals(preds)
    assert mean.shape == (2, 2)
    np.testing.assert_allclose(upper - mean, mean - lower)
    assert upper[1, 0] - lower[1, 0] == pytest.approx(2 * 1.959963984540054 * 2.0)


@pytest.mark.slow
def test_noise_recovered_from_known_gp():
    g = torch.Generator().manual_seed(0)
    X = torch.rand(200, 1, generator=g, dtype=DTYPE)
    K = rbf_matrix(X, X, RbfKernel(1.0, 0.2)) + 0.1 * torch.eye(200, dtype=DTYPE)
    y = torch.linalg.cholesky(K) @ torch.randn(200, generator=g, dtype=DTYPE)
    model = igpr_fit(Dataset(X.numpy(), y.numpy()), restarts=3, seed=0)
    assert model.outputs[0].noise == pytest.approx(0.1, rel=0.5)


@pytest.mark.slow
def test_lf_rmse_in_reference_band():
    scores = []
    for seed in range(3):
        train, test = generate_synthetic("LF", seed=seed)
        model = igpr_fit(train, seed=seed)
        mean, lower, upper = igpr_intervals(igpr_predict(model, train, test.X))
        scores.append(metrics(test.Y[test.mask], mean[test.mask], lower[test.mask], upper[test.mask])["rmse"])
    # unit noise plus mean reversion on the masked fifth of test points
    assert 1.5 <= float(np.mean(scores)) <= 2.1
