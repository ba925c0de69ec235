import numpy as np
import pandas as pd
import pytest

from main import RunConfig, run_trial

LF_SEEDS = range(10)
VF_SEEDS = range(3)


def _trials(root, kind, seeds):
    cfg = RunConfig(out=str(root)).model_dump(mode="json")
    records = [run_trial(cfg, kind, seed) for seed in seeds]
    corr = pd.concat(
        pd.read_csv(root / kind / f"seed_{seed}" / "correlations.csv").assign(seed=seed)
        for seed in seeds
    )
    return records, corr.query("i == 1 and j == 0")


@pytest.fixture(scope="module")
def lf_runs(tmp_path_factory):
    return _trials(tmp_path_factory.mktemp("lf"), "LF", LF_SEEDS)


@pytest.fixture(scope="module")
def vf_runs(tmp_path_factory):
    return _trials(tmp_path_factory.mktemp("vf"), "VF", VF_SEEDS)


def _window_mean(frame, column, lo, hi):
    return float(frame.loc[frame["t"].between(lo, hi), column].mean())


@pytest.mark.slow
def test_lf_accuracy_and_coverage(lf_runs):
    records, _ = lf_runs
    assert float(np.mean([r["cnmgp"]["rmse"] for r in records])) <= 1.4
    assert 0.80 <= float(np.mean([r["cnmgp"]["cr"] for r in records])) <= 0.97


@pytest.mark.slow
def test_lf_beats_independent_gps(lf_runs):
    records, _ = lf_runs
    wins = sum(r["cnmgp"]["rmse"] < r["igpr"]["rmse"] for r in records)
    assert wins >= 9


@pytest.mark.slow
def test_lf_correlation_changes_sign(lf_runs):
    _, corr = lf_runs
    assert _window_mean(corr, "corr", 0.0, 0.2) > 0
    assert _window_mean(corr, "corr", 0.8, 1.0) < 0


@pytest.mark.slow
def test_vf_correlation_changes_sign(vf_runs):
    _, corr = vf_runs
    assert _window_mean(corr, "corr", 0.0, 0.2) > 0
    assert _window_mean(corr, "corr", 0.8, 1.0) < 0


@pytest.mark.slow
def test_vf_lengthscale_shrinks_along_t(vf_runs):
    _, corr = vf_runs
    early = _window_mean(corr, "log_lengthscale", 0.0, 0.3)
    late = _window_mean(corr, "log_lengthscale", 0.7, 1.0)
    assert early > late
