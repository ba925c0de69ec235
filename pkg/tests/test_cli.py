import numpy as np
import orjson
import pandas as pd
import pytest

from data import generate_synthetic
from errors import ConfigError
from main import apply_override, build_config, run

TINY = [
    "--set", "data.n_per_dim=6",
    "--set", "model.M=3",
    "--set", "train.epochs=1",
    "--set", "train.batch_size=4",
    "--set", "predict.n_samples=5",
    "--set", "predict.grid_size=7",
]


def read_json(path):
    return orjson.loads(path.read_bytes())


# ─── config ──────────────────────────────────────────────────
def test_override_parses_json_values():
    doc = {}
    apply_override(doc, "train.epochs=5")
    apply_override(doc, "experiment.kinds=[\"LF\"]")
    apply_override(doc, "data.train_csv=data/train.csv")
    assert doc == {"train": {"epochs": 5}, "experiment": {"kinds": ["LF"]},
                   "data": {"train_csv": "data/train.csv"}}


def test_override_needs_assignment():
    with pytest.raises(ConfigError):
        apply_override({}, "train.epochs")


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_bytes(orjson.dumps({"model": {"M": 7}, "train": {"epochs": 3}}))
    cfg = build_config(path, ["train.epochs=4"], out=str(tmp_path), seed=2)
    assert (cfg.model.M, cfg.train.epochs, cfg.seed) == (7, 4, 2)


def test_unknown_key_is_config_error(tmp_path):
    assert run(["generate", "--out", str(tmp_path), "--set", "data.bogus=1"]) == 1


def test_missing_csv_is_data_error(tmp_path):
    code = run(["generate", "--out", str(tmp_path), "--set", f"data.train_csv={tmp_path / 'absent.csv'}"])
    assert code == 2


def test_infinite_observation_is_data_error(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,y1\n0.1,1.0\n0.2,inf\n")
    code = run(["generate", "--out", str(tmp_path / "out"), "--set", f"data.train_csv={path}",
                "--set", "data.outputs=[\"y1\"]"])
    assert code == 2


# ─── commands ────────────────────────────────────────────────
def test_generate_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run(["generate", "--out", str(tmp_path / name), "--seed", "7", *TINY]) == 0
    for name in ("train.csv", "test.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = read_json(tmp_path / "a" / "manifest.json")
    assert manifest["command"] == "generate" and manifest["seed"] == 7
    assert len(manifest["config_hash"]) == 64


def test_eval_perfect_predictions(tmp_path):
    _, test = generate_synthetic("LF", 6, seed=0)
    frames = []
    for d in range(test.D):
        truth = np.nan_to_num(test.Y[:, d])
        frames.append(pd.DataFrame({"t": test.X[:, 0], "output": d, "mean": truth,
                                    "lower95": truth - 0.5, "upper95": truth + 0.5}))
    path = tmp_path / "perfect.csv"
    pd.concat(frames).to_csv(path, index=False, float_format="%.17g")

    code = run(["eval", "--out", str(tmp_path), *TINY, "--set", f"predict.predictions={path}"])
    assert code == 0
    scores = read_json(tmp_path / "metrics.json")
    assert scores["rmse"] == 0.0
    assert scores["alci"] == pytest.approx(1.0)
    assert scores["cr"] == 1.0


def test_train_predict_correlations_pipeline(tmp_path):
    out = str(tmp_path)
    for command in ("train", "predict", "eval", "correlations", "baseline"):
        assert run([command, "--out", out, *TINY]) == 0, command

    assert (tmp_path / "state.json").exists()
    trace = pd.read_csv(tmp_path / "trace.csv")
    assert len(trace) == 3                          # 12 active rows, batches of 4
    preds = pd.read_csv(tmp_path / "predictions.csv")
    assert list(preds.columns) == ["t", "output", "mean", "lower95", "upper95"]
    assert len(preds) == 2 * 12
    corr = pd.read_csv(tmp_path / "correlations.csv")
    assert len(corr) == 7 * 3
    for name in ("metrics.json", "baseline_metrics.json"):
        assert set(read_json(tmp_path / name)) == {"rmse", "alci", "cr"}


def test_eval_without_state_fails(tmp_path):
    assert run(["eval", "--out", str(tmp_path), *TINY]) == 2


def test_experiment_summary_matches_trials(tmp_path):
    args = ["experiment", "--out", str(tmp_path), *TINY,
            "--set", "experiment.kinds=[\"LF\"]",
            "--set", "experiment.seeds=2",
            "--set", "experiment.igpr_restarts=1"]
    assert run(args) == 0

    records = [read_json(tmp_path / "LF" / f"seed_{k}" / "metrics.json") for k in range(2)]
    summary = pd.read_csv(tmp_path / "summary.csv").set_index("model")
    for model in ("cnmgp", "igpr"):
        rmse = [r[model]["rmse"] for r in records]
        assert summary.loc[model, "rmse_mean"] == pytest.approx(np.mean(rmse), rel=1e-12)
        assert summary.loc[model, "rmse_std"] == pytest.approx(np.std(rmse, ddof=1), rel=1e-9)
    wins = sum(r["cnmgp"]["rmse"] < r["igpr"]["rmse"] for r in records)
    assert int(summary.loc["cnmgp", "cnmgp_wins"]) == wins
    assert (tmp_path / "LF" / "seed_1" / "trace.csv").exists()
    trial = read_json(tmp_path / "LF" / "seed_1" / "manifest.json")
    assert trial["command"] == "experiment-trial" and trial["seed"] == 1
    assert trial["result"]["cnmgp"] == records[1]["cnmgp"]
