"""
=============================================================
  cnmgp — sparse variational multi-output GP with
  input-dependent coregionalization

  RUN:
      python3 main.py generate   --set data.kind=VF --out runs/vf
      python3 main.py train      --config run.json --out runs/lf
      python3 main.py predict    --out runs/lf
      python3 main.py eval       --out runs/lf
      python3 main.py correlations --out runs/lf
      python3 main.py baseline   --out runs/lf
      python3 main.py experiment --set experiment.seeds=10 --out runs/table
      python3 main.py sweep      --set experiment.batch_sizes=[16,64,200]
      python3 main.py timing     --set experiment.timing_sizes=[2000,20000]

  FLAGS:
      --config PATH     JSON run config (see RunConfig)
      --set K=V         dotted override, value parsed as JSON (repeatable)
      --out DIR         output directory
      --seed INT        master seed
      --verbose         DEBUG logging

  ENV:
      CNMGP_THREADS     torch intra-op thread count

  OUTPUT:
      <out>/manifest.json, <out>/cnmgp.log plus the command's CSV/JSON files
=============================================================
"""

import argparse
import hashlib
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import orjson
import pandas as pd
import pydantic
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from baseline import RESTARTS, igpr_fit, igpr_intervals, igpr_predict
from data import (
    Dataset,
    describe,
    destandardize,
    generate_synthetic,
    load_csv,
    output_stats,
    save_csv,
    split,
    standardize,
    write_manifest,
)
from errors import CnmgpError, ConfigError, exit_code
from kernels import RbfKernel
from model import HyperParams, load_state, save_state
from predict import (
    PREDICT_SAMPLES,
    correlation_frame,
    correlation_track,
    evaluate,
    metrics,
    predictions_frame,
    predictive_samples,
)
from trainer import TrainConfig, default_init, initial_noise, time_steps, train

log = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────
# CONFIGURATION
# ─────────────────────────────────────────────────────────────
COMMANDS = ("generate", "train", "predict", "eval", "correlations", "baseline",
            "experiment", "sweep", "timing")
DEFAULT_OUT = "runs/default"
LOG_NAME = "cnmgp.log"
THREADS_ENV = "CNMGP_THREADS"
METRICS = ("rmse", "alci", "cr")


class KernelBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    variance: float = Field(1.0, gt=0)
    lengthscale: float = Field(1.0, gt=0)


class DataBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["LF", "HF", "VF"] = "LF"
    n_per_dim: int = Field(100, ge=1)
    noise_sd: float = Field(1.0, ge=0)
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None
    inputs: list[str] = ["t"]
    outputs: list[str] = ["y1", "y2"]
    test_fraction: float = Field(0.0, ge=0, lt=1)
    target_output: Optional[int] = None
    standardize: bool = False


class ModelBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    M: int = Field(20, ge=1)
    sigma2_err: Optional[float] = Field(None, gt=0)     # None: scaled from the training data
    theta_l: KernelBlock = KernelBlock(lengthscale=math.exp(2.0))
    theta_ell: KernelBlock = KernelBlock(lengthscale=math.exp(0.0))
    train_Z: bool = False
    trainable: dict[str, bool] = {}
    state: Optional[str] = None        # defaults to <out>/state.json


class PredictBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    n_samples: int = Field(PREDICT_SAMPLES, ge=1)
    grid_size: int = Field(101, ge=1)
    include_noise: bool = False
    predictions: Optional[str] = None  # score an existing predictions CSV in eval


class ExperimentBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kinds: list[Literal["LF", "HF", "VF"]] = ["LF", "HF", "VF"]
    seeds: int = Field(10, ge=1)
    workers: int = Field(1, ge=1)
    igpr_restarts: int = Field(RESTARTS, ge=1)
    batch_sizes: list[int] = [16, 64, 200]
    timing_sizes: list[int] = [2000, 20000]
    timing_steps: int = Field(20, ge=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    data: DataBlock = DataBlock()
    model: ModelBlock = ModelBlock()
    train: TrainConfig = TrainConfig()
    predict: PredictBlock = PredictBlock()
    experiment: ExperimentBlock = ExperimentBlock()
    out: str = DEFAULT_OUT
    seed: int = Field(0, ge=0)


@dataclass(frozen=True)
class DataBundle:
    train: Dataset
    test: Optional[Dataset]


# ─────────────────────────────────────────────────────────────
# CONFIG LOADING
# ─────────────────────────────────────────────────────────────
def parse_value(text):
    try:
        return orjson.loads(text)
    except orjson.JSONDecodeError:
        return text


def apply_override(doc, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {part!r} is not a block")
    node[parts[-1]] = parse_value(text)


def build_config(config_path=None, overrides=(), out=None, seed=None):
    doc = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = orjson.loads(path.read_bytes())
        except orjson.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    for assignment in overrides:
        apply_override(doc, assignment)
    if out is not None:
        doc["out"] = out
    if seed is not None:
        doc["seed"] = seed
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"invalid config:\n{e}") from None


def config_hash(cfg):
    blob = orjson.dumps(cfg.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS)
    return hashlib.sha256(blob).hexdigest()


def versions():
    return {
        "python": platform.python_version(),
        "torch": str(torch.__version__),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
        "orjson": orjson.__version__,
    }


def write_run_manifest(out, command, cfg, start, result):
    write_manifest(Path(out) / "manifest.json", {
        "command": command,
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": versions(),
        "wall_seconds": time.perf_counter() - start,
        "result": result,
    })


# ─────────────────────────────────────────────────────────────
# HELPERS
# ─────────────────────────────────────────────────────────────
def setup_logging(out, verbose=False):
    Path(out).mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        handlers=[
            logging.FileHandler(Path(out) / LOG_NAME, encoding="utf-8"),
            logging.StreamHandler(),
        ],
    )


def configure_threads():
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {threads!r}") from None


def load_data(cfg, seed=None):
    """Train/test pair for the data block; test may be None for CSV input without a split."""
    block = cfg.data
    seed = cfg.seed if seed is None else seed
    if block.train_csv:
        train_ds = load_csv(block.train_csv, block.inputs, block.outputs)
        test_ds = load_csv(block.test_csv, block.inputs, block.outputs) if block.test_csv else None
        if block.test_fraction > 0:
            train_ds, test_ds = split(train_ds, block.test_fraction, seed, block.target_output)
    else:
        train_ds, test_ds = generate_synthetic(block.kind, block.n_per_dim, block.noise_sd, seed)
    if block.standardize:
        stats = output_stats(train_ds)
        train_ds = standardize(train_ds, stats)
        test_ds = standardize(test_ds, stats) if test_ds is not None else None
    return DataBundle(train_ds, test_ds)


def original_units(ds):
    if not ds.meta.get("standardization"):
        return ds
    Y = np.stack([destandardize(ds.Y[:, d], ds, d) for d in range(ds.D)], axis=1)
    return Dataset(ds.X, Y, ds.mask, {**ds.meta, "standardization": None})


def rescale_predictions(preds, ref):
    if not ref.meta.get("standardization"):
        return preds

    def back(a):
        return np.stack([destandardize(a[..., d], ref, d) for d in range(a.shape[-1])], axis=-1)

    return replace(preds, draws=back(preds.draws), mean=back(preds.mean),
                   lower=back(preds.lower), upper=back(preds.upper))


def build_hypers(cfg, train_ds):
    m = cfg.model
    sigma2 = m.sigma2_err if m.sigma2_err is not None else initial_noise(train_ds)
    return HyperParams(
        sigma2_err=sigma2,
        theta_l=RbfKernel(m.theta_l.variance, m.theta_l.lengthscale),
        theta_ell=RbfKernel(m.theta_ell.variance, m.theta_ell.lengthscale),
        trainable={**m.trainable, "Z": m.train_Z},
    )


def state_path(cfg):
    return Path(cfg.model.state) if cfg.model.state else Path(cfg.out) / "state.json"


def grid_for(ds, size):
    if ds.P != 1:
        return ds.X
    lo, hi = float(ds.X[ds.active_rows()].min()), float(ds.X[ds.active_rows()].max())
    return np.linspace(lo, hi, size).reshape(-1, 1)


def generator(seed):
    return torch.Generator().manual_seed(int(seed))


def require_test(bundle):
    if bundle.test is None:
        raise ConfigError("this command needs a test set (data.test_csv or data.test_fraction)")
    return bundle.test


# ─────────────────────────────────────────────────────────────
# COMMANDS
# ─────────────────────────────────────────────────────────────
def cmd_generate(cfg):
    bundle = load_data(cfg)
    out = Path(cfg.out)
    save_csv(original_units(bundle.train), out / "train.csv")
    if bundle.test is not None:
        save_csv(original_units(bundle.test), out / "test.csv")
    write_manifest(out / "data_manifest.json", {
        "data": cfg.data.model_dump(mode="json"),
        "seed": cfg.seed,
        "generation": bundle.train.meta.get("generation"),
    })
    describe(bundle.train)
    return {"train_rows": bundle.train.N, "train_observed": bundle.train.n_observed}


def cmd_train(cfg):
    bundle = load_data(cfg)
    hypers = build_hypers(cfg, bundle.train)
    init = default_init(bundle.train, cfg.model.M, hypers)
    train_cfg = cfg.train.model_copy(update={"seed": cfg.seed})
    state, hypers, trace = train(bundle.train, init, hypers, train_cfg,
                                 test=bundle.test, out_dir=cfg.out)
    save_state(state_path(cfg), state, hypers)
    final = trace.records[-1]["elbo"] if trace.records else float("nan")
    log.info(f"Saved state -> {state_path(cfg)}")
    return {"steps": len(trace.records), "final_elbo": final}


def _predict_at(cfg, x_star, seed_offset=0):
    state, hypers = load_state(state_path(cfg))
    return predictive_samples(state, hypers, x_star, cfg.predict.n_samples,
                              generator(cfg.seed + seed_offset), cfg.predict.include_noise)


def cmd_predict(cfg):
    bundle = load_data(cfg)
    x_star = bundle.test.X if bundle.test is not None else grid_for(bundle.train, cfg.predict.grid_size)
    preds = rescale_predictions(_predict_at(cfg, x_star), bundle.train)
    path = Path(cfg.out) / "predictions.csv"
    predictions_frame(preds, bundle.train.meta["inputs"]).to_csv(path, index=False, float_format="%.17g")
    log.info(f"Saved {len(x_star)} prediction points -> {path}")
    return {"points": len(x_star)}


def score_predictions_csv(test, path):
    """Metrics for a predictions CSV laid out by predictions_frame at test.X."""
    frame = pd.read_csv(path, float_precision="round_trip")
    y, mean, lower, upper = [], [], [], []
    for d in range(test.D):
        part = frame[frame["output"] == d].reset_index(drop=True)
        if len(part) != test.N:
            raise ConfigError(f"{path}: output {d} has {len(part)} rows, test set has {test.N}")
        rows = test.mask[:, d]
        y.append(test.Y[rows, d])
        mean.append(part["mean"].to_numpy()[rows])
        lower.append(part["lower95"].to_numpy()[rows])
        upper.append(part["upper95"].to_numpy()[rows])
    return metrics(np.concatenate(y), np.concatenate(mean), np.concatenate(lower), np.concatenate(upper))


def cmd_eval(cfg):
    bundle = load_data(cfg)
    test = original_units(require_test(bundle))
    if cfg.predict.predictions:
        scores = score_predictions_csv(test, cfg.predict.predictions)
    else:
        preds = rescale_predictions(_predict_at(cfg, test.X), bundle.train)
        scores = evaluate(test, preds)
    write_manifest(Path(cfg.out) / "metrics.json", scores)
    print_metrics("CNMGP TEST METRICS", {"cnmgp": scores})
    return scores


def cmd_correlations(cfg):
    bundle = load_data(cfg)
    state, hypers = load_state(state_path(cfg))
    grid = grid_for(bundle.train, cfg.predict.grid_size)
    track = correlation_track(state, hypers, grid, cfg.predict.n_samples, generator(cfg.seed))
    path = Path(cfg.out) / "correlations.csv"
    correlation_frame(track, bundle.train.meta["inputs"]).to_csv(path, index=False, float_format="%.17g")
    log.info(f"Saved correlation track ({len(grid)} points) -> {path}")
    return {"points": len(grid)}


def igpr_scores(train_ds, test, restarts, seed):
    model = igpr_fit(train_ds, restarts, seed)
    mean, lower, upper = igpr_intervals(igpr_predict(model, train_ds, test.X))
    ref = train_ds
    if ref.meta.get("standardization"):
        mean, lower, upper = (np.stack([destandardize(a[:, d], ref, d) for d in range(a.shape[1])], axis=1)
                              for a in (mean, lower, upper))
    test = original_units(test)
    m = test.mask
    return metrics(test.Y[m], mean[m], lower[m], upper[m])


def cmd_baseline(cfg):
    bundle = load_data(cfg)
    scores = igpr_scores(bundle.train, require_test(bundle), cfg.experiment.igpr_restarts, cfg.seed)
    write_manifest(Path(cfg.out) / "baseline_metrics.json", scores)
    print_metrics("IGPR TEST METRICS", {"igpr": scores})
    return scores


def run_trial(cfg_doc, kind, seed):
    """One (scenario, seed) trial of CNMGP and IGPR; writes its own directory."""
    cfg = RunConfig.model_validate(cfg_doc)
    cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"kind": kind}), "seed": seed})
    out = Path(cfg.out) / kind / f"seed_{seed}"
    bundle = load_data(cfg)
    test = require_test(bundle)
    hypers = build_hypers(cfg, bundle.train)
    init = default_init(bundle.train, cfg.model.M, hypers)
    train_cfg = cfg.train.model_copy(update={"seed": seed})
    start = time.perf_counter()
    state, hypers, _ = train(bundle.train, init, hypers, train_cfg, test=test, out_dir=out)
    train_seconds = time.perf_counter() - start
    save_state(out / "state.json", state, hypers)

    preds = predictive_samples(state, hypers, test.X, cfg.predict.n_samples, generator(seed),
                               cfg.predict.include_noise)
    cnmgp = evaluate(original_units(test), rescale_predictions(preds, bundle.train))
    igpr = igpr_scores(bundle.train, test, cfg.experiment.igpr_restarts, seed)

    grid = grid_for(bundle.train, cfg.predict.grid_size)
    track = correlation_track(state, hypers, grid, cfg.predict.n_samples, generator(seed + 1))
    correlation_frame(track, bundle.train.meta["inputs"]).to_csv(
        out / "correlations.csv", index=False, float_format="%.17g")

    record = {"kind": kind, "seed": seed, "cnmgp": cnmgp, "igpr": igpr,
              "train_seconds": train_seconds}
    write_manifest(out / "metrics.json", record)
    write_run_manifest(out, "experiment-trial", cfg, start, record)
    log.info(f"{kind} seed {seed}: CNMGP rmse={cnmgp['rmse']:.3f}  IGPR rmse={igpr['rmse']:.3f}")
    return record


def summarize(records):
    rows = []
    for r in records:
        for model in ("cnmgp", "igpr"):
            rows.append({"kind": r["kind"], "model": model, "seed": r["seed"], **r[model]})
    frame = pd.DataFrame(rows)
    summary = frame.groupby(["kind", "model"])[list(METRICS)].agg(["mean", "std"])
    summary.columns = [f"{m}_{s}" for m, s in summary.columns]
    summary = summary.reset_index()
    wins = {}
    for kind, part in frame.groupby("kind"):
        pivot = part.pivot(index="seed", columns="model", values="rmse")
        wins[kind] = int((pivot["cnmgp"] < pivot["igpr"]).sum())
    summary["cnmgp_wins"] = summary["kind"].map(wins)
    return summary


def cmd_experiment(cfg):
    doc = cfg.model_dump(mode="json")
    jobs = [(kind, seed) for kind in cfg.experiment.kinds
            for seed in range(cfg.seed, cfg.seed + cfg.experiment.seeds)]
    log.info(f"Experiment: {len(jobs)} trials on {cfg.experiment.workers} worker(s)")
    if cfg.experiment.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.experiment.workers) as pool:
            records = list(pool.map(run_trial, [doc] * len(jobs), *zip(*jobs)))
    else:
        records = [run_trial(doc, kind, seed) for kind, seed in jobs]

    summary = summarize(records)
    out = Path(cfg.out)
    summary.to_csv(out / "summary.csv", index=False, float_format="%.17g")
    write_manifest(out / "summary.json", summary.to_dict(orient="records"))
    print_summary(summary)
    return {"trials": len(records)}


def cmd_sweep(cfg):
    bundle = load_data(cfg)
    test = require_test(bundle)
    hypers = build_hypers(cfg, bundle.train)
    eval_every = cfg.train.eval_every or 10
    frames = []
    for batch_size in cfg.experiment.batch_sizes:
        train_cfg = cfg.train.model_copy(update={"seed": cfg.seed, "batch_size": batch_size,
                                                 "eval_every": eval_every})
        init = default_init(bundle.train, cfg.model.M, hypers)
        _, _, trace = train(bundle.train, init, hypers, train_cfg, test=test,
                            out_dir=Path(cfg.out) / f"bs_{batch_size}")
        frame = trace.to_frame().dropna(subset=["test_rmse"])
        frame.insert(0, "batch_size", batch_size)
        frames.append(frame)
        log.info(f"batch_size={batch_size}: {len(trace.records)} steps, "
                 f"last test rmse {frame['test_rmse'].iloc[-1] if len(frame) else float('nan'):.3f}")
    sweep = pd.concat(frames, ignore_index=True)
    sweep.to_csv(Path(cfg.out) / "sweep.csv", index=False, float_format="%.17g")
    return {"curves": len(frames)}


def cmd_timing(cfg):
    rows = []
    for n in cfg.experiment.timing_sizes:
        train_ds, test_ds = generate_synthetic(cfg.data.kind, max(1, n // 2), cfg.data.noise_sd, cfg.seed)
        hypers = build_hypers(cfg, train_ds)
        init = default_init(train_ds, cfg.model.M, hypers)
        durations = time_steps(train_ds, init, hypers, cfg.train, cfg.experiment.timing_steps)
        median = float(np.median(durations))
        steps_per_epoch = math.ceil(len(train_ds.active_rows()) / cfg.train.batch_size)
        start = time.perf_counter()
        predictive_samples(init, hypers, test_ds.X, cfg.predict.n_samples, generator(cfg.seed))
        rows.append({"n": train_ds.N, "batch_size": cfg.train.batch_size, "M": cfg.model.M,
                     "D": train_ds.D, "median_step_seconds": median,
                     "epoch_seconds": median * steps_per_epoch,
                     "predict_seconds": time.perf_counter() - start})
        log.info(f"N={train_ds.N}: median step {median * 1e3:.2f} ms")
    frame = pd.DataFrame(rows)
    frame.to_csv(Path(cfg.out) / "timing.csv", index=False, float_format="%.17g")
    print(f"\n{'=' * 58}\n  TIMING\n{'=' * 58}")
    for r in rows:
        print(f"  N={r['n']:>7}  step {r['median_step_seconds'] * 1e3:8.2f} ms  "
              f"epoch {r['epoch_seconds']:8.2f} s  predict {r['predict_seconds']:6.2f} s")
    print(f"{'=' * 58}")
    return {"sizes": len(rows)}


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "correlations": cmd_correlations,
    "baseline": cmd_baseline,
    "experiment": cmd_experiment,
    "sweep": cmd_sweep,
    "timing": cmd_timing,
}


# ─────────────────────────────────────────────────────────────
# REPORTS
# ─────────────────────────────────────────────────────────────
def print_metrics(title, results):
    print(f"\n{'=' * 58}\n  {title}\n{'=' * 58}")
    for model, s in results.items():
        print(f"  {model:6}  RMSE {s['rmse']:7.3f}   ALCI {s['alci']:7.3f}   CR {s['cr']:6.3f}")
    print(f"{'=' * 58}")


def print_summary(summary):
    print(f"\n{'=' * 58}\n  PREDICTION SUMMARY (mean (sd) over seeds)\n{'=' * 58}")
    for _, r in summary.iterrows():
        print(f"  {r['kind']:3} {r['model']:6}  "
              f"RMSE {r['rmse_mean']:5.2f}({r['rmse_std']:.2f})  "
              f"ALCI {r['alci_mean']:5.2f}({r['alci_std']:.2f})  "
              f"CR {r['cr_mean']:5.3f}({r['cr_std']:.3f})")
    print(f"{'=' * 58}")


# ─────────────────────────────────────────────────────────────
# MAIN
# ─────────────────────────────────────────────────────────────
def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="cnmgp command-line interface")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config")
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    parser.add_argument("--out")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--verbose", action="store_true")
    return parser.parse_args(argv)


def run(argv=None):
    args = parse_args(argv)
    start = time.perf_counter()
    try:
        cfg = build_config(args.config, args.overrides, args.out, args.seed)
        setup_logging(cfg.out, args.verbose)
        configure_threads()
        log.info(f"cnmgp {args.command} -> {cfg.out}")
        result = HANDLERS[args.command](cfg)
        write_run_manifest(Path(cfg.out), args.command, cfg, start, result)
    except (CnmgpError, FileNotFoundError, ValueError) as e:
        code = exit_code(e)
        log.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return code
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
