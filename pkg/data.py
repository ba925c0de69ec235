"""
data.py — Datasets with per-entry missingness: synthesis, CSV I/O, scaling, splits
==================================================================================
A Dataset is N rows of P inputs and D outputs with a boolean mask marking
which (row, output) entries were observed. Unobserved Y entries hold NaN and
are never read by the model code (it always goes through the mask).

Run:
    python3 data.py LF                 # generate LF train/test CSVs into ./data
    python3 data.py VF --n 100 --seed 3 --out data/
    python3 data.py --inspect my.csv --inputs t --outputs y1,y2
"""

import argparse
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import orjson
import pandas as pd
import torch

from errors import DegenerateOutput, NoObservedEntries, ParseError
from numcore import DTYPE

log = logging.getLogger(__name__)

# ─────────────────────────────────────────────────────────────
# CONFIGURATION
# ─────────────────────────────────────────────────────────────
# (frequency w, smoothness exponent s)
SCENARIOS = {
    "LF": (2.0, 1.0),
    "HF": (5.0, 1.0),
    "VF": (5.0, 2.0),
}
AMPLITUDE = 5.0
TRAIN_INTERVALS = ((0.0, 0.8), (0.2, 1.0))   # output 1 observed on the first, output 2 on the second
TEST_INTERVAL = (0.0, 1.0)
N_PER_DIM = 100
NOISE_SD = 1.0
MISSING_TOKENS = {"", "nan", "NaN"}
FLOAT_FORMAT = "%.17g"


# ─────────────────────────────────────────────────────────────
# DATASET
# ─────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        Y = np.asarray(self.Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        mask = np.ones(Y.shape, dtype=bool) if self.mask is None else np.array(self.mask, dtype=bool)
        if X.shape[0] != Y.shape[0] or Y.shape != mask.shape:
            raise ValueError(f"inconsistent shapes X{X.shape} Y{Y.shape} mask{mask.shape}")
        if not np.isfinite(Y[mask]).all():
            raise ValueError("observed outputs must be finite")
        Y = Y.copy()
        Y[~mask] = np.nan
        for arr in (X, Y, mask):
            arr.setflags(write=False)
        meta = dict(self.meta)
        meta.setdefault("inputs", [f"x{p}" for p in range(X.shape[1])])
        meta.setdefault("outputs", [f"y{d + 1}" for d in range(Y.shape[1])])
        meta.setdefault("standardization", None)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "meta", meta)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def P(self):
        return self.X.shape[1]

    @property
    def D(self):
        return self.Y.shape[1]

    @property
    def n_observed(self):
        return int(self.mask.sum())

    def active_rows(self):
        """Indices of rows with at least one observed entry."""
        return np.flatnonzero(self.mask.any(axis=1))

    def batch(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return (
            torch.from_numpy(self.X[rows].copy()).to(DTYPE),
            torch.from_numpy(self.Y[rows].copy()).to(DTYPE),
            torch.from_numpy(self.mask[rows].copy()),
        )

    def observed(self, d):
        return self.Y[self.mask[:, d], d]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.X[rows], self.Y[rows], self.mask[rows], dict(self.meta))


# ─────────────────────────────────────────────────────────────
# SYNTHETIC SCENARIOS
# ─────────────────────────────────────────────────────────────
def synthetic_signal(t, kind):
    w, s = SCENARIOS[kind]
    t = np.asarray(t, dtype=np.float64)
    wave = np.cos(2.0 * np.pi * w * t ** s)
    y1 = AMPLITUDE * wave
    y2 = AMPLITUDE * (1.0 - t) * wave - AMPLITUDE * t * wave
    return y1, y2


def _two_output_set(t_first, t_second, kind, noise_sd, rng, meta):
    n1, n2 = len(t_first), len(t_second)
    X = np.concatenate([t_first, t_second]).reshape(-1, 1)
    Y = np.full((n1 + n2, 2), np.nan)
    mask = np.zeros((n1 + n2, 2), dtype=bool)
    Y[:n1, 0] = synthetic_signal(t_first, kind)[0] + noise_sd * rng.standard_normal(n1)
    Y[n1:, 1] = synthetic_signal(t_second, kind)[1] + noise_sd * rng.standard_normal(n2)
    mask[:n1, 0] = True
    mask[n1:, 1] = True
    return Dataset(X, Y, mask, meta)


def generate_synthetic(kind="LF", n_per_dim=N_PER_DIM, noise_sd=NOISE_SD, seed=0):
    """Train/test pair for one synthetic scenario.

    Train: output 1 observed at n_per_dim uniform times on (0, 0.8), output 2
    at another n_per_dim on (0.2, 1). Test: n_per_dim uniform times on (0, 1)
    per output.
    """
    if kind not in SCENARIOS:
        raise ValueError(f"unknown scenario {kind!r}; expected one of {sorted(SCENARIOS)}")
    if n_per_dim < 1:
        raise ValueError("n_per_dim must be >= 1")
    rng = np.random.default_rng(seed)
    t_a = rng.uniform(*TRAIN_INTERVALS[0], n_per_dim)
    t_b = rng.uniform(*TRAIN_INTERVALS[1], n_per_dim)
    t_c = rng.uniform(*TEST_INTERVAL, n_per_dim)
    t_d = rng.uniform(*TEST_INTERVAL, n_per_dim)
    generation = {"kind": kind, "n_per_dim": n_per_dim, "noise_sd": noise_sd, "seed": seed,
                  "w": SCENARIOS[kind][0], "s": SCENARIOS[kind][1]}
    meta = {"inputs": ["t"], "outputs": ["y1", "y2"], "generation": generation}
    train = _two_output_set(t_a, t_b, kind, noise_sd, rng, {**meta, "role": "train"})
    test = _two_output_set(t_c, t_d, kind, noise_sd, rng, {**meta, "role": "test"})
    log.info(f"Generated {kind}: {train.n_observed} train / {test.n_observed} test entries (seed {seed})")
    return train, test


# ─────────────────────────────────────────────────────────────
# CSV I/O
# ─────────────────────────────────────────────────────────────
def parse_cell(value, row, column, allow_missing=True):
    """Turn one CSV cell into a float; missing tokens become NaN."""
    text = "" if value is None else str(value).strip()
    if text in MISSING_TOKENS:
        if not allow_missing:
            raise ParseError("missing value in input column", row=row, column=column)
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as a number", row=row, column=column) from None


def load_csv(path, input_cols, output_cols):
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in [*input_cols, *output_cols] if c not in df.columns]
    if missing:
        raise ParseError(f"CSV missing columns: {missing}", row=0, column=missing[0])

    # header is line 1, so data row i sits on line i + 2
    X = np.array([[parse_cell(df.at[i, c], i + 2, c, allow_missing=False) for c in input_cols]
                  for i in range(len(df))], dtype=np.float64).reshape(len(df), len(input_cols))
    Y = np.array([[parse_cell(df.at[i, c], i + 2, c) for c in output_cols]
                  for i in range(len(df))], dtype=np.float64).reshape(len(df), len(output_cols))
    mask = ~np.isnan(Y)
    if not mask.any():
        raise NoObservedEntries(f"{path}: no observed output entries")
    log.info(f"Loaded {path}: {len(df)} rows, {int(mask.sum())} observed entries")
    return Dataset(X, Y, mask, {"inputs": list(input_cols), "outputs": list(output_cols),
                                "source": str(path)})


def to_frame(ds):
    df = pd.DataFrame(ds.X, columns=ds.meta["inputs"])
    for d, name in enumerate(ds.meta["outputs"]):
        df[name] = np.where(ds.mask[:, d], ds.Y[:, d], np.nan)
    return df


def save_csv(ds, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_frame(ds).to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="")
    log.info(f"Saved {ds.N} rows -> {path}")


def write_manifest(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    options = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
    path.write_bytes(orjson.dumps(payload, option=options))


# ─────────────────────────────────────────────────────────────
# STANDARDIZATION & SPLITS
# ─────────────────────────────────────────────────────────────
def output_stats(ds):
    stats = []
    for d, name in enumerate(ds.meta["outputs"]):
        obs = pd.Series(ds.observed(d))
        if len(obs) < 2:
            raise DegenerateOutput(f"output {name!r} has {len(obs)} observed entries; need >= 2")
        sd = float(obs.std())
        if not sd > 0:
            raise DegenerateOutput(f"output {name!r} has zero standard deviation")
        stats.append((float(obs.mean()), sd))
    return stats


def standardize(ds, stats=None):
    """Scale each output by observed-entry moments (or given (mean, sd) pairs).

    The recorded statistics compose with any earlier standardization, so
    destandardize always maps back to the original units.
    """
    stats = output_stats(ds) if stats is None else stats
    Y = (ds.Y - np.array([m for m, _ in stats])) / np.array([s for _, s in stats])
    previous = ds.meta.get("standardization")
    if previous:
        stats = [(pm + ps * m, ps * s) for (pm, ps), (m, s) in zip(previous, stats)]
    meta = {**ds.meta, "standardization": [list(s) for s in stats]}
    return Dataset(ds.X, Y, ds.mask, meta)


def destandardize(values, ds, d):
    stats = ds.meta.get("standardization")
    if not stats:
        return np.asarray(values, dtype=np.float64)
    mean, sd = stats[d]
    return np.asarray(values, dtype=np.float64) * sd + mean


def split(ds, test_fraction, seed, target_output=None):
    """Move a seeded random fraction of observed entries into a test set."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    rows, cols = np.nonzero(ds.mask)
    if target_output is not None:
        keep = cols == target_output
        rows, cols = rows[keep], cols[keep]
    n_test = int(round(test_fraction * len(rows)))
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(rows), size=n_test, replace=False))

    test_mask = np.zeros_like(ds.mask)
    test_mask[rows[pick], cols[pick]] = True
    train = Dataset(ds.X, ds.Y, ds.mask & ~test_mask, {**ds.meta, "role": "train"})
    test_rows = np.flatnonzero(test_mask.any(axis=1))
    test = Dataset(ds.X[test_rows], ds.Y[test_rows], test_mask[test_rows],
                   {**ds.meta, "role": "test"})
    log.info(f"Split: {train.n_observed} train / {test.n_observed} test entries")
    return train, test


# ─────────────────────────────────────────────────────────────
# REPORT
# ─────────────────────────────────────────────────────────────
def describe(ds):
    print("\n" + "=" * 58)
    print("  DATASET SUMMARY")
    print("=" * 58)
    print(f"  Rows      : {ds.N}")
    print(f"  Inputs    : {ds.meta['inputs']}")
    print(f"  Observed  : {ds.n_observed} of {ds.N * ds.D} entries")
    for d, name in enumerate(ds.meta["outputs"]):
        obs = ds.observed(d)
        if len(obs):
            print(f"  {name:10}: n={len(obs):5}  mean={obs.mean():9.3f}  "
                  f"min={obs.min():9.3f}  max={obs.max():9.3f}")
        else:
            print(f"  {name:10}: n=    0")
    print("=" * 58)


def main():
    parser = argparse.ArgumentParser(description="Generate or inspect cnmgp datasets")
    parser.add_argument("kind", nargs="?", default="LF", choices=sorted(SCENARIOS))
    parser.add_argument("--n", type=int, default=N_PER_DIM)
    parser.add_argument("--noise", type=float, default=NOISE_SD)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="data")
    parser.add_argument("--inspect")
    parser.add_argument("--inputs", default="t")
    parser.add_argument("--outputs", default="y1,y2")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(message)s")
    if args.inspect:
        describe(load_csv(args.inspect, args.inputs.split(","), args.outputs.split(",")))
        return

    train, test = generate_synthetic(args.kind, args.n, args.noise, args.seed)
    out = Path(args.out)
    save_csv(train, out / f"{args.kind}_train.csv")
    save_csv(test, out / f"{args.kind}_test.csv")
    write_manifest(out / f"{args.kind}_manifest.json", train.meta["generation"])
    describe(train)


if __name__ == "__main__":
    main()
