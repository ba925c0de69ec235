import numpy as np
import pytest

from data import (
    Dataset,
    destandardize,
    generate_synthetic,
    load_csv,
    output_stats,
    save_csv,
    split,
    standardize,
    synthetic_signal,
)
from errors import DegenerateOutput, NoObservedEntries, ParseError


# ─── synthetic scenarios ─────────────────────────────────────
def test_lf_signal_endpoints():
    y1, y2 = synthetic_signal(np.array([0.0, 1.0]), "LF")
    np.testing.assert_allclose(y1, [5.0, 5.0], atol=1e-12)
    np.testing.assert_allclose(y2, [5.0, -5.0], atol=1e-12)


def test_vf_uses_squared_time():
    t = np.array([0.3])
    y1, _ = synthetic_signal(t, "VF")
    assert y1[0] == pytest.approx(5.0 * np.cos(2 * np.pi * 5 * 0.09))


def test_synthetic_mask_structure():
    train, test = generate_synthetic("HF", n_per_dim=50, seed=3)
    assert (train.N, train.D, test.N) == (100, 2, 100)
    assert train.mask.sum(axis=0).tolist() == [50, 50]
    assert not (train.mask[:, 0] & train.mask[:, 1]).any()
    t1, t2 = train.X[train.mask[:, 0], 0], train.X[train.mask[:, 1], 0]
    assert t1.min() > 0.0 and t1.max() < 0.8
    assert t2.min() > 0.2 and t2.max() < 1.0
    assert test.X.min() >= 0.0 and test.X.max() <= 1.0
    assert train.meta["generation"]["kind"] == "HF"


def test_zero_noise_matches_signal():
    train, _ = generate_synthetic("VF", n_per_dim=20, noise_sd=0.0, seed=1)
    for d in range(2):
        rows = train.mask[:, d]
        expected = synthetic_signal(train.X[rows, 0], "VF")[d]
        np.testing.assert_array_equal(train.Y[rows, d], expected)


def test_generation_is_seeded():
    a, _ = generate_synthetic("LF", 10, seed=4)
    b, _ = generate_synthetic("LF", 10, seed=4)
    c, _ = generate_synthetic("LF", 10, seed=5)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.Y, b.Y)
    assert not np.array_equal(a.X, c.X)


def test_unknown_scenario():
    with pytest.raises(ValueError):
        generate_synthetic("XX")


# ─── dataset ─────────────────────────────────────────────────
def test_unobserved_entries_are_sentinels():
    ds = Dataset(np.arange(3.0), np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]),
                 np.array([[True, False], [True, True], [False, False]]))
    assert np.isnan(ds.Y[0, 1]) and np.isnan(ds.Y[2]).all()
    assert ds.active_rows().tolist() == [0, 1]
    assert ds.n_observed == 3


def test_dataset_copies_caller_arrays():
    X = np.arange(3.0)
    Dataset(X, np.ones(3))
    X[0] = 7.0      # still writable
    assert X.flags.writeable


# ─── CSV ─────────────────────────────────────────────────────
def write(tmp_path, text):
    path = tmp_path / "data.csv"
    path.write_text(text)
    return path


def test_load_csv_missing_cells(tmp_path):
    path = write(tmp_path, "t,a,b\n0.0,1.5,\n0.5,NaN,2\n1.0,3,4\n")
    ds = load_csv(path, ["t"], ["a", "b"])
    assert ds.mask.tolist() == [[True, False], [False, True], [True, True]]
    assert ds.Y[2].tolist() == [3.0, 4.0]
    assert ds.meta["outputs"] == ["a", "b"]


def test_load_csv_reports_row_and_column(tmp_path):
    path = write(tmp_path, "t,a\n0.0,1\n0.5,abc\n")
    with pytest.raises(ParseError) as info:
        load_csv(path, ["t"], ["a"])
    assert (info.value.row, info.value.column) == (3, "a")


def test_load_csv_missing_input_is_an_error(tmp_path):
    path = write(tmp_path, "t,a\n,1\n")
    with pytest.raises(ParseError):
        load_csv(path, ["t"], ["a"])


def test_load_csv_without_observations(tmp_path):
    path = write(tmp_path, "t,a\n0.0,\n1.0,nan\n")
    with pytest.raises(NoObservedEntries):
        load_csv(path, ["t"], ["a"])


def test_csv_save_load_is_exact(tmp_path):
    train, _ = generate_synthetic("LF", 15, seed=2)
    save_csv(train, tmp_path / "train.csv")
    back = load_csv(tmp_path / "train.csv", ["t"], ["y1", "y2"])
    np.testing.assert_array_equal(back.X, train.X)
    np.testing.assert_array_equal(back.mask, train.mask)
    np.testing.assert_array_equal(back.Y[back.mask], train.Y[train.mask])


# ─── standardization ─────────────────────────────────────────
FIXTURE_Y = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0], [5.0, 50.0],
                      [6.0, 60.0], [7.0, 70.0], [8.0, 80.0], [9.0, 90.0], [10.0, 100.0]])


def fixture_ds():
    return Dataset(np.linspace(0, 1, 10), FIXTURE_Y)


def test_standardize_fixture():
    ds = standardize(fixture_ds())
    np.testing.assert_allclose(ds.Y.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(ds.Y.std(axis=0, ddof=1), 1.0, rtol=1e-12)
    assert ds.meta["standardization"][0][0] == pytest.approx(5.5)


def test_standardize_is_idempotent():
    once = standardize(fixture_ds())
    twice = standardize(once)
    np.testing.assert_allclose(twice.Y, once.Y, atol=1e-12)
    np.testing.assert_allclose(twice.meta["standardization"], once.meta["standardization"], rtol=1e-12)


def test_destandardize_recovers_units():
    ds = standardize(fixture_ds())
    np.testing.assert_allclose(destandardize(ds.Y[:, 1], ds, 1), FIXTURE_Y[:, 1], rtol=1e-12)


def test_standardize_ignores_unobserved_entries():
    mask = np.ones((10, 2), dtype=bool)
    mask[:5, 0] = False
    ds = Dataset(np.linspace(0, 1, 10), FIXTURE_Y, mask)
    assert output_stats(ds)[0][0] == pytest.approx(8.0)


def test_constant_output_is_degenerate():
    ds = Dataset(np.arange(4.0), np.column_stack([np.ones(4), np.arange(4.0)]))
    with pytest.raises(DegenerateOutput):
        standardize(ds)


def test_single_observation_is_degenerate():
    mask = np.array([[True], [False], [False]])
    with pytest.raises(DegenerateOutput):
        standardize(Dataset(np.arange(3.0), np.arange(3.0), mask))


# ─── splitting ───────────────────────────────────────────────
def test_split_counts_and_partition():
    rng = np.random.default_rng(0)
    ds = Dataset(np.arange(500.0), rng.normal(size=(500, 2)))
    train, test = split(ds, 0.2, seed=1)
    assert test.n_observed == 200
    assert train.n_observed == 800
    test_rows = np.flatnonzero(~train.mask.all(axis=1))
    # every test entry came out of the train mask at the same row
    rebuilt = train.mask.copy()
    rebuilt[test_rows] |= test.mask
    assert rebuilt.all()


def test_split_target_output_only():
    rng = np.random.default_rng(1)
    ds = Dataset(np.arange(100.0), rng.normal(size=(100, 3)))
    train, test = split(ds, 0.3, seed=2, target_output=1)
    assert test.mask[:, [0, 2]].sum() == 0
    assert test.n_observed == 30
    assert train.mask[:, 0].all() and train.mask[:, 2].all()


def test_split_is_seeded():
    ds = Dataset(np.arange(50.0), np.arange(50.0))
    a, _ = split(ds, 0.2, seed=3)
    b, _ = split(ds, 0.2, seed=3)
    np.testing.assert_array_equal(a.mask, b.mask)
